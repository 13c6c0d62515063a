from .generator import (
    CohortConfig,
    archetypes,
    build_cohort,
    default_priority_map,
    diagnosis_to_priority,
    template_table,
)
from .reports import NO_FINDINGS, ReportDoc, TemplateTable, parse_report, render_full_report, render_report
from .store import generate_cohort, load_cohort, load_manifest, write_cohort
from .types import (
    PLANE_AXES,
    PLANES,
    CohortError,
    LabelVector,
    Priority,
    Sequence,
    SequenceMeta,
    StudyRecord,
    SubgroupAttrs,
    VoxelVolume,
)
