"""Synthetic volumetric cohort with planted lesions and templated reports."""

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .reports import TemplateTable, render_full_report, render_report
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
    orientation_code,
)

SEQUENCE_TYPES = {
    # name: (tissue intensity, lesion gain)
    "T1": (0.40, 1.0),
    "T2": (0.30, 1.2),
    "FLAIR": (0.35, 1.3),
    "T1 POST": (0.40, 1.4),
    "DWI": (0.25, 1.1),
}
PLANE_ABBR = {"axial": "AX", "coronal": "COR", "sagittal": "SAG"}
STUDY_NAMES = (
    "MRI BRAIN WITHOUT CONTRAST",
    "MRI BRAIN WITH AND WITHOUT CONTRAST",
    "MRI BRAIN STROKE PROTOCOL",
    "MRI BRAIN TUMOR PROTOCOL",
)
LESION_SHAPES = ("sphere", "cube", "ring", "cross")

DEFAULT_SUBGROUPS = {
    "sex": {"F": 0.5, "M": 0.5},
    "age_band": {"0-17": 0.15, "18-33": 0.2, "34-61": 0.4, "62+": 0.25},
    "race_code": {"A": 0.4, "B": 0.3, "C": 0.2, "D": 0.1},
    "insurance_code": {"government": 0.45, "private": 0.55},
    "scanner_code": {"siemens": 0.4, "ge": 0.35, "philips": 0.25},
}


@dataclass
class CohortConfig:
    n_studies: int = 200
    volume_shape: tuple = (64, 64, 16)
    patch_dims: tuple = (32, 32, 4)
    n_diagnoses: int = 12
    prevalence: float = 0.15
    min_sequences: int = 2
    max_sequences: int = 4
    prospective_fraction: float = 0.2
    repeat_patient_prob: float = 0.25
    lesion_contrast: float = 0.35
    plant_prob: float = 0.85
    noise_std: float = 0.02
    flip_prob: float = 0.0
    # per-diagnosis priority level; empty means the default split 0-3 / 4-8 / 9-11
    priority_map: list = field(default_factory=list)
    subgroups: dict = field(default_factory=lambda: {k: dict(v) for k, v in DEFAULT_SUBGROUPS.items()})

    def __post_init__(self):
        self.volume_shape = tuple(int(v) for v in self.volume_shape)
        self.patch_dims = tuple(int(p) for p in self.patch_dims)
        if len(self.volume_shape) != 3 or len(self.patch_dims) != 3:
            raise CohortError("volume_shape and patch_dims must have 3 entries")
        if any(p < 1 for p in self.patch_dims):
            raise CohortError(f"patch dims must be positive, got {self.patch_dims}")
        if any(v < p for v, p in zip(self.volume_shape, self.patch_dims)):
            raise CohortError(f"volume shape {self.volume_shape} is smaller than patch dims {self.patch_dims}")
        if not 2 <= self.min_sequences <= self.max_sequences <= len(PLANES) * len(SEQUENCE_TYPES):
            raise CohortError("need 2 <= min_sequences <= max_sequences")
        if not 0 <= self.prospective_fraction <= 1:
            raise CohortError("prospective_fraction must lie in [0, 1]")
        if self.n_diagnoses < 1:
            raise CohortError("need at least one diagnosis")
        top = max(t for t, _ in SEQUENCE_TYPES.values()) + 0.1
        if top + self.lesion_contrast > 1:
            raise CohortError("lesion_contrast too large to stay within [0, 1]")
        if not self.priority_map:
            self.priority_map = default_priority_map(self.n_diagnoses)
        if len(self.priority_map) != self.n_diagnoses:
            raise CohortError("priority_map must list one level per diagnosis")
        for attr in DEFAULT_SUBGROUPS:
            if attr not in self.subgroups:
                raise CohortError(f"missing subgroup distribution for {attr}")

    @property
    def grid_shape(self):
        return tuple(math.ceil(v / p) for v, p in zip(self.volume_shape, self.patch_dims))

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise CohortError(f"unknown config keys: {sorted(unknown)}")
        kw = dict(d)
        if "subgroups" in kw:
            merged = {k: dict(v) for k, v in DEFAULT_SUBGROUPS.items()}
            merged.update(kw["subgroups"])
            kw["subgroups"] = merged
        return cls(**kw)

    @classmethod
    def from_toml(cls, path):
        import tomli

        with open(path, "rb") as fh:
            return cls.from_dict(tomli.load(fh))

    def to_dict(self):
        d = asdict(self)
        d["volume_shape"] = list(self.volume_shape)
        d["patch_dims"] = list(self.patch_dims)
        return d


def default_priority_map(n):
    # 12 diagnoses -> 0-3 normal, 4-8 medium, 9-11 high; scaled for other sizes
    lo, hi = round(n * 4 / 12), round(n * 9 / 12)
    return [0 if d < lo else 1 if d < hi else 2 for d in range(n)]


def diagnosis_to_priority(bits, priority_map):
    levels = [priority_map[d] for d, b in enumerate(bits) if b]
    return Priority(max(levels, default=0))


def zone_cells(n_diagnoses, grid_shape):
    """Diagnosis-specific token cells; central slabs first, reused cyclically past the grid size."""
    gz = grid_shape[2]
    mid = sorted(range(gz), key=lambda k: (abs(k - (gz - 1) / 2), k))
    cells = [(i, j, k) for k in mid for j in range(grid_shape[1]) for i in range(grid_shape[0])]
    return [cells[d % len(cells)] for d in range(n_diagnoses)]


@dataclass(frozen=True)
class Archetype:
    diagnosis: int
    shape: str
    cell: tuple
    gain: float


def archetypes(config):
    cells = zone_cells(config.n_diagnoses, config.grid_shape)
    out = []
    for d, cell in enumerate(cells):
        shape = LESION_SHAPES[d % len(LESION_SHAPES)]
        gain = 1.0 + 0.25 * ((d // len(LESION_SHAPES)) % 3)
        out.append(Archetype(d, shape, cell, gain))
    return out


def template_table(config):
    return TemplateTable.build([a.cell for a in archetypes(config)], config.grid_shape)


def lesion_mask(arch, shape, patch_dims, rng):
    """Boolean mask of one lesion in canonical coordinates, confined to its cell."""
    lo = [c * p for c, p in zip(arch.cell, patch_dims)]
    hi = [min(l + p, s) for l, p, s in zip(lo, patch_dims, shape)]
    ext = [h - l for l, h in zip(lo, hi)]
    centre = [l + (e - 1) / 2 + rng.uniform(-e / 8, e / 8) for l, e in zip(lo, ext)]
    radii = [max(0.3 * ext[0], 1.0), max(0.3 * ext[1], 1.0), max(0.4 * ext[2], 0.75)]
    x, y, z = np.meshgrid(*(np.arange(s) for s in shape), indexing="ij")
    u, v, w = ((g - c) / r for g, c, r in zip((x, y, z), centre, radii))
    slab = np.abs(w) <= 1
    if arch.shape == "sphere":
        m = u**2 + v**2 + w**2 <= 1
    elif arch.shape == "cube":
        m = (np.abs(u) <= 0.8) & (np.abs(v) <= 0.8) & slab
    elif arch.shape == "ring":
        r2 = u**2 + v**2
        m = (r2 <= 1) & (r2 >= 0.35) & slab
    else:
        m = (((np.abs(u) <= 0.3) & (np.abs(v) <= 1)) | ((np.abs(v) <= 0.3) & (np.abs(u) <= 1))) & slab
    box = np.zeros(shape, dtype=bool)
    box[lo[0] : hi[0], lo[1] : hi[1], lo[2] : hi[2]] = True
    m &= box
    if not m.any():
        m[tuple(int(round(c)) for c in centre)] = True
    return m, box


def _brain(shape, rng):
    centre = [(s - 1) / 2 + rng.uniform(-1, 1) for s in shape]
    semi = [0.46 * shape[0], 0.46 * shape[1], 0.62 * shape[2]]
    grids = np.meshgrid(*(np.arange(s) for s in shape), indexing="ij")
    r = sum(((g - c) / a) ** 2 for g, c, a in zip(grids, centre, semi))
    radial = np.sqrt((grids[0] - centre[0]) ** 2 + (grids[1] - centre[1]) ** 2)
    texture = 0.05 * np.sin(radial / 4.0 + rng.uniform(0, 2 * np.pi))
    return r <= 1, texture


def _draw(rng, dist):
    keys = list(dist)
    p = np.asarray([dist[k] for k in keys], dtype=float)
    return keys[int(rng.choice(len(keys), p=p / p.sum()))]


def _to_plane(arr, plane, flips):
    out = np.transpose(arr, PLANE_AXES[plane])
    for ax, f in enumerate(flips):
        if f:
            out = np.flip(out, axis=ax)
    return np.ascontiguousarray(out)


def build_cohort(config, seed):
    """Generate the cohort in memory; identical (config, seed) give identical records."""
    root = np.random.default_rng(seed)
    arche = archetypes(config)
    table = template_table(config)
    vocab = table.vocabulary()
    prevalence = np.broadcast_to(np.asarray(config.prevalence, dtype=float), (config.n_diagnoses,))
    n_pro = int(round(config.n_studies * config.prospective_fraction))
    splits = ["retrospective"] * (config.n_studies - n_pro) + ["prospective"] * n_pro
    combos = [(p, t) for p in PLANES for t in SEQUENCE_TYPES]

    patients = {"retrospective": [], "prospective": []}
    patient_attrs = {}
    records = []
    child_seeds = root.spawn(config.n_studies)
    next_patient = 0
    for idx, (split, rng) in enumerate(zip(splits, child_seeds)):
        study_id = f"S{idx:05d}"
        pool = patients[split]
        if pool and rng.random() < config.repeat_patient_prob:
            patient_id = pool[int(rng.integers(len(pool)))]
        else:
            patient_id = f"P{next_patient:05d}"
            next_patient += 1
            pool.append(patient_id)
            patient_attrs[patient_id] = {
                k: _draw(rng, config.subgroups[k]) for k in ("sex", "age_band", "race_code", "insurance_code")
            }
        subgroup = SubgroupAttrs(scanner_code=_draw(rng, config.subgroups["scanner_code"]), **patient_attrs[patient_id])

        bits = tuple(int(b) for b in (rng.random(config.n_diagnoses) < prevalence))
        labels = LabelVector(bits, diagnosis_to_priority(bits, config.priority_map))
        report_seed = int(rng.integers(1 << 31))
        report = render_report(bits, table, report_seed, vocab)
        report_full = render_full_report(report, table, report_seed + 1)

        n_seq = int(rng.integers(config.min_sequences, config.max_sequences + 1))
        picks = rng.choice(len(combos), size=n_seq, replace=False)
        positives = [d for d, b in enumerate(bits) if b]
        planted = {d: rng.random(n_seq) < config.plant_prob for d in positives}
        for d in positives:
            if not planted[d].any():
                planted[d][int(rng.integers(n_seq))] = True

        brain, texture = _brain(config.volume_shape, rng)
        lesions = {d: lesion_mask(arche[d], config.volume_shape, config.patch_dims, rng) for d in positives}
        sequences = []
        for s, c in enumerate(picks):
            plane, stype = combos[int(c)]
            tissue, gain = SEQUENCE_TYPES[stype]
            vol = np.where(brain, tissue + texture, 0.0)
            vol = vol + rng.normal(0, config.noise_std, vol.shape) * brain
            vol = np.clip(vol, 0.0, 1.0)
            masks = {}
            for d in positives:
                if not planted[d][s]:
                    continue
                m, box = lesions[d]
                rest = box & ~m
                background = float(vol[rest].mean()) if rest.any() else 0.0
                level = background + config.lesion_contrast * arche[d].gain * gain
                noise = np.abs(rng.normal(0, config.noise_std, int(m.sum())))
                vol[m] = np.minimum(level + noise, 1.0)
                masks[d] = m
            flips = tuple(bool(f) for f in rng.random(3) < config.flip_prob)
            axes = PLANE_AXES[plane]
            spacing = tuple((1.0, 1.0, 4.0)[a] for a in axes)
            meta = SequenceMeta(f"{PLANE_ABBR[plane]} {stype}", plane, orientation_code(axes, flips))
            volume = VoxelVolume(_to_plane(vol.astype(np.float32), plane, flips), spacing)
            native_masks = {d: _to_plane(m, plane, flips) for d, m in masks.items()}
            sequences.append(Sequence(meta, volume, native_masks))

        study_name = STUDY_NAMES[int(rng.integers(len(STUDY_NAMES)))]
        records.append(
            StudyRecord(study_id, patient_id, study_name, sequences, report, report_full, labels, subgroup, split)
        )
    return records
