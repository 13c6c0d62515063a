from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

PLANES = ("axial", "coronal", "sagittal")
SPLITS = ("retrospective", "prospective")

# Native axis order of each plane, expressed in canonical (axial) axes.
PLANE_AXES = {"axial": (0, 1, 2), "coronal": (0, 2, 1), "sagittal": (2, 0, 1)}

_AXIS_LETTERS = (("R", "L"), ("A", "P"), ("S", "I"))


def orientation_codes():
    """All 48 signed axis orders, e.g. RAS, LAS, SRA."""
    from itertools import permutations, product

    codes = []
    for perm in permutations(range(3)):
        for signs in product((0, 1), repeat=3):
            codes.append("".join(_AXIS_LETTERS[a][s] for a, s in zip(perm, signs)))
    return tuple(codes)


ORIENTATION_CODES = orientation_codes()


def orientation_code(axes, flips=(False, False, False)):
    return "".join(_AXIS_LETTERS[a][int(f)] for a, f in zip(axes, flips))


def parse_orientation(code):
    """Inverse of orientation_code: (canonical axis per native axis, flip per native axis)."""
    if code not in ORIENTATION_CODES:
        raise ValueError(f"unknown orientation code {code!r}")
    axes, flips = [], []
    for letter in code:
        for a, pair in enumerate(_AXIS_LETTERS):
            if letter in pair:
                axes.append(a)
                flips.append(pair.index(letter) == 1)
    return tuple(axes), tuple(flips)


class Priority(IntEnum):
    normal = 0
    medium = 1
    high = 2


class CohortError(Exception):
    """Raised for invalid cohort configuration or unreadable cohort directories."""

    def __init__(self, message, study_id=None):
        super().__init__(message if study_id is None else f"{study_id}: {message}")
        self.study_id = study_id


@dataclass(eq=False)
class VoxelVolume:
    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise ValueError(f"volume must be 3D, got shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)) or self.data.min() < 0 or self.data.max() > 1:
            raise ValueError("volume intensities must be finite and lie in [0, 1]")
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def shape(self):
        return self.data.shape

    def __eq__(self, other):
        return (
            isinstance(other, VoxelVolume)
            and self.spacing == other.spacing
            and np.array_equal(self.data, other.data)
        )


@dataclass(frozen=True)
class SequenceMeta:
    sequence_name: str
    plane: str
    orientation_code: str

    def __post_init__(self):
        if self.plane not in PLANES:
            raise ValueError(f"unknown plane {self.plane!r}")
        if self.orientation_code not in ORIENTATION_CODES:
            raise ValueError(f"unknown orientation code {self.orientation_code!r}")


@dataclass(eq=False)
class Sequence:
    meta: SequenceMeta
    volume: VoxelVolume
    # diagnosis index -> boolean voxel mask in the sequence's native orientation
    lesion_masks: dict = field(default_factory=dict)

    def __eq__(self, other):
        if not isinstance(other, Sequence):
            return NotImplemented
        return (
            self.meta == other.meta
            and self.volume == other.volume
            and self.lesion_masks.keys() == other.lesion_masks.keys()
            and all(np.array_equal(m, other.lesion_masks[d]) for d, m in self.lesion_masks.items())
        )


@dataclass(frozen=True)
class LabelVector:
    bits: tuple
    priority: Priority

    @property
    def positives(self):
        return [d for d, b in enumerate(self.bits) if b]


@dataclass(frozen=True)
class SubgroupAttrs:
    sex: str
    age_band: str
    race_code: str
    insurance_code: str
    scanner_code: str

    def as_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class StudyRecord:
    study_id: str
    patient_id: str
    study_name: str
    sequences: list
    report: object
    report_full: str
    labels: LabelVector
    subgroup: SubgroupAttrs
    split: str

    def __post_init__(self):
        if len(self.sequences) < 2:
            raise CohortError("a study needs at least 2 sequences", self.study_id)
        if self.split not in SPLITS:
            raise CohortError(f"unknown split {self.split!r}", self.study_id)
