"""Templated itemized reports: one line per positive diagnosis."""

from dataclasses import dataclass, field

import numpy as np

from ..vocab import Vocabulary, normalize_line, normalize_text

NO_FINDINGS = "No acute findings."

DIAGNOSIS_NAMES = [
    "chronic microvascular change",
    "arachnoid cyst",
    "pineal cyst",
    "developmental venous anomaly",
    "meningioma",
    "cavernous malformation",
    "chronic infarct",
    "demyelinating plaque",
    "ventriculomegaly",
    "acute infarct",
    "intracranial hemorrhage",
    "brain abscess",
    "glioblastoma",
    "metastasis",
    "medulloblastoma",
    "subdural hematoma",
]

PHRASINGS = [
    "{name} in the {zone} .",
    "there is {name} involving the {zone} .",
    "findings compatible with {name} , {zone} .",
]

BOILERPLATE = [
    "technique : multiplanar multisequence mri of the brain was performed .",
    "comparison : none available .",
    "clinical history : headache .",
    "clinical history : follow up imaging .",
    "the visualized orbits are unremarkable .",
    "the paranasal sinuses are clear .",
    "the calvarium is intact .",
    "motion artifact limits evaluation .",
    "gadolinium contrast was administered without complication .",
    "the major intracranial flow voids are preserved .",
]

_SIDE = ("right", "left")
_AP = ("anterior", "posterior")
_LEVEL = ("inferior", "lower", "upper", "superior")


def diagnosis_name(d):
    if d < len(DIAGNOSIS_NAMES):
        return DIAGNOSIS_NAMES[d]
    return f"unspecified finding c{d}"


def zone_text(cell, grid_shape):
    i, j, k = cell
    level = _LEVEL[min(k * len(_LEVEL) // max(grid_shape[2], 1), len(_LEVEL) - 1)]
    return f"{_SIDE[i % 2]} {_AP[j % 2]} {level} region"


@dataclass(frozen=True)
class ReportDoc:
    text: str
    token_ids: tuple


@dataclass
class TemplateTable:
    """Per-diagnosis phrasings (each entry already has name and zone filled in)."""

    lines: list
    boilerplate: list = field(default_factory=lambda: list(BOILERPLATE))

    @classmethod
    def build(cls, zones, grid_shape):
        lines = []
        for d, cell in enumerate(zones):
            name, zone = diagnosis_name(d), zone_text(cell, grid_shape)
            lines.append([normalize_line(p.format(name=name, zone=zone)) for p in PHRASINGS])
        return cls(lines)

    @property
    def n_diagnoses(self):
        return len(self.lines)

    def lexicon(self):
        texts = [NO_FINDINGS] + self.boilerplate + [l for ls in self.lines for l in ls]
        return texts

    def vocabulary(self):
        return Vocabulary.from_texts(self.lexicon())


def render_report(bits, table, seed, vocab=None):
    """Render the itemized report for a label vector; phrasing is picked by ``seed``."""
    bits = np.asarray(bits).astype(bool)
    if len(bits) != table.n_diagnoses:
        raise ValueError(f"label vector has {len(bits)} bits, template table covers {table.n_diagnoses}")
    if any(len(set(ls)) < 2 for ls in table.lines):
        raise ValueError("template table needs at least 2 distinct phrasings per diagnosis")
    rng = np.random.default_rng(seed)
    choices = rng.integers(0, 1 << 30, size=len(bits))
    lines = [table.lines[d][choices[d] % len(table.lines[d])] for d in np.flatnonzero(bits)]
    text = "\n".join(lines) if lines else NO_FINDINGS
    vocab = vocab or table.vocabulary()
    return ReportDoc(text=text, token_ids=tuple(vocab.encode(text)))


def render_full_report(report, table, seed):
    """Pad an itemized report with distractor boilerplate lines."""
    rng = np.random.default_rng(seed)
    n = int(rng.integers(3, 6))
    picks = rng.choice(len(table.boilerplate), size=n, replace=False)
    head = [table.boilerplate[i] for i in picks[:2]]
    tail = [table.boilerplate[i] for i in picks[2:]]
    return "\n".join(head + [normalize_text(report.text)] + tail)


def parse_report(text, table):
    """Recover the set of diagnoses whose templates appear as lines of ``text``."""
    lookup = {}
    for d, ls in enumerate(table.lines):
        for l in ls:
            lookup[l] = d
    return {lookup[l] for l in normalize_text(text).split("\n") if l in lookup}
