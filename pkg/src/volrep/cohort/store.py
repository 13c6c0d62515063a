"""On-disk cohort layout: JSON manifest + raw little-endian volumes with sidecars."""

import hashlib
import json
import os

import numpy as np

from .generator import CohortConfig, build_cohort, template_table
from .reports import ReportDoc
from .types import (
    CohortError,
    LabelVector,
    Priority,
    Sequence,
    SequenceMeta,
    StudyRecord,
    SubgroupAttrs,
    VoxelVolume,
)

MANIFEST_VERSION = 1
MANIFEST_NAME = "manifest.json"


def _sha256(raw):
    return hashlib.sha256(raw).hexdigest()


def _write(path, raw):
    os.makedirs(os.path.dirname(path), exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(raw)
    return _sha256(raw)


def write_cohort(records, out_dir, config=None, seed=None):
    """Persist ``records`` under ``out_dir`` and return the manifest dict."""
    studies = []
    for rec in records:
        seqs = []
        for s, seq in enumerate(rec.sequences):
            base = f"volumes/{rec.study_id}/s{s}"
            raw = seq.volume.data.astype("<f4").tobytes()
            sidecar = {
                "shape": list(seq.volume.shape),
                "spacing": list(seq.volume.spacing),
                "orientation_code": seq.meta.orientation_code,
                "dtype": "<f4",
            }
            _write(os.path.join(out_dir, base + ".json"), json.dumps(sidecar, sort_keys=True).encode())
            lesions = {}
            for d, m in sorted(seq.lesion_masks.items()):
                mraw = np.asarray(m, dtype=np.uint8).tobytes()
                lesions[str(d)] = {"path": f"{base}_d{d}.u8", "sha256": _write(os.path.join(out_dir, f"{base}_d{d}.u8"), mraw)}
            seqs.append(
                {
                    "name": seq.meta.sequence_name,
                    "plane": seq.meta.plane,
                    "orientation_code": seq.meta.orientation_code,
                    "shape": list(seq.volume.shape),
                    "spacing": list(seq.volume.spacing),
                    "path": base + ".f32",
                    "sidecar": base + ".json",
                    "sha256": _write(os.path.join(out_dir, base + ".f32"), raw),
                    "lesions": lesions,
                }
            )
        studies.append(
            {
                "study_id": rec.study_id,
                "patient_id": rec.patient_id,
                "study_name": rec.study_name,
                "split": rec.split,
                "labels": list(rec.labels.bits),
                "priority": int(rec.labels.priority),
                "subgroup": rec.subgroup.as_dict(),
                "report": rec.report.text,
                "report_full": rec.report_full,
                "sequences": seqs,
            }
        )
    manifest = {
        "version": MANIFEST_VERSION,
        "seed": seed,
        "config": config.to_dict() if config is not None else None,
        "studies": studies,
    }
    validate_manifest(manifest)
    with open(os.path.join(out_dir, MANIFEST_NAME), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return manifest


def generate_cohort(config, seed, out_dir):
    records = build_cohort(config, seed)
    return write_cohort(records, out_dir, config, seed)


def validate_manifest(manifest):
    if manifest.get("version") != MANIFEST_VERSION:
        raise CohortError(f"unknown manifest version {manifest.get('version')!r}")
    seen = set()
    for st in manifest["studies"]:
        sid = st["study_id"]
        if sid in seen:
            raise CohortError("duplicate study_id in manifest", sid)
        seen.add(sid)
        if len(st["sequences"]) < 2:
            raise CohortError("study lists fewer than 2 sequences", sid)


def _read(root, rel, sha, sid):
    path = os.path.join(root, rel)
    if not os.path.exists(path):
        raise CohortError(f"missing file {rel}", sid)
    with open(path, "rb") as fh:
        raw = fh.read()
    if sha is not None and _sha256(raw) != sha:
        raise CohortError(f"checksum mismatch for {rel}", sid)
    return raw


def load_manifest(path):
    mpath = os.path.join(path, MANIFEST_NAME) if os.path.isdir(path) else path
    with open(mpath) as fh:
        manifest = json.load(fh)
    validate_manifest(manifest)
    return manifest


def load_cohort(path):
    """Read a cohort directory back into StudyRecords, verifying every checksum."""
    root = path if os.path.isdir(path) else os.path.dirname(path)
    manifest = load_manifest(path)
    config = CohortConfig.from_dict(manifest["config"]) if manifest.get("config") else None
    table = template_table(config) if config else None
    vocab = table.vocabulary() if table else None
    records = []
    for st in manifest["studies"]:
        sid = st["study_id"]
        seqs = []
        for sq in st["sequences"]:
            shape = tuple(sq["shape"])
            data = np.frombuffer(_read(root, sq["path"], sq["sha256"], sid), dtype="<f4")
            if data.size != int(np.prod(shape)):
                raise CohortError(f"{sq['path']} holds {data.size} voxels, expected shape {shape}", sid)
            masks = {}
            for d, info in sq["lesions"].items():
                m = np.frombuffer(_read(root, info["path"], info["sha256"], sid), dtype=np.uint8)
                masks[int(d)] = m.reshape(shape).astype(bool)
            meta = SequenceMeta(sq["name"], sq["plane"], sq["orientation_code"])
            seqs.append(Sequence(meta, VoxelVolume(data.reshape(shape).copy(), tuple(sq["spacing"])), masks))
        bits = tuple(int(b) for b in st["labels"])
        token_ids = tuple(vocab.encode(st["report"])) if vocab else ()
        records.append(
            StudyRecord(
                study_id=sid,
                patient_id=st["patient_id"],
                study_name=st["study_name"],
                sequences=seqs,
                report=ReportDoc(st["report"], token_ids),
                report_full=st["report_full"],
                labels=LabelVector(bits, Priority(st["priority"])),
                subgroup=SubgroupAttrs(**st["subgroup"]),
                split=st["split"],
            )
        )
    return records
