import json

import numpy as np
import pytest

from volrep.cli import build_parser, main

from cli_pipeline import run_pipeline


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    info = run_pipeline(root)
    return root, info


def test_outputs_exist(pipeline):
    root, info = pipeline
    tokens = json.loads((root / "tokens" / "index.json").read_text())
    assert tokens["tokens"] and all((root / "tokens" / f["path"]).exists() for f in tokens["files"].values())
    assert (root / "vq" / "vq.pt").exists()
    assert (root / "lm" / "perplexity.csv").read_text().count("\n") > 3
    log = [json.loads(l) for l in (root / "clip" / "train_log.jsonl").read_text().splitlines()]
    assert [r["step"] for r in log if "retrieval" in r] == [3, 6]
    meta = json.loads((root / "emb.json").read_text())
    emb = np.fromfile(root / "emb.bin", dtype="<f4").reshape(-1, meta["dim"])
    assert len(meta["study_ids"]) == len(set(meta["study_ids"])) == 30 == len(emb)
    explain = root / "explain" / f"lime_{info['study']}_d{info['label']}.json"
    assert json.loads(explain.read_text())["top_k"]
    assert (root / "explain" / "lime_overlays.png").exists()
    for fig in ("vq/vq_loss.png", "lm/perplexity.png", "clip/clip_loss.png", "clip/retrieval.png"):
        assert (root / fig).stat().st_size > 0
    summary = json.loads((root / "report" / "summary.json").read_text())
    for fig in summary["figures"]:
        assert (root / "report" / fig).stat().st_size > 0
    assert {"npr.png", "auc_matrix.png", "fairness.png"} <= set(summary["figures"])
    assert {"npr", "auc_matrix", "fairness", "silhouette", "skewness"} <= set(summary["sections"])
    pri = json.loads((root / "priority" / "metrics.json").read_text())
    assert np.asarray(pri["confusion"]).shape == (3, 3)


def test_missing_checkpoint_errors(pipeline, tmp_path):
    root, _ = pipeline
    with pytest.raises(SystemExit):
        main(["embed", "--ckpt", str(tmp_path / "nope.pt"), "--ckpt-vq", str(root / "vq" / "vq.pt"),
              "--cohort", str(root / "cohort"), "--out", str(tmp_path / "e.bin")])


def test_parser_rejects_bad_switch():
    with pytest.raises(SystemExit):
        build_parser().parse_args(["train-vq", "--cohort", "x", "--permute", "maybe", "--out", "y"])
