from itertools import product

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from volrep.heads import (
    LOSS_KINDS,
    DiagnosisHead,
    HeadConfig,
    PriorityHead,
    auroc,
    binary_ordinal_loss,
    compare_priority_losses,
    confusion_matrix,
    decode_binary_ordinal,
    load_heads,
    normal_high_confusion,
    ordinal_triplet_loss,
    predict,
    save_heads,
    train_multilabel_head,
    train_priority_head,
)

from oracles import auroc_pairs


def test_auroc_hand_listed_six_points():
    scores = [0.1, 0.4, 0.35, 0.8, 0.4, 0.9]
    labels = [0, 0, 1, 1, 1, 0]
    assert auroc(scores, labels) == auroc_pairs(scores, labels) == pytest.approx(4.5 / 9)


@settings(max_examples=300, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 5), st.booleans()), min_size=1, max_size=20))
def test_auroc_matches_pair_counting(items):
    scores = [s for s, _ in items]
    labels = [y for _, y in items]
    expected = auroc_pairs(scores, labels)
    got = auroc(scores, labels)
    if expected is None:
        assert got is None
    else:
        assert got == pytest.approx(expected, abs=1e-12)


def _separable(rng, n=200, d=8, n_labels=3):
    y = (rng.random((n, n_labels)) < 0.4).astype(np.float32)
    x = rng.normal(size=(n, d)).astype(np.float32) * 0.1
    x[:, :n_labels] += 2 * y - 1
    return x, y


def test_multilabel_separable_and_shuffled(rng):
    x, y = _separable(rng)
    _, aucs = train_multilabel_head(x[:150], y[:150], x[150:], y[150:], HeadConfig(steps=200))
    assert all(a == 1.0 for a in aucs)
    null = []
    for seed in range(5):
        yy = np.random.default_rng(seed).permutation(y)
        _, a = train_multilabel_head(x[:150], yy[:150], x[150:], yy[150:], HeadConfig(steps=100, seed=seed))
        null.extend(a)
    assert abs(np.mean(null) - 0.5) <= 0.1


def test_absent_auroc_for_missing_positives(rng):
    x, y = _separable(rng, n=60)
    y_eval = y[40:].copy()
    y_eval[:, 1] = 0
    _, aucs = train_multilabel_head(x[:40], y[:40], x[40:], y_eval, HeadConfig(steps=20))
    assert aucs[1] is None and aucs[0] is not None


def test_binary_ordinal_decode_examples():
    assert decode_binary_ordinal([0.9, 0.2]) == 1
    assert decode_binary_ordinal([0.1, 0.1]) == 0
    assert decode_binary_ordinal([0.9, 0.7]) == 2


def test_binary_ordinal_decode_monotone():
    grid = np.linspace(0, 1, 21)
    for a, b in product(grid, grid):
        c = decode_binary_ordinal([a, b])
        assert decode_binary_ordinal([min(a + 0.1, 1), b]) >= c
        assert decode_binary_ordinal([a, min(b + 0.1, 1)]) >= c


def test_confusion_matrix_perfect():
    y = [0, 1, 2, 2, 1, 0, 0]
    cm = confusion_matrix(y, y)
    assert (cm == np.diag(np.diag(cm))).all() and cm.trace() == 7
    assert confusion_matrix([0, 2], [2, 0])[0, 2] == 1


def _ordinal_data(rng, n=240):
    y = rng.integers(0, 3, size=n)
    x = rng.normal(size=(n, 6)).astype(np.float32) * 0.3
    x[:, 0] += y * 2.0
    return x, y


def test_all_losses_fit_separable_ordinal_data(rng):
    x, y = _ordinal_data(rng)
    rows, best = compare_priority_losses(x[:180], y[:180], x[180:], y[180:], HeadConfig(steps=300))
    assert set(rows) == set(LOSS_KINDS)
    for kind, row in rows.items():
        assert row["confusion"].shape == (3, 3)
        assert row["accuracy"] >= 0.95, kind
    assert normal_high_confusion(rows[best]["confusion"]) == min(r["normal_high"] for r in rows.values())


def test_unknown_loss_kind(rng):
    x, y = _ordinal_data(rng, 20)
    with pytest.raises(ValueError):
        train_priority_head(x, y, "hinge")
    with pytest.raises(ValueError):
        PriorityHead(6, "hinge")


def test_probability_contracts(rng, tmp_path):
    x, y = _ordinal_data(rng, 60)
    head, _, _ = train_priority_head(x, y, "cross_entropy", config=HeadConfig(steps=30))
    p = head.scores(x)
    np.testing.assert_allclose(p.sum(1), 1.0, atol=1e-5)
    dh = DiagnosisHead(6, 3)
    recs = predict(dh, x, [f"S{i}" for i in range(60)], ["prospective"] * 60, head)
    again = predict(dh, x, [f"S{i}" for i in range(60)], ["prospective"] * 60, head)
    assert [r.as_dict() for r in recs] == [r.as_dict() for r in again]
    single = predict(dh, x[5:6], ["S5"], ["prospective"], head)[0]
    np.testing.assert_allclose(single.probabilities, recs[5].probabilities, atol=1e-6)
    assert all(0 <= q <= 1 for r in recs for q in r.probabilities)
    save_heads(tmp_path / "h.pt", dh, head)
    dh2, ph2 = load_heads(tmp_path / "h.pt")
    np.testing.assert_allclose(ph2.scores(x), p, atol=1e-6)


def test_ordinal_losses_are_finite_and_nonnegative(rng):
    emb = torch.randn(12, 4)
    y = torch.as_tensor(rng.integers(0, 3, 12))
    assert ordinal_triplet_loss(emb, y, 0.5).item() >= 0
    assert ordinal_triplet_loss(emb, torch.zeros(12, dtype=torch.long), 0.5).item() == 0.0
    assert binary_ordinal_loss(torch.randn(12, 2), y).item() >= 0
