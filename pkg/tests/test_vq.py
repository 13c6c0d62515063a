import logging

import numpy as np
import pytest
import torch

from volrep.vq import (
    AXIS_ORDERS,
    TokenPool,
    VQConfig,
    VQVAE,
    load_checkpoint,
    orientation_invariance_report,
    quantize,
    save_checkpoint,
    train_vqvae,
    vq_losses,
)


def brute_force_nearest(z, e):
    out = []
    for row in z:
        best, best_d = 0, None
        for k, code in enumerate(e):
            d = float(((row - code) ** 2).sum())
            if best_d is None or d < best_d:
                best, best_d = k, d
        out.append(best)
    return out


def test_quantize_forced_nearest():
    idx, q = quantize(torch.tensor([[0.9, 0.8]]), torch.tensor([[0.0, 0.0], [1.0, 1.0]]))
    assert idx.tolist() == [1]
    assert q.tolist() == [[1.0, 1.0]]


def test_quantize_tie_lowest_index():
    book = torch.tensor([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [1.0, 0.0]])
    idx, _ = quantize(torch.tensor([[0.0, 0.0], [1.0, 0.0], [0.0, 0.0]]), book)
    assert idx.tolist() == [0, 0, 0]


def test_quantize_matches_small_oracle(rng):
    z = rng.normal(size=(200, 4))
    e = rng.normal(size=(37, 4))
    idx, _ = quantize(torch.from_numpy(z), torch.from_numpy(e))
    assert idx.tolist() == brute_force_nearest(z, e)


def _toy_tokens(rng, n=50, shape=(32, 32, 4)):
    base = rng.random(n) * 0.5 + 0.25
    ramp = np.linspace(0, 0.2, shape[0])[:, None, None]
    return [np.asarray(b + ramp * (i % 3) + np.zeros(shape), dtype=np.float32) for i, b in enumerate(base)]


def test_encode_rejects_nan():
    model = VQVAE()
    x = torch.zeros(1, 32, 32, 4)
    x[0, 0, 0, 0] = float("nan")
    with pytest.raises(ValueError):
        model.encode(x)


def test_encoder_determinism_and_shapes():
    torch.manual_seed(0)
    a = VQVAE().eval()
    torch.manual_seed(0)
    b = VQVAE().eval()
    x = torch.zeros(2, 32, 32, 4)
    with torch.no_grad():
        za, zb = a.encode(x), b.encode(x)
        torch.testing.assert_close(za, zb, rtol=0, atol=0)
        torch.testing.assert_close(za[0], za[1], rtol=0, atol=0)
        for shape in ((32, 32, 4), (32, 4, 32), (4, 32, 32)):
            z = a.encode(torch.rand(3, *shape))
            assert z.shape == (3, 16) and torch.isfinite(z).all()
            assert a.decode(a.quantize(z)[1], shape).shape == (3, *shape)
        zero = torch.zeros(1, 16)
        torch.testing.assert_close(a.decode(zero), a.decode(zero), rtol=0, atol=0)


def test_commitment_zero_when_latent_is_code():
    z = torch.randn(4, 16)
    x = torch.rand(4, 32, 32, 4)
    out = vq_losses(x, x.clone(), z, z.clone(), 0.25)
    assert out["commitment"].item() == 0.0 and out["codebook"].item() == 0.0
    assert all(v.item() >= 0 for v in out.values())


def test_straight_through_matches_quantized_gradient():
    """Gradient wrt the encoder output equals the gradient wrt the quantized vector (2-code toy)."""
    torch.manual_seed(0)
    book = torch.tensor([[0.0, 0.0], [1.0, 1.0]], dtype=torch.float64)
    w = torch.randn(2, 3, dtype=torch.float64)
    target = torch.randn(3, dtype=torch.float64)

    def recon_loss(q):
        return ((q @ w - target) ** 2).sum()

    z = torch.tensor([[0.8, 0.7]], dtype=torch.float64, requires_grad=True)
    _, q = quantize(z, book)
    q_st = z + (q - z).detach()
    (g_st,) = torch.autograd.grad(recon_loss(q_st), z)
    # finite differences of the loss as a function of the quantized vector itself
    q0 = q.detach().clone()
    eps = 1e-6
    fd = torch.zeros_like(q0)
    for j in range(2):
        up, dn = q0.clone(), q0.clone()
        up[0, j] += eps
        dn[0, j] -= eps
        fd[0, j] = (recon_loss(up) - recon_loss(dn)) / (2 * eps)
    rel = (g_st - fd).norm() / fd.norm()
    assert rel < 1e-3


def test_overfit_toy_set(rng):
    tokens = _toy_tokens(rng)
    cfg = VQConfig(codebook_size=64, steps=400, batch_size=16, lr=3e-3, eval_every=400, seed=0, permute=False)
    res = train_vqvae(tokens, tokens[:10], cfg)
    first, last = res.history[0]["train_loss"], res.history[-1]["train_loss"]
    assert last < 0.1 * first
    with torch.no_grad():
        x = torch.from_numpy(np.stack(tokens))
        recon = res.model.decode(res.model.quantize(res.model.encode(x))[1])
    assert float(((recon - x) ** 2).mean()) < 0.01


def test_loss_trace_reproducible(rng):
    tokens = _toy_tokens(rng, 40)
    cfg = VQConfig(codebook_size=32, steps=10, batch_size=8, eval_every=5, seed=4)
    a = train_vqvae(tokens, tokens[:8], cfg).history
    b = train_vqvae(tokens, tokens[:8], cfg).history
    for ra, rb in zip(a, b):
        assert ra.keys() == rb.keys()
        for k in ra:
            assert abs(ra[k] - rb[k]) <= 1e-6


def test_permuted_pool_targets_are_canonical(rng):
    pool = TokenPool([rng.random((32, 4, 32)).astype(np.float32) for _ in range(5)])
    view, target = pool.sample(np.random.default_rng(1), 4, permute=True)
    assert target.shape == (4, 32, 32, 4)
    assert sorted(view.shape[1:]) == [4, 32, 32]


def test_collapse_warning(rng, caplog):
    tokens = [np.full((32, 32, 4), 0.5, dtype=np.float32)] * 20
    cfg = VQConfig(codebook_size=64, steps=30, batch_size=4, seed=0, dead_window=10, reseed_every=0, eval_every=30)
    with caplog.at_level(logging.WARNING):
        res = train_vqvae(tokens, [], cfg)
    kinds = [e.get("kind") for e in res.events]
    assert "codebook_collapse" in kinds
    assert any("collapse" in r.message for r in caplog.records)


def test_invariance_report_untrained(rng):
    torch.manual_seed(0)
    model = VQVAE()
    tokens = [rng.random((32, 32, 4)).astype(np.float32) for _ in range(3)]
    rep = orientation_invariance_report(model, tokens)
    assert np.isfinite(rep["pairwise_cosine"]).all()
    assert rep["pairwise_cosine"].shape == (3, 15)
    assert len(rep["orders"]) == len(AXIS_ORDERS) == 6
    np.testing.assert_array_equal(rep["difference_maps"][:, 0], 0.0)


def test_checkpoint_round_trip(tmp_path):
    torch.manual_seed(2)
    model = VQVAE(VQConfig(codebook_size=32))
    save_checkpoint(model, tmp_path / "vq.pt")
    back = load_checkpoint(tmp_path / "vq.pt")
    x = torch.rand(2, 32, 4, 32)
    with torch.no_grad():
        torch.testing.assert_close(model.eval().encode(x), back.encode(x), rtol=0, atol=0)
    torch.save({"kind": "other"}, tmp_path / "bad.pt")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad.pt")
