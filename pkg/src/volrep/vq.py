"""3D-convolutional VQ-VAE over subvolume tokens, trained with random axis permutations."""

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from itertools import combinations, permutations

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
AXIS_ORDERS = tuple(permutations((1, 2, 3)))


class BlockConv3d(nn.Module):
    """3D convolution with kernel == stride, computed as a matmul over non-overlapping blocks.

    Numerically the same map as ``F.conv3d(x, weight, bias, stride=kernel)``.
    """

    def __init__(self, in_channels, out_channels, kernel):
        super().__init__()
        self.kernel = tuple(kernel)
        fan_in = in_channels * math.prod(self.kernel)
        bound = 1 / math.sqrt(fan_in)
        self.weight = nn.Parameter(torch.empty(out_channels, in_channels, *self.kernel).uniform_(-bound, bound))
        self.bias = nn.Parameter(torch.empty(out_channels).uniform_(-bound, bound))

    def forward(self, x):
        b, c, d0, d1, d2 = x.shape
        k0, k1, k2 = self.kernel
        g0, g1, g2 = d0 // k0, d1 // k1, d2 // k2
        blocks = x.reshape(b, c, g0, k0, g1, k1, g2, k2).permute(0, 2, 4, 6, 1, 3, 5, 7)
        blocks = blocks.reshape(b, g0, g1, g2, -1)
        out = blocks @ self.weight.reshape(self.weight.shape[0], -1).t() + self.bias
        return out.permute(0, 4, 1, 2, 3)


class BlockConvTranspose3d(nn.Module):
    """Transposed 3D convolution with kernel == stride (``F.conv_transpose3d`` equivalent)."""

    def __init__(self, in_channels, out_channels, kernel):
        super().__init__()
        self.kernel = tuple(kernel)
        fan_in = out_channels * math.prod(self.kernel)
        bound = 1 / math.sqrt(fan_in)
        self.weight = nn.Parameter(torch.empty(in_channels, out_channels, *self.kernel).uniform_(-bound, bound))
        self.bias = nn.Parameter(torch.empty(out_channels).uniform_(-bound, bound))

    def forward(self, x):
        b, c, g0, g1, g2 = x.shape
        k0, k1, k2 = self.kernel
        o = self.weight.shape[1]
        y = x.permute(0, 2, 3, 4, 1) @ self.weight.reshape(c, -1)
        y = y.reshape(b, g0, g1, g2, o, k0, k1, k2).permute(0, 4, 1, 5, 2, 6, 3, 7)
        return y.reshape(b, o, g0 * k0, g1 * k1, g2 * k2) + self.bias.view(1, o, 1, 1, 1)


def canonical_axes(shape):
    """Axis order that sorts token dims descending (stable); (4,32,32) -> (1,2,0)."""
    return tuple(sorted(range(3), key=lambda a: -shape[a]))


def quantize(latent, codebook):
    """Nearest codebook entry by Euclidean distance, ties to the lowest index.

    Works on (n, d) tensors; distances are accumulated in float64.
    """
    z = latent.detach().double()
    e = codebook.detach().double()
    d = (z * z).sum(1, keepdim=True) - 2 * z @ e.t() + (e * e).sum(1)
    idx = torch.argmin(d, dim=1)
    return idx, codebook[idx]


@dataclass
class VQConfig:
    patch_dims: tuple = (32, 32, 4)
    codebook_size: int = 1024
    code_dim: int = 16
    channels: tuple = (16, 32)
    kernels: tuple = ((4, 4, 2), (2, 2, 2))
    commitment_beta: float = 0.25
    permute: bool = True
    steps: int = 20000
    batch_size: int = 256
    lr: float = 3e-4
    seed: int = 0
    eval_every: int = 1000
    val_tokens: int = 256
    reseed_every: int = 2000
    dead_window: int = 1000
    use_quantized: bool = True

    def __post_init__(self):
        self.patch_dims = tuple(self.patch_dims)
        self.channels = tuple(self.channels)
        self.kernels = tuple(tuple(k) for k in self.kernels)
        canon = sorted(self.patch_dims, reverse=True)
        total = [math.prod(k[i] for k in self.kernels) for i in range(3)]
        if any(c % t for c, t in zip(canon, total)):
            raise ValueError(f"kernels {self.kernels} do not tile the canonical patch {tuple(canon)}")


class VQVAE(nn.Module):
    def __init__(self, config=None):
        super().__init__()
        self.config = config = config or VQConfig()
        self.canonical = tuple(sorted(config.patch_dims, reverse=True))
        c1, c2 = config.channels
        k1, k2 = config.kernels
        self.latent_grid = tuple(c // (a * b) for c, a, b in zip(self.canonical, k1, k2))
        flat = c2 * math.prod(self.latent_grid)
        self.enc1 = BlockConv3d(1, c1, k1)
        self.enc2 = BlockConv3d(c1, c2, k2)
        self.enc_out = nn.Linear(flat, config.code_dim)
        self.dec_in = nn.Linear(config.code_dim, flat)
        self.dec2 = BlockConvTranspose3d(c2, c1, k2)
        self.dec1 = BlockConvTranspose3d(c1, 1, k1)
        k = config.codebook_size
        self.codebook = nn.Parameter(torch.empty(k, config.code_dim).uniform_(-1 / k, 1 / k))
        self.register_buffer("usage_counts", torch.zeros(k, dtype=torch.long))

    def _canonicalize(self, x):
        shape = tuple(x.shape[1:])
        if tuple(sorted(shape, reverse=True)) != self.canonical:
            raise ValueError(f"token shape {shape} is not a permutation of {self.canonical}")
        axes = canonical_axes(shape)
        return x.permute(0, *(a + 1 for a in axes)), axes

    def encode(self, x):
        """(n, *token_shape) -> (n, code_dim) pre-quantization latents."""
        if not torch.isfinite(x).all():
            raise ValueError("token contains non-finite voxels")
        x, _ = self._canonicalize(x)
        h = F.relu(self.enc1(x.unsqueeze(1)))
        h = F.relu(self.enc2(h))
        return self.enc_out(h.flatten(1))

    def decode(self, q, shape=None):
        """Latents -> tokens in the canonical (native anatomical) frame.

        With ``shape`` the canonical output is laid out in that token shape, which
        restores a native token's own axis order.
        """
        h = F.relu(self.dec_in(q)).view(q.shape[0], self.config.channels[1], *self.latent_grid)
        h = F.relu(self.dec2(h))
        out = self.dec1(h).squeeze(1)
        if shape is None:
            return out
        inv = tuple(int(i) for i in np.argsort(canonical_axes(tuple(shape))))
        return out.permute(0, *(a + 1 for a in inv))

    def quantize(self, z, track=False):
        idx, q = quantize(z, self.codebook)
        if track:
            self.usage_counts += torch.bincount(idx, minlength=self.codebook.shape[0])
        return idx, q

    def forward(self, x, target=None, track=False):
        """Encode a (possibly permuted) view and reconstruct its token in the canonical frame.

        ``target`` is the canonical-frame token; it defaults to the canonicalized input.
        """
        z = self.encode(x)
        idx, q = self.quantize(z, track=track)
        q_st = z + (q - z).detach()
        recon = self.decode(q_st)
        if target is None:
            target = self._canonicalize(x)[0]
        losses = vq_losses(target, recon, z, q, self.config.commitment_beta)
        return recon, z, idx, losses

    def token_latents(self, x):
        """Vectors handed to the sequence transformer (quantized unless configured otherwise)."""
        z = self.encode(x)
        return self.quantize(z)[1] if self.config.use_quantized else z

    def reset_usage(self):
        self.usage_counts.zero_()


def vq_losses(x, recon, z, q, beta):
    recon_loss = F.mse_loss(recon, x)
    codebook = F.mse_loss(q, z.detach())
    commitment = F.mse_loss(z, q.detach())
    quant = codebook + beta * commitment
    return {"reconstruction": recon_loss, "codebook": codebook, "commitment": commitment,
            "quantization": quant, "total": recon_loss + quant}


class TokenPool:
    """Training tokens grouped by native shape bucket."""

    def __init__(self, tokens):
        groups = {}
        for t in tokens:
            arr = np.asarray(getattr(t, "voxels", t), dtype=np.float32)
            groups.setdefault(arr.shape, []).append(arr)
        if not groups:
            raise ValueError("token pool is empty")
        self.buckets = {s: np.stack(v) for s, v in sorted(groups.items())}

    def __len__(self):
        return sum(len(v) for v in self.buckets.values())

    def sample(self, rng, batch_size, permute):
        """Return (view, target): a shape-homogeneous batch and its canonical-frame tokens."""
        keys = list(self.buckets)
        if permute:
            key = keys[int(rng.integers(len(keys)))]
        else:
            sizes = np.array([len(self.buckets[k]) for k in keys], dtype=float)
            key = keys[int(rng.choice(len(keys), p=sizes / sizes.sum()))]
        pool = self.buckets[key]
        batch = pool[rng.integers(len(pool), size=batch_size)]
        target = batch.transpose(0, *(a + 1 for a in canonical_axes(key)))
        view = batch
        if permute:
            order = rng.permutation(3)
            view = batch.transpose(0, *(order + 1))
        return np.ascontiguousarray(view), np.ascontiguousarray(target)

    def all_tokens(self):
        return [t for v in self.buckets.values() for t in v]


def _views(tokens):
    """Every axis order of each token: list over orders of (n, *shape) arrays."""
    return [np.ascontiguousarray(tokens.transpose(0, *order)) for order in AXIS_ORDERS]


@torch.no_grad()
def evaluate_vq(model, val_tokens):
    """Validation losses averaged over the six axis orders of canonical held-out tokens."""
    model.eval()
    target = torch.from_numpy(val_tokens)
    recon, quant = [], []
    for view in _views(val_tokens):
        _, _, _, losses = model(torch.from_numpy(view), target)
        recon.append(float(losses["reconstruction"]))
        quant.append(float(losses["codebook"]))
    model.train()
    return float(np.mean(recon)), float(np.mean(quant))


def _canonical_stack(tokens):
    out = []
    for t in tokens:
        arr = np.asarray(getattr(t, "voxels", t), dtype=np.float32)
        out.append(arr.transpose(canonical_axes(arr.shape)))
    return np.stack(out)


@torch.no_grad()
def _reseed(model, codes, pool, rng, config):
    """Point ``codes`` at encoder outputs of freshly sampled training tokens."""
    zs = []
    remaining = len(codes)
    while remaining > 0:
        n = min(remaining, 512)
        zs.append(model.encode(torch.from_numpy(pool.sample(rng, n, config.permute)[0])))
        remaining -= n
    z = torch.cat(zs)
    noise = torch.from_numpy(rng.normal(0, 1e-3, z.shape).astype(np.float32))
    model.codebook[codes] = z + noise


@dataclass
class VQResult:
    model: VQVAE
    history: list = field(default_factory=list)
    events: list = field(default_factory=list)

    def curves(self):
        return [h for h in self.history if "val_recon" in h]


def train_vqvae(train_tokens, val_tokens, config):
    """Fit a VQ-VAE on native-shape tokens.

    With ``config.permute`` every batch is shown under a random axis order while the
    reconstruction target stays the token in its native frame; validation averages over
    all six views of held-out tokens.
    """
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    model = VQVAE(config)
    pool = TokenPool(train_tokens)
    val = _canonical_stack(val_tokens)[: config.val_tokens] if len(val_tokens) else None
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    k = config.codebook_size
    last_used = torch.zeros(k, dtype=torch.long)
    result = VQResult(model)
    collapse_since = None
    warned = False
    # data-dependent codebook init: encoder outputs of K sampled training tokens
    _reseed(model, torch.arange(k), pool, rng, config)
    for step in range(1, config.steps + 1):
        view, target = pool.sample(rng, config.batch_size, config.permute)
        _, z, idx, losses = model(torch.from_numpy(view), torch.from_numpy(target), track=True)
        opt.zero_grad()
        losses["total"].backward()
        opt.step()
        last_used[idx] = step
        row = {"step": step, "train_loss": losses["total"].item(),
               "train_recon": losses["reconstruction"].item(), "train_quant": losses["quantization"].item()}

        if step >= config.dead_window:
            frac = float((step - last_used >= config.dead_window).float().mean())
            if frac >= 0.5:
                collapse_since = collapse_since or step
                if not warned and step - collapse_since >= config.dead_window:
                    msg = f"codebook collapse: {frac:.0%} of codes unused for {config.dead_window} steps"
                    result.events.append({"step": step, "event": "warning", "kind": "codebook_collapse",
                                          "dead_fraction": frac, "message": msg})
                    log.warning(msg)
                    warned = True
            else:
                collapse_since, warned = None, False
        if config.reseed_every and step % config.reseed_every == 0:
            stale = torch.nonzero(step - last_used >= config.reseed_every).flatten()
            if len(stale):
                _reseed(model, stale, pool, rng, config)
                last_used[stale] = step
                result.events.append({"step": step, "event": "reseed", "codes": int(len(stale))})
        if val is not None and (step % config.eval_every == 0 or step == config.steps):
            row["val_recon"], row["val_quant"] = evaluate_vq(model, val)
        result.history.append(row)
    model.eval()
    return result


@torch.no_grad()
def orientation_invariance_report(model, tokens):
    """Latent agreement and reconstruction differences across the six axis orders.

    Returns per-token mean/min pairwise cosine, max pairwise latent distance, and
    difference maps of each axis-restored reconstruction against the identity view.
    """
    model.eval()
    base = _canonical_stack(tokens)
    latents, recons = [], []
    for order in AXIS_ORDERS:
        view = torch.from_numpy(np.ascontiguousarray(base.transpose(0, *order)))
        z = model.encode(view)
        latents.append(z)
        recons.append(model.decode(model.quantize(z)[1]).numpy())
    cos, dist = [], []
    for a, b in combinations(range(len(AXIS_ORDERS)), 2):
        cos.append(F.cosine_similarity(latents[a], latents[b], dim=1).numpy())
        dist.append((latents[a] - latents[b]).norm(dim=1).numpy())
    cos, dist = np.stack(cos, 1), np.stack(dist, 1)
    return {
        "orders": AXIS_ORDERS,
        "pairwise_cosine": cos,
        "mean_cosine": cos.mean(1),
        "min_cosine": cos.min(1),
        "max_latent_distance": dist.max(1),
        "difference_maps": np.stack([r - recons[0] for r in recons], 1),
        "mean_pairwise_cosine": float(cos.mean()),
    }


def save_checkpoint(result_or_model, path, extra=None):
    model = getattr(result_or_model, "model", result_or_model)
    payload = {"version": CHECKPOINT_VERSION, "kind": "vqvae", "config": asdict(model.config),
               "seed": model.config.seed, "state_dict": model.state_dict()}
    payload.update(extra or {})
    torch.save(payload, path)


def load_checkpoint(path):
    payload = torch.load(path, weights_only=False)
    if payload.get("kind") != "vqvae" or payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path} is not a version-{CHECKPOINT_VERSION} VQ-VAE checkpoint")
    model = VQVAE(VQConfig(**payload["config"]))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model


def write_loss_csv(history, path):
    cols = ["step", "train_loss", "train_recon", "train_quant", "val_recon", "val_quant"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for row in history:
            w.writerow({c: row.get(c, "") for c in cols})
