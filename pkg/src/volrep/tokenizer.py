"""Subvolume tokenization: tiling, background filtering, axis permutations, shape buckets."""

import math
from dataclasses import dataclass
from itertools import permutations

import numpy as np

from .cohort.types import PLANE_AXES, parse_orientation


class TokenizerError(ValueError):
    pass


@dataclass(frozen=True)
class PatchSpec:
    patch_dims: tuple = (32, 32, 4)
    pad_mode: str = "zero_pad"

    def __post_init__(self):
        object.__setattr__(self, "patch_dims", tuple(int(p) for p in self.patch_dims))
        if len(self.patch_dims) != 3 or any(p < 1 for p in self.patch_dims):
            raise TokenizerError(f"patch dims must be 3 positive ints, got {self.patch_dims}")
        if self.pad_mode not in ("zero_pad", "crop"):
            raise TokenizerError(f"unknown pad_mode {self.pad_mode!r}")

    def for_plane(self, plane):
        """Patch dims laid out in a plane's native axis order."""
        return PatchSpec(tuple(self.patch_dims[a] for a in PLANE_AXES[plane]), self.pad_mode)

    @property
    def buckets(self):
        return shape_buckets(self.patch_dims)


def shape_buckets(patch_dims):
    """Distinct axis permutations of the patch shape; three for 32x32x4."""
    return tuple(sorted(set(permutations(patch_dims))))


@dataclass(frozen=True, eq=False)
class SubvolumeToken:
    voxels: np.ndarray
    grid_pos: tuple
    orientation_code: str = "RAS"

    def __post_init__(self):
        v = np.array(self.voxels, dtype=np.float32)
        v.setflags(write=False)
        object.__setattr__(self, "voxels", v)
        object.__setattr__(self, "grid_pos", tuple(int(g) for g in self.grid_pos))

    @property
    def shape_bucket(self):
        return tuple(self.voxels.shape)

    def __eq__(self, other):
        return (
            isinstance(other, SubvolumeToken)
            and self.grid_pos == other.grid_pos
            and self.orientation_code == other.orientation_code
            and np.array_equal(self.voxels, other.voxels)
        )


@dataclass(frozen=True, eq=False)
class TokenGrid:
    tokens: tuple
    grid_shape: tuple
    volume_shape: tuple
    patch_dims: tuple

    @property
    def padded_shape(self):
        return tuple(g * p for g, p in zip(self.grid_shape, self.patch_dims))


@dataclass(frozen=True)
class BackgroundFilter:
    threshold: float = 0.05
    statistic: str = "mean"

    def __post_init__(self):
        if not 0 <= self.threshold <= 1:
            raise TokenizerError("background threshold must lie in [0, 1]")
        if self.statistic not in ("mean", "max"):
            raise TokenizerError(f"unknown statistic {self.statistic!r}")

    def score(self, voxels):
        return float(voxels.mean() if self.statistic == "mean" else voxels.max())


def _data(vol):
    return np.asarray(getattr(vol, "data", vol), dtype=np.float32)


def patch_volume(vol, spec=PatchSpec(), orientation_code="RAS"):
    """Tile a volume into non-overlapping patches (row-major grid order)."""
    data = _data(vol)
    p = spec.patch_dims
    if data.ndim != 3:
        raise TokenizerError(f"expected a 3D volume, got shape {data.shape}")
    if spec.pad_mode == "crop":
        if any(d < q for d, q in zip(data.shape, p)):
            raise TokenizerError(f"volume {data.shape} smaller than patch {p} in crop mode")
        grid = tuple(d // q for d, q in zip(data.shape, p))
        data = data[: grid[0] * p[0], : grid[1] * p[1], : grid[2] * p[2]]
    else:
        grid = tuple(math.ceil(d / q) for d, q in zip(data.shape, p))
        pad = [(0, g * q - d) for g, q, d in zip(grid, p, data.shape)]
        data = np.pad(data, pad)
    blocks = data.reshape(grid[0], p[0], grid[1], p[1], grid[2], p[2]).transpose(0, 2, 4, 1, 3, 5)
    tokens = tuple(
        SubvolumeToken(blocks[i, j, k], (i, j, k), orientation_code)
        for i in range(grid[0])
        for j in range(grid[1])
        for k in range(grid[2])
    )
    return TokenGrid(tokens, grid, tuple(_data(vol).shape), p)


def reassemble(grid, tokens=None):
    """Inverse of patch_volume: returns the (padded) volume; missing tokens stay zero."""
    p = grid.patch_dims
    out = np.zeros(grid.padded_shape, dtype=np.float32)
    for t in grid.tokens if tokens is None else tokens:
        i, j, k = t.grid_pos
        out[i * p[0] : (i + 1) * p[0], j * p[1] : (j + 1) * p[1], k * p[2] : (k + 1) * p[2]] = t.voxels
    return out


def filter_background(tokens, filt=BackgroundFilter()):
    return [t for t in tokens if filt.score(t.voxels) > filt.threshold]


def _check_order(axis_order):
    order = tuple(int(a) for a in axis_order)
    if sorted(order) != [1, 2, 3]:
        raise TokenizerError(f"axis order must be a permutation of (1, 2, 3), got {axis_order}")
    return order


def compose_orders(first, second):
    """Single order equivalent to permuting by ``first`` and then by ``second``."""
    first, second = _check_order(first), _check_order(second)
    return tuple(first[s - 1] for s in second)


def invert_order(axis_order):
    order = _check_order(axis_order)
    inv = [0, 0, 0]
    for pos, a in enumerate(order):
        inv[a - 1] = pos + 1
    return tuple(inv)


def permute_token_axes(token, axis_order):
    """Reorder a token's spatial axes; ``axis_order`` is 1-based like ``permute(0, *order)``."""
    order = _check_order(axis_order)
    voxels = np.transpose(token.voxels, [a - 1 for a in order])
    return SubvolumeToken(np.ascontiguousarray(voxels), token.grid_pos, token.orientation_code)


def anatomical_position(grid_pos, grid_shape, orientation_code):
    """Map a native grid position (and the grid extents) into the canonical anatomical frame."""
    axes, flips = parse_orientation(orientation_code)
    pos, ext = [0, 0, 0], [0, 0, 0]
    for a, (g, e, f) in enumerate(zip(grid_pos, grid_shape, flips)):
        pos[axes[a]] = e - 1 - g if f else g
        ext[axes[a]] = e
    return tuple(pos), tuple(ext)


def tokenize_sequence(volume, meta, spec=PatchSpec(), filt=BackgroundFilter()):
    """Foreground tokens of one sequence, patched in its plane's native layout."""
    grid = patch_volume(volume, spec.for_plane(meta.plane), meta.orientation_code)
    return grid, filter_background(grid.tokens, filt)


def bucket_and_sample(batch, seed, spec=PatchSpec(), filt=BackgroundFilter()):
    """Tokenize a minibatch of sequences, bucket by native shape, pick one bucket and permute it.

    ``batch`` holds (volume, meta) pairs. Returns (stack, selected_shape, axis_order, buckets)
    where ``stack`` has shape (n, *permuted_shape).
    """
    if not batch:
        raise TokenizerError("minibatch is empty")
    rng = np.random.default_rng(seed)
    buckets = {s: [] for s in spec.buckets}
    for volume, meta in batch:
        _, fg = tokenize_sequence(volume, meta, spec, filt)
        for t in fg:
            buckets[t.shape_bucket].append(t.voxels)
    filled = [s for s in spec.buckets if buckets[s]]
    if not filled:
        raise TokenizerError("no foreground tokens in minibatch after background filtering")
    selected = filled[int(rng.integers(len(filled)))]
    order = tuple(int(a) for a in rng.permutation([1, 2, 3]))
    stack = np.stack(buckets[selected]).transpose(0, *order)
    return np.ascontiguousarray(stack), selected, order, {s: len(v) for s, v in buckets.items()}


@dataclass(frozen=True)
class PositionalEncoding:
    dims: int = 24
    scheme: str = "sinusoidal_3d"

    def __post_init__(self):
        if self.scheme not in ("sinusoidal_3d", "learned_3d"):
            raise TokenizerError(f"unknown positional scheme {self.scheme!r}")
        if self.dims % 6:
            raise TokenizerError("positional encoding width must be a multiple of 6")


def positional_encode(grid_pos, grid_extents, enc=PositionalEncoding(), table=None):
    """Per-axis sin/cos features concatenated over the three grid axes.

    For the learned scheme ``table`` is a sequence of three (extent, dims/3) arrays.
    """
    grid_pos = tuple(int(g) for g in grid_pos)
    if any(not 0 <= g < e for g, e in zip(grid_pos, grid_extents)):
        raise TokenizerError(f"grid position {grid_pos} outside extents {tuple(grid_extents)}")
    per_axis = enc.dims // 3
    if enc.scheme == "learned_3d":
        if table is None:
            raise TokenizerError("learned positional encoding needs its embedding table")
        return np.concatenate([np.asarray(table[a][g]) for a, g in enumerate(grid_pos)]).astype(np.float32)
    half = per_axis // 2
    freqs = 1.0 / (10000.0 ** (np.arange(half) / half))
    parts = []
    for g in grid_pos:
        parts.append(np.sin(g * freqs))
        parts.append(np.cos(g * freqs))
    return np.concatenate(parts).astype(np.float32)


def sinusoidal_table(grid_shape, dims=24):
    """Encodings for every position of a grid, ordered like patch_volume tokens."""
    enc = PositionalEncoding(dims)
    return np.stack(
        [
            positional_encode((i, j, k), grid_shape, enc)
            for i in range(grid_shape[0])
            for j in range(grid_shape[1])
            for k in range(grid_shape[2])
        ]
    )
