"""Lidar branch: voxelization, point sampling, centroid augmentation, the
hierarchical voxel feature encoder (VFE) and the voxel-token transformer.

A point cloud is partitioned into axis-aligned cells; empty cells are
dropped, over-full cells are randomly capped at T points, and each point is
augmented with its offset from the cell centroid. K VFE layers then
alternate a shared per-point FCN (linear + batch norm + SiLU) with an
elementwise max over the cell's points, concatenating the pooled feature
back onto every point. The final per-cell max, linearly projected, becomes
one token per non-empty voxel.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .encoder import ClassReadout, EncoderConfig, TokenEmbedder, TransformerEncoder
from .nn import (
    EVAL,
    ConfigError,
    Linear,
    MLP,
    MaskedBatchNorm,
    Mode,
    Module,
    SiLU,
    masked_max,
    masked_max_backward,
)


class EmptySceneError(ValueError):
    """No points fall inside the configured range."""


@dataclass
class VoxelGrid:
    """Sparse non-empty cells: map from integer cell index to its points.

    Cells are kept in lexicographic index order; no stored cell is empty.
    """

    cell_sizes: np.ndarray
    bounds: np.ndarray                      # (3, 2) min/max per axis
    cells: dict = field(default_factory=dict)
    cap: int | None = None                  # T after sampling, else None

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    def counts(self) -> np.ndarray:
        return np.array([len(p) for p in self.cells.values()], dtype=np.intp)


def voxelize(points: np.ndarray, cell_sizes, bounds) -> VoxelGrid:
    """Assign in-range points to cells by floor((coord - min) / cell_size).

    ``bounds`` is ((xmin, xmax), (ymin, ymax), (zmin, zmax)); points on the
    upper boundary are discarded. Empty cells never appear in the output.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    cell_sizes = np.asarray(cell_sizes, dtype=np.float64)
    bounds = np.asarray(bounds, dtype=np.float64)
    if not np.all(cell_sizes > 0):
        raise ConfigError(f"cell sizes must be positive, got {cell_sizes}")
    lo, hi = bounds[:, 0], bounds[:, 1]
    keep = np.all((points >= lo) & (points < hi), axis=1)
    pts = points[keep]
    grid = VoxelGrid(cell_sizes=cell_sizes, bounds=bounds)
    if pts.shape[0] == 0:
        return grid
    idx = np.floor((pts - lo) / cell_sizes).astype(np.int64)
    order = np.lexsort((idx[:, 2], idx[:, 1], idx[:, 0]))
    idx = idx[order]
    pts = pts[order]
    uniq, starts = np.unique(idx, axis=0, return_index=True)
    splits = np.append(starts[1:], len(pts))
    for cell, s, e in zip(uniq, starts, splits):
        grid.cells[tuple(int(c) for c in cell)] = pts[s:e]
    return grid


def sample_points(grid: VoxelGrid, T: int, seed: int) -> VoxelGrid:
    """Cap every cell at T points by uniform random subsampling.

    Cells already holding <= T points pass through untouched (order
    preserved); deterministic given the seed.
    """
    if T < 1:
        raise ConfigError(f"sampling cap must be >= 1, got {T}")
    rng = np.random.default_rng(seed)
    out = VoxelGrid(cell_sizes=grid.cell_sizes, bounds=grid.bounds, cap=T)
    for key, pts in grid.cells.items():
        if len(pts) > T:
            pick = np.sort(rng.choice(len(pts), size=T, replace=False))
            pts = pts[pick]
        out.cells[key] = pts
    return out


def augment(cell_points: np.ndarray) -> np.ndarray:
    """Extend each point to (x, y, z, x-cx, y-cy, z-cz) with the cell centroid."""
    pts = np.asarray(cell_points, dtype=np.float64).reshape(-1, 3)
    if pts.shape[0] == 0:
        raise ConfigError("cannot augment an empty cell")
    centroid = pts.mean(axis=0)
    return np.concatenate([pts, pts - centroid], axis=1)


def grid_to_arrays(grid: VoxelGrid, T: int, max_cells: int | None = None):
    """Pack a sampled grid into padded arrays.

    Returns (features (V, T, 6), mask (V, T), cell_index (V, 3)). Cells stay
    in lexicographic order; if there are more than ``max_cells``, the lowest
    point-count cells are dropped first (ties drop the lexicographically
    later cell).
    """
    keys = list(grid.cells.keys())
    if not keys:
        raise EmptySceneError("voxel grid has no non-empty cells")
    if max_cells is not None and len(keys) > max_cells:
        counts = grid.counts()
        keep = np.sort(np.argsort(-counts, kind="stable")[:max_cells])
        keys = [keys[i] for i in keep]
    V = len(keys)
    feats = np.zeros((V, T, 6))
    mask = np.zeros((V, T), dtype=bool)
    for v, key in enumerate(keys):
        pts = grid.cells[key]
        t = len(pts)
        feats[v, :t] = augment(pts)
        mask[v, :t] = True
    return feats, mask, np.array(keys, dtype=np.int64)


class VFELayer(Module):
    """Linear + batch norm + SiLU per point, then max-pool and concat."""

    def __init__(self, rng, width: int):
        if width % 2 != 0:
            raise ConfigError(f"VFE width must be even, got {width}")
        self.fc = Linear(rng, width, width // 2)
        self.bn = MaskedBatchNorm(width // 2)
        self.act = SiLU()
        self._cache = None

    def forward(self, x, mask, mode: Mode):
        f = self.act.forward(self.bn.forward(self.fc.forward(x), mask, mode))
        pooled, idx = masked_max(f, mask)
        out = np.concatenate([f, np.broadcast_to(pooled[:, None, :], f.shape)], axis=2)
        self._cache = (idx, f.shape, mask)
        return out

    def backward(self, dout):
        idx, fshape, mask = self._cache
        half = fshape[-1]
        df = dout[..., :half].copy()
        dpooled = dout[..., half:].sum(axis=1)
        df += masked_max_backward(dpooled, idx, fshape)
        return self.fc.backward(self.bn.backward(self.act.backward(df)))


class VoxelFeatureEncoder(Module):
    """Per-point MLP followed by K VFE layers and a final max + projection."""

    def __init__(self, rng, *, point_widths, width: int, layers: int, d_out: int):
        self.point_mlp = MLP(rng, 6, point_widths, width, activation="gelu")
        self.vfe = [VFELayer(rng, width) for _ in range(layers)]
        self.proj = Linear(rng, width, d_out)
        self._cache = None

    def forward(self, feats, mask, mode: Mode):
        """(V, T, 6) padded features + mask -> (V, d_out) voxel features."""
        x = self.point_mlp.forward(feats, mode)
        for layer in self.vfe:
            x = layer.forward(x, mask, mode)
        pooled, idx = masked_max(x, mask)
        self._cache = (idx, x.shape, mask)
        return self.proj.forward(pooled)

    def backward(self, dout):
        idx, xshape, mask = self._cache
        dpooled = self.proj.backward(dout)
        dx = masked_max_backward(dpooled, idx, xshape)
        for layer in reversed(self.vfe):
            dx = layer.backward(dx)
        self.point_mlp.backward(dx)


class VoxelBranch(Module):
    """Full lidar branch: voxel pipeline + VFE + shared transformer."""

    def __init__(self, rng, *, bounds, cell_sizes, T: int, max_tokens: int,
                 point_mlp_widths, vfe_width: int, vfe_layers: int,
                 encoder_cfg: EncoderConfig):
        D = encoder_cfg.dim
        self.bounds = np.asarray(bounds, dtype=np.float64)
        self.cell_sizes = np.asarray(cell_sizes, dtype=np.float64)
        self.T = T
        self.max_tokens = max_tokens
        self.vfe = VoxelFeatureEncoder(rng, point_widths=point_mlp_widths,
                                       width=vfe_width, layers=vfe_layers, d_out=D)
        self.embed = TokenEmbedder(rng, D, D, max_tokens)
        self.encoder = TransformerEncoder(rng, encoder_cfg)
        self.norm = ClassReadout(D)

    @property
    def dim(self) -> int:
        return self.encoder.cfg.dim

    def prepare(self, points: np.ndarray, sample_seed: int = 0):
        grid = voxelize(points, self.cell_sizes, self.bounds)
        if grid.n_cells == 0:
            raise EmptySceneError("no points inside the configured range")
        grid = sample_points(grid, self.T, sample_seed)
        return grid_to_arrays(grid, self.T, self.max_tokens)

    def forward(self, points: np.ndarray, mode: Mode = EVAL, sample_seed: int = 0):
        """Returns (seq (N_l, D), readout (D,)); raises EmptySceneError."""
        feats, mask, _ = self.prepare(points, sample_seed)
        tokens = self.vfe.forward(feats, mask, mode)
        z = self.encoder.forward(self.embed.forward(tokens), mode)
        vec, seq = self.norm.forward(z)
        return seq, vec

    def backward(self, d_seq, d_readout):
        dz = self.norm.backward(d_readout, d_seq)
        dz = self.encoder.backward(dz)
        dtokens = self.embed.backward(dz)
        self.vfe.backward(dtokens)


class LinearVoxelBranch(Module):
    """Ablation stand-in: the voxel encoder replaced by one linear layer on
    per-cell summary statistics (masked mean and max of the 6-dim points)."""

    def __init__(self, rng, *, bounds, cell_sizes, T: int, max_tokens: int, dim: int):
        self.bounds = np.asarray(bounds, dtype=np.float64)
        self.cell_sizes = np.asarray(cell_sizes, dtype=np.float64)
        self.T = T
        self.max_tokens = max_tokens
        self.proj = Linear(rng, 12, dim)
        self._dim = dim

    @property
    def dim(self) -> int:
        return self._dim

    def forward(self, points: np.ndarray, mode: Mode = EVAL, sample_seed: int = 0):
        grid = voxelize(points, self.cell_sizes, self.bounds)
        if grid.n_cells == 0:
            raise EmptySceneError("no points inside the configured range")
        grid = sample_points(grid, self.T, sample_seed)
        feats, mask, _ = grid_to_arrays(grid, self.T, self.max_tokens)
        n = mask.sum(axis=1, keepdims=True)
        mean = feats.sum(axis=1) / n
        mx, _ = masked_max(feats, mask)
        seq = self.proj.forward(np.concatenate([mean, mx], axis=1))
        return seq, seq.mean(axis=0)

    def backward(self, d_seq, d_readout):
        d_seq = d_seq + d_readout[None, :] / d_seq.shape[0]
        self.proj.backward(d_seq)
