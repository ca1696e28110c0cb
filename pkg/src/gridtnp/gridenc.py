"""Moving unstructured token sets onto a regular pseudo-token grid.

Covers the regular lattice (``GridSpec``), O(N) nearest-cell assignment with
padded per-cell batching (``GridAssignment``), and three grid encoders:
masked cross-attention (PT), squared-exponential kernel interpolation (KI),
and token-space average pooling (Avg), plus single/multi multi-source fusion.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .geomembed import DomainError, haversine
from .nn import MLP, Module, Parameter, normal_init
from .tensor import Tensor

__all__ = [
    "GridSpec",
    "TokenSet",
    "GridAssignment",
    "PseudoTokenGrid",
    "SENTINEL",
    "assign_to_grid",
    "stack_assignments",
    "batched_gather",
    "pt_grid_encode",
    "ki_grid_encode",
    "avg_grid_encode",
    "fuse_multi_source",
    "PTGridEncoder",
    "KIGridEncoder",
    "AvgGridEncoder",
]

SENTINEL = -1


@dataclass(frozen=True)
class GridSpec:
    """An axis-aligned regular grid over input space.

    Node placement per dimension:

    - non-wrap: ``count`` nodes at ``linspace(lo, hi, count)`` (a single node
      sits at the midpoint);
    - wrap: ``count`` nodes at ``lo + i * (hi - lo) / count``; the period is
      ``hi - lo`` and the high extent aliases the low one.
    """

    counts: tuple
    extents: tuple
    wrap: tuple

    def __post_init__(self):
        object.__setattr__(self, "counts", tuple(int(c) for c in self.counts))
        object.__setattr__(
            self, "extents", tuple((float(lo), float(hi)) for lo, hi in self.extents)
        )
        object.__setattr__(self, "wrap", tuple(bool(w) for w in self.wrap))
        if not (len(self.counts) == len(self.extents) == len(self.wrap)):
            raise ValueError("counts, extents and wrap must have equal lengths")
        if any(c < 1 for c in self.counts):
            raise ValueError("grid counts must be >= 1")
        if any(lo >= hi for lo, hi in self.extents):
            raise ValueError("grid extents must satisfy min < max")

    @property
    def dim(self) -> int:
        return len(self.counts)

    @property
    def total(self) -> int:
        return int(np.prod(self.counts))

    def spacing(self, d: int) -> float:
        lo, hi = self.extents[d]
        m = self.counts[d]
        if self.wrap[d]:
            return (hi - lo) / m
        return (hi - lo) / (m - 1) if m > 1 else (hi - lo)

    def axis_coords(self, d: int) -> np.ndarray:
        lo, hi = self.extents[d]
        m = self.counts[d]
        if self.wrap[d]:
            return lo + np.arange(m) * (hi - lo) / m
        if m == 1:
            return np.array([(lo + hi) / 2.0])
        return np.linspace(lo, hi, m)

    def node_coords(self) -> np.ndarray:
        """All node locations, shape (total, dim), in row-major cell order."""
        axes = [self.axis_coords(d) for d in range(self.dim)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.reshape(-1) for m in mesh], axis=-1)

    def nearest_axis_index(self, d: int, x: np.ndarray):
        """Nearest lattice index along one axis, ties to the lower index.

        Returns ``(index, out_of_extent)``; out-of-extent points on non-wrap
        axes are clamped to the edge index and flagged.
        """
        x = np.asarray(x, dtype=np.float64)
        lo, hi = self.extents[d]
        m = self.counts[d]
        if self.wrap[d]:
            v = np.mod((x - lo) / self.spacing(d), m)
            idx = np.ceil(v - 0.5).astype(np.int64) % m
            return idx, np.zeros(x.shape, dtype=bool)
        if m == 1:
            oob = (x < lo) | (x > hi)
            return np.zeros(x.shape, dtype=np.int64), oob
        v = (x - lo) / self.spacing(d)
        raw = np.ceil(v - 0.5).astype(np.int64)
        idx = np.clip(raw, 0, m - 1)
        return idx, (x < lo) | (x > hi)

    def axis_delta(self, d: int, x: np.ndarray, idx: np.ndarray) -> np.ndarray:
        """Absolute coordinate distance from points to lattice indices,
        folded across the period on wrap axes."""
        coords = self.axis_coords(d)
        delta = np.abs(np.asarray(x, dtype=np.float64) - coords[idx])
        if self.wrap[d]:
            period = self.extents[d][1] - self.extents[d][0]
            delta = np.minimum(delta, period - delta)
        return delta

    def flat_index(self, per_dim: Sequence[np.ndarray]) -> np.ndarray:
        return np.ravel_multi_index(tuple(per_dim), self.counts)

    def to_dict(self) -> dict:
        return {
            "dims": self.dim,
            "counts": list(self.counts),
            "extents": [list(e) for e in self.extents],
            "wrap": list(self.wrap),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        unknown = set(d) - {"dims", "counts", "extents", "wrap"}
        if unknown:
            raise ValueError(f"unknown grid keys {sorted(unknown)}")
        spec = cls(
            counts=tuple(d["counts"]),
            extents=tuple(tuple(e) for e in d["extents"]),
            wrap=tuple(d["wrap"]),
        )
        if "dims" in d and int(d["dims"]) != spec.dim:
            raise ValueError(f"grid dims field {d['dims']} does not match counts")
        return spec


@dataclass
class TokenSet:
    """Tokens with their original input coordinates attached.

    ``tokens`` is (N, D_z) (or batched (B, N, D_z)); ``coords`` matches on the
    leading axes with trailing D_x; ``mask`` flags real rows when padded.
    """

    tokens: Tensor
    coords: np.ndarray
    mask: Optional[np.ndarray] = None


@dataclass
class GridAssignment:
    """Padded per-cell membership of context points on a grid.

    ``padded_index[m, s]`` is a context index or ``SENTINEL``; ``mask`` marks
    real slots. ``cell_of`` is the nearest cell per point regardless of k.
    ``clamped_count`` tallies points outside the extents on non-wrap axes,
    ``dropped_count`` tallies overflow tokens removed by a ``max_slots`` cap.
    """

    grid: GridSpec
    k: int
    cell_of: np.ndarray
    cell_counts: np.ndarray
    padded_index: np.ndarray
    mask: np.ndarray
    max_slots: int
    clamped_count: int = 0
    dropped_count: int = 0


@dataclass
class PseudoTokenGrid:
    """Grid-shaped token tensor with its lattice; ``u`` is (B, *counts, D_z)."""

    u: Tensor
    grid: GridSpec
    provenance: str

    def __post_init__(self):
        expected = (self.u.shape[0],) + tuple(self.grid.counts)
        if self.u.shape[:-1] != expected:
            raise T.ShapeError(
                f"pseudo-token grid shape {self.u.shape} does not match counts "
                f"{self.grid.counts} with a leading batch axis"
            )

    @property
    def v(self) -> np.ndarray:
        return self.grid.node_coords()

    def flat(self) -> Tensor:
        b, dz = self.u.shape[0], self.u.shape[-1]
        return T.reshape(self.u, (b, self.grid.total, dz))


# ---------------------------------------------------------------------------
# assignment
# ---------------------------------------------------------------------------


def _smallest_per_dim(k: int, dims: int) -> int:
    """Smallest j with j**dims >= k (robust ceil(k**(1/dims)))."""
    j = max(1, int(round(k ** (1.0 / dims))))
    while j**dims < k:
        j += 1
    while j > 1 and (j - 1) ** dims >= k:
        j -= 1
    return j


def _k_nearest_nodes(xs: np.ndarray, grid: GridSpec, k: int):
    """Indices (N, k) of the k nearest grid nodes per point, with validity.

    Candidates come from the per-dimension bands of the k nearest axis
    coordinates (which provably contain the k nearest nodes); final ranking
    is by exact distance with ties broken toward the lower flat index.
    """
    n = xs.shape[0]
    per_dim_idx, per_dim_valid = [], []
    for d in range(grid.dim):
        m = grid.counts[d]
        width = min(k, m)
        center, _ = grid.nearest_axis_index(d, xs[:, d])
        offsets = np.arange(-width, width + 1)
        cand = center[:, None] + offsets[None, :]
        if grid.wrap[d]:
            cand = np.mod(cand, m)
            valid = np.ones_like(cand, dtype=bool)
            if offsets.size > m:
                # avoid counting aliased nodes twice
                first = np.zeros((n, m), dtype=np.int64) + np.arange(m)
                cand, valid = first, np.ones_like(first, dtype=bool)
        else:
            valid = (cand >= 0) & (cand < m)
            cand = np.clip(cand, 0, m - 1)
        delta = grid.axis_delta(d, xs[:, d : d + 1], cand)
        delta = np.where(valid, delta, np.inf)
        order = np.argsort(delta, axis=1, kind="stable")[:, :width]
        per_dim_idx.append(np.take_along_axis(cand, order, axis=1))
        per_dim_valid.append(np.take_along_axis(valid, order, axis=1))

    # cartesian product of the per-dimension keeps
    widths = [a.shape[1] for a in per_dim_idx]
    shaped_idx, shaped_valid = [], []
    for d in range(grid.dim):
        sh = [n] + [1] * grid.dim
        sh[d + 1] = widths[d]
        shaped_idx.append(per_dim_idx[d].reshape(sh))
        shaped_valid.append(per_dim_valid[d].reshape(sh))
    full_shape = [n] + widths
    multi = [np.broadcast_to(a, full_shape) for a in shaped_idx]
    valid = np.ones(full_shape, dtype=bool)
    for v in shaped_valid:
        valid = valid & v
    flat = grid.flat_index([m.reshape(n, -1) for m in multi]).reshape(n, -1)
    valid = valid.reshape(n, -1)

    sq = np.zeros_like(valid, dtype=np.float64)
    for d in range(grid.dim):
        delta = grid.axis_delta(d, xs[:, d : d + 1], multi[d].reshape(n, -1))
        sq += delta * delta
    sq = np.where(valid, sq, np.inf)
    order = np.lexsort((flat, sq), axis=1)[:, :k]
    picked = np.take_along_axis(flat, order, axis=1)
    picked_valid = np.take_along_axis(valid, order, axis=1)
    picked_sq = np.take_along_axis(sq, order, axis=1)
    return picked, picked_valid, picked_sq


def assign_to_grid(
    xs: np.ndarray, grid: GridSpec, k: int = 1, max_slots: Optional[int] = None
) -> GridAssignment:
    """Map each context point to its k nearest grid nodes (default k=1).

    Runs in O(N_c · k) by rounding against the regular lattice; no global
    search. Points outside the extents on non-wrap dimensions are clamped to
    the edge cell and tallied in ``clamped_count``. With ``max_slots`` set,
    overflowing cells drop their farthest members (``dropped_count``).
    """
    xs = np.asarray(xs, dtype=np.float64)
    if xs.ndim != 2 or xs.shape[1] != grid.dim:
        raise T.ShapeError(
            f"assign_to_grid: coordinates {xs.shape} do not match grid dim {grid.dim}"
        )
    if not np.all(np.isfinite(xs)):
        raise T.NumericError("assign_to_grid: non-finite coordinate")
    if k < 1:
        raise ValueError("assign_to_grid: k must be >= 1")
    n = xs.shape[0]
    m_total = grid.total

    clamped = np.zeros(n, dtype=bool)
    per_dim = []
    for d in range(grid.dim):
        idx, oob = grid.nearest_axis_index(d, xs[:, d])
        per_dim.append(idx)
        clamped |= oob
    nearest = grid.flat_index(per_dim) if n else np.zeros(0, dtype=np.int64)

    if k == 1:
        point_ids = np.arange(n)
        cells = nearest
        sq = np.zeros(n, dtype=np.float64)
        for d in range(grid.dim):
            delta = grid.axis_delta(d, xs[:, d], per_dim[d])
            sq += delta * delta
    else:
        picked, picked_valid, picked_sq = _k_nearest_nodes(xs, grid, k)
        point_ids = np.repeat(np.arange(n), k)[picked_valid.reshape(-1)]
        cells = picked.reshape(-1)[picked_valid.reshape(-1)]
        sq = picked_sq.reshape(-1)[picked_valid.reshape(-1)]

    order = np.lexsort((point_ids, sq, cells))
    cells_sorted = cells[order]
    counts_all = np.bincount(cells_sorted, minlength=m_total)
    starts = np.concatenate([[0], np.cumsum(counts_all)[:-1]])
    slots = np.arange(cells_sorted.size) - starts[cells_sorted]

    dropped = 0
    if max_slots is not None and counts_all.size and counts_all.max(initial=0) > max_slots:
        keep = slots < max_slots
        dropped = int((~keep).sum())
        order, cells_sorted, slots = order[keep], cells_sorted[keep], slots[keep]
    cell_counts = np.bincount(cells_sorted, minlength=m_total)
    s_max = max(int(cell_counts.max(initial=0)), 1)

    padded_index = np.full((m_total, s_max), SENTINEL, dtype=np.int64)
    padded_index[cells_sorted, slots] = point_ids[order]
    return GridAssignment(
        grid=grid,
        k=k,
        cell_of=nearest,
        cell_counts=cell_counts,
        padded_index=padded_index,
        mask=padded_index != SENTINEL,
        max_slots=s_max,
        clamped_count=int(clamped.sum()),
        dropped_count=dropped,
    )


def stack_assignments(assignments: Sequence[GridAssignment]):
    """Stack per-task assignments into (B, M, S) index and mask arrays."""
    s_max = max(a.max_slots for a in assignments)
    m_total = assignments[0].grid.total
    b = len(assignments)
    idx = np.full((b, m_total, s_max), SENTINEL, dtype=np.int64)
    for i, a in enumerate(assignments):
        if a.grid.total != m_total:
            raise T.ShapeError("stack_assignments: grids differ across tasks")
        idx[i, :, : a.max_slots] = a.padded_index
    return idx, idx != SENTINEL


def batched_gather(tokens: Tensor, index: np.ndarray) -> Tensor:
    """Gather rows per batch element: tokens (B, N, D), index (B, ...) -> (B, ..., D).

    Sentinel entries gather row 0; callers mask them out.
    """
    b, n = tokens.shape[0], tokens.shape[1]
    flat = T.reshape(tokens, (b * n,) + tokens.shape[2:])
    safe = np.where(index < 0, 0, index)
    offsets = np.arange(b).reshape((b,) + (1,) * (index.ndim - 1)) * n
    return T.gather(flat, safe + offsets)


# ---------------------------------------------------------------------------
# encoders (batched cores)
# ---------------------------------------------------------------------------


def _check_token_dim(tokens: Tensor, dz: int, who: str) -> None:
    if tokens.shape[-1] != dz:
        raise T.ShapeError(
            f"{who}: token width {tokens.shape[-1]} does not match grid width {dz}"
        )


def pt_grid_encode_batched(
    tokens: Tensor,
    padded_index: np.ndarray,
    slot_mask: np.ndarray,
    u0: Tensor,
    attn,
) -> Tensor:
    """Cross-attend each cell's member tokens onto its initial pseudo-token.

    ``tokens`` (B, N, D_z), ``padded_index``/``slot_mask`` (B, M, S),
    ``u0`` (M, D_z); returns (B, M, D_z). All cells run in one padded batch;
    dummy slots are masked out of the softmax. Cells with no real members get
    zero attention output, so only the block's residual MLP path transforms
    the initial token.
    """
    b, n, dz = tokens.shape
    m, s = padded_index.shape[1], padded_index.shape[2]
    _check_token_dim(tokens, u0.shape[-1], "pt_grid_encode")
    if n > 0:
        keys = batched_gather(tokens, padded_index)  # (B, M, S, D)
        keys = T.reshape(keys, (b * m, s, dz))
    else:
        keys = Tensor(np.zeros((b * m, s, dz), dtype=tokens.dtype))
    queries = T.broadcast_to(T.reshape(u0, (1, m, 1, dz)), (b, m, 1, dz))
    queries = T.reshape(queries, (b * m, 1, dz))
    mask = slot_mask.reshape(b * m, 1, s)
    out = attn(queries, keys, mask)
    return T.reshape(out, (b, m, dz))


def ki_grid_encode_batched(
    tokens: Tensor,
    coords: np.ndarray,
    padded_index: np.ndarray,
    slot_mask: np.ndarray,
    grid: GridSpec,
    lengthscales: Tensor,
    resize_mlp,
    sphere: bool = False,
) -> Tensor:
    """Neighbourhood-restricted SE-kernel interpolation onto the grid.

    Weight for token n in cell m is ``exp(-sum_d (x_d - v_d)^2 / l_d^2)``; on
    spherical grids the first two coordinates (lat, lon) contribute a single
    great-circle term ``d_gc^2 / l_0^2`` instead. Returns (B, M, D_z) after
    the resize MLP; a cell with no members is exactly zero before the MLP.
    """
    if np.any(lengthscales.data <= 0):
        raise DomainError("ki_grid_encode: lengthscales must be positive")
    b, n, dz = tokens.shape
    m, s = padded_index.shape[1], padded_index.shape[2]
    v = grid.node_coords()  # (M, Dx)

    safe = np.where(padded_index < 0, 0, padded_index)
    if n > 0:
        xg = np.take_along_axis(
            coords[:, None, :, :], safe[..., None], axis=2
        )  # (B, M, S, Dx)
        keys = T.reshape(batched_gather(tokens, padded_index), (b, m, s, dz))
    else:
        xg = np.zeros((b, m, s, grid.dim))
        keys = Tensor(np.zeros((b, m, s, dz), dtype=tokens.dtype))

    terms = []
    if sphere:
        if grid.dim < 2:
            raise ValueError("spherical kernel needs (lat, lon) leading dimensions")
        d_gc = haversine(xg[..., :2], v[None, :, None, :2])
        terms.append(d_gc**2)
        rest = range(2, grid.dim)
    else:
        rest = range(grid.dim)
    for j, d in enumerate(rest):
        delta = np.abs(xg[..., d] - v[None, :, None, d])
        if grid.wrap[d]:
            period = grid.extents[d][1] - grid.extents[d][0]
            delta = np.minimum(delta, period - delta)
        terms.append(delta * delta)
    if len(terms) != lengthscales.shape[0]:
        raise T.ShapeError(
            f"ki_grid_encode: {lengthscales.shape[0]} lengthscales for "
            f"{len(terms)} kernel terms"
        )
    sq = np.stack(terms, axis=-1).astype(tokens.dtype)  # (B, M, S, J)

    inv = T.div(1.0, T.mul(lengthscales, lengthscales))
    logits = T.neg(T.tsum(T.mul(Tensor(sq), inv), axis=-1))  # (B, M, S)
    w = T.exp(logits)
    w = T.masked_fill(w, ~slot_mask, 0.0)
    u = T.tsum(T.mul(T.reshape(w, (b, m, s, 1)), keys), axis=2)  # (B, M, D)
    return resize_mlp(u)


def avg_grid_encode_batched(
    tokens: Tensor,
    padded_index: np.ndarray,
    slot_mask: np.ndarray,
    u0: Tensor,
) -> Tensor:
    """Mean-pool each cell's member tokens and add the initial pseudo-token.

    Empty cells return the initial token unchanged. Shapes as in
    ``pt_grid_encode_batched``; returns (B, M, D_z).
    """
    b, n, dz = tokens.shape
    m, s = padded_index.shape[1], padded_index.shape[2]
    _check_token_dim(tokens, u0.shape[-1], "avg_grid_encode")
    if n > 0:
        keys = T.reshape(batched_gather(tokens, padded_index), (b, m, s, dz))
    else:
        keys = Tensor(np.zeros((b, m, s, dz), dtype=tokens.dtype))
    weights = slot_mask.astype(tokens.dtype)
    counts = np.maximum(weights.sum(axis=2, keepdims=True), 1.0)  # (B, M, 1)
    pooled = T.tsum(T.mul(keys, Tensor(weights[..., None])), axis=2)
    pooled = T.mul(pooled, Tensor(1.0 / counts))
    return T.add(pooled, T.reshape(u0, (1, m, dz)))


def fuse_multi_source(grids: Sequence[PseudoTokenGrid], mode: str, fusion=None) -> PseudoTokenGrid:
    """Merge per-source pseudo-token grids into one.

    ``single`` expects exactly one grid (built from the union of per-source
    tokens) and returns it unchanged; ``multi`` concatenates per-node tokens
    across sources and applies the pointwise ``fusion`` map.
    """
    if mode not in ("single", "multi"):
        raise ValueError(f"unknown fusion mode {mode!r}")
    if not grids:
        raise ValueError("fuse_multi_source: no grids given")
    base = grids[0]
    for g in grids[1:]:
        if g.grid != base.grid or g.u.shape != base.u.shape:
            raise T.ShapeError(
                f"fuse_multi_source: grid shapes differ "
                f"({g.u.shape} vs {base.u.shape})"
            )
    if mode == "single":
        if len(grids) != 1:
            raise ValueError("single fusion expects one union-encoded grid")
        return base
    if fusion is None:
        raise ValueError("multi fusion requires a fusion map")
    cat = T.concat([g.u for g in grids], axis=-1)
    return PseudoTokenGrid(u=fusion(cat), grid=base.grid, provenance="fused")


# ---------------------------------------------------------------------------
# single-task wrappers matching the operation contracts
# ---------------------------------------------------------------------------


def _to_grid(flat_u: Tensor, grid: GridSpec, provenance: str) -> PseudoTokenGrid:
    b, dz = flat_u.shape[0], flat_u.shape[-1]
    u = T.reshape(flat_u, (b,) + tuple(grid.counts) + (dz,))
    return PseudoTokenGrid(u=u, grid=grid, provenance=provenance)


def pt_grid_encode(tokens: TokenSet, assignment: GridAssignment, u0: Tensor, attn) -> PseudoTokenGrid:
    """Single-task pseudo-token grid encoding; see the batched core."""
    z = T.reshape(tokens.tokens, (1,) + tokens.tokens.shape)
    idx, mask = stack_assignments([assignment])
    flat = pt_grid_encode_batched(z, idx, mask, u0, attn)
    return _to_grid(flat, assignment.grid, "pt")


def ki_grid_encode(
    tokens: TokenSet,
    assignment: GridAssignment,
    lengthscales: Tensor,
    resize_mlp,
    sphere: bool = False,
) -> PseudoTokenGrid:
    """Single-task kernel-interpolation grid encoding; see the batched core."""
    z = T.reshape(tokens.tokens, (1,) + tokens.tokens.shape)
    idx, mask = stack_assignments([assignment])
    flat = ki_grid_encode_batched(
        z, tokens.coords[None], idx, mask, assignment.grid, lengthscales, resize_mlp, sphere
    )
    return _to_grid(flat, assignment.grid, "ki")


def avg_grid_encode(tokens: TokenSet, assignment: GridAssignment, u0: Tensor) -> PseudoTokenGrid:
    """Single-task average-pooling grid encoding; see the batched core."""
    z = T.reshape(tokens.tokens, (1,) + tokens.tokens.shape)
    idx, mask = stack_assignments([assignment])
    flat = avg_grid_encode_batched(z, idx, mask, u0)
    return _to_grid(flat, assignment.grid, "avg")


# ---------------------------------------------------------------------------
# encoder modules
# ---------------------------------------------------------------------------


class PTGridEncoder(Module):
    """Owns the learned initial grid tokens and the per-cell MHCA block."""

    def __init__(self, grid: GridSpec, dz: int, attn, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.grid = grid
        self.u0 = Parameter(normal_init((grid.total, dz), rng, dtype), init_scheme="normal_std")
        self.attn = attn

    def forward(self, tokens: Tensor, coords: np.ndarray, padded_index, slot_mask) -> Tensor:
        return pt_grid_encode_batched(tokens, padded_index, slot_mask, self.u0.tensor, self.attn)


class KIGridEncoder(Module):
    """SE-kernel interpolation with learned log-lengthscales and a resize MLP."""

    def __init__(
        self,
        grid: GridSpec,
        dz: int,
        rng: np.random.Generator,
        dtype=np.float64,
        sphere: bool = False,
        init_lengthscale: float = 1.0,
    ):
        super().__init__()
        self.grid = grid
        self.sphere = sphere
        n_scales = grid.dim - 1 if sphere else grid.dim
        if init_lengthscale <= 0:
            raise DomainError("initial lengthscale must be positive")
        self.log_scales = Parameter(
            np.full(max(n_scales, 1), np.log(init_lengthscale), dtype=dtype),
            init_scheme="zeros",
        )
        self.resize = MLP(dz, [dz, dz], dz, rng, dtype)

    def forward(self, tokens: Tensor, coords: np.ndarray, padded_index, slot_mask) -> Tensor:
        lengthscales = T.exp(self.log_scales.tensor)
        return ki_grid_encode_batched(
            tokens, coords, padded_index, slot_mask, self.grid, lengthscales,
            self.resize, sphere=self.sphere,
        )


class AvgGridEncoder(Module):
    """Token-space average pooling on top of learned initial grid tokens."""

    def __init__(self, grid: GridSpec, dz: int, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.grid = grid
        self.u0 = Parameter(normal_init((grid.total, dz), rng, dtype), init_scheme="normal_std")

    def forward(self, tokens: Tensor, coords: np.ndarray, padded_index, slot_mask) -> Tensor:
        return avg_grid_encode_batched(tokens, padded_index, slot_mask, self.u0.tensor)
