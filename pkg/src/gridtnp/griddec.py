"""Reading a processed grid at arbitrary target locations.

Nearest-neighbour index computation picks ceil(k^(1/D)) lattice coordinates
per dimension (a centred band around the nearest node, ties and the even-width
ambiguity resolved toward the lower coordinate) and takes their Cartesian
product. Wrap dimensions index modulo the count; on non-wrap dimensions,
out-of-range band members are dropped, not replaced.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .gridenc import GridSpec, PseudoTokenGrid, batched_gather, _smallest_per_dim
from .tensor import Tensor

__all__ = [
    "NeighbourIndex",
    "per_dim_neighbour_count",
    "neighbour_indices",
    "nn_cross_attend",
    "full_cross_attend",
    "nn_gather_cost",
    "full_gather_cost",
]


def per_dim_neighbour_count(k: int, dims: int) -> int:
    """Smallest integer j with j**dims >= k, i.e. ceil(k**(1/dims))."""
    if k < 1:
        raise ValueError("k must be >= 1")
    return _smallest_per_dim(k, dims)


@dataclass
class NeighbourIndex:
    """Per-target flat grid indices with a validity mask.

    ``indices`` is (N_t, K) with K the product over dimensions of
    min(k_dim, count); invalid (edge-clipped) entries point at node 0 and are
    masked False.
    """

    grid: GridSpec
    k: int
    k_dim: int
    indices: np.ndarray
    valid: np.ndarray

    @property
    def gather_count(self) -> int:
        return int(self.valid.sum())


def neighbour_indices(targets: np.ndarray, grid: GridSpec, k: int) -> NeighbourIndex:
    """Hypercube nearest-neighbour grid indices for each target.

    Per dimension the band holds the k_dim = ceil(k^(1/D)) lattice indices
    centred on the nearest node (lower-biased when k_dim is even); the
    neighbour set is the Cartesian product of the bands. Runs in O(k · N_t).
    """
    targets = np.asarray(targets, dtype=np.float64)
    if targets.ndim != 2 or targets.shape[1] != grid.dim:
        raise T.ShapeError(
            f"neighbour_indices: targets {targets.shape} do not match grid dim {grid.dim}"
        )
    if not np.all(np.isfinite(targets)):
        raise T.NumericError("neighbour_indices: non-finite target coordinate")
    k_dim = per_dim_neighbour_count(k, grid.dim)
    n = targets.shape[0]

    per_dim_idx, per_dim_valid = [], []
    offsets = np.arange(k_dim) - k_dim // 2
    for d in range(grid.dim):
        m = grid.counts[d]
        if k_dim >= m:
            # the k_dim nearest coordinates are the whole axis
            idx = np.broadcast_to(np.arange(m), (n, m)).copy()
            valid = np.ones((n, m), dtype=bool)
        else:
            center, _ = grid.nearest_axis_index(d, targets[:, d])
            band = center[:, None] + offsets[None, :]
            if grid.wrap[d]:
                idx = np.mod(band, m)
                valid = np.ones_like(band, dtype=bool)
            else:
                valid = (band >= 0) & (band < m)
                idx = np.clip(band, 0, m - 1)
        per_dim_idx.append(idx)
        per_dim_valid.append(valid)

    widths = [a.shape[1] for a in per_dim_idx]
    shaped_idx, shaped_valid = [], []
    for d in range(grid.dim):
        sh = [n] + [1] * grid.dim
        sh[d + 1] = widths[d]
        shaped_idx.append(per_dim_idx[d].reshape(sh))
        shaped_valid.append(per_dim_valid[d].reshape(sh))
    full_shape = [n] + widths
    multi = [np.broadcast_to(a, full_shape).reshape(n, -1) for a in shaped_idx]
    valid = np.ones(full_shape, dtype=bool)
    for v in shaped_valid:
        valid = valid & v
    valid = valid.reshape(n, -1)
    flat = grid.flat_index(multi)
    flat = np.where(valid, flat, 0)

    assert not n or valid.any(axis=1).all(), "every target must keep >= 1 neighbour"
    return NeighbourIndex(grid=grid, k=k, k_dim=k_dim, indices=flat, valid=valid)


def _batch_neighbours(targets_batch: np.ndarray, grid: GridSpec, k: int):
    """Stack neighbour indices for (B, N_t, D_x) targets into (B, N_t, K)."""
    b = targets_batch.shape[0]
    idx = [neighbour_indices(targets_batch[i], grid, k) for i in range(b)]
    return np.stack([e.indices for e in idx]), np.stack([e.valid for e in idx])


def nn_cross_attend(
    z0_targets: Tensor,
    ptg: PseudoTokenGrid,
    idx: np.ndarray,
    valid: np.ndarray,
    attn,
) -> Tensor:
    """Cross-attend each target token to its gathered grid neighbours.

    ``z0_targets`` (B, N_t, D_z); ``idx``/``valid`` (B, N_t, K) against the
    grid's flat cell order. Returns (B, N_t, D_z); total key gathers are
    bounded by K · N_t.
    """
    b, nt, dz = z0_targets.shape
    kk = idx.shape[-1]
    if ptg.u.shape[0] != b:
        raise T.ShapeError(
            f"nn_cross_attend: grid batch {ptg.u.shape[0]} != target batch {b}"
        )
    keys = batched_gather(ptg.flat(), idx)  # (B, N_t, K, D)
    keys = T.reshape(keys, (b * nt, kk, dz))
    queries = T.reshape(z0_targets, (b * nt, 1, dz))
    mask = valid.reshape(b * nt, 1, kk)
    out = attn(queries, keys, mask)
    return T.reshape(out, (b, nt, dz))


def full_cross_attend(z0_targets: Tensor, ptg: PseudoTokenGrid, attn) -> Tensor:
    """Cross-attend each target token to every grid token."""
    return attn(z0_targets, ptg.flat(), None)


def nn_gather_cost(k: int, n_targets: int) -> int:
    """Analytic decoder cost in key gathers for nearest-neighbour attention."""
    return k * n_targets


def full_gather_cost(n_grid: int, n_targets: int) -> int:
    """Analytic decoder cost in key gathers for full cross-attention."""
    return n_grid * n_targets
