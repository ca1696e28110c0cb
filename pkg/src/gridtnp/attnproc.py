"""Transformer building blocks and the two grid processors.

Attention blocks follow the pre-norm layout: ``h = z + Attn(LN1(z))`` then
``out = h + MLP(LN2(h))``; cross-attention normalizes both the query and the
key/value set with the same LN1. Logits are scaled by 1/sqrt(D_QK); masked
pairs get a large negative fill, and rows with no unmasked key produce an
exactly-zero attention output so only the residual stream carries them.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .gridenc import GridSpec, PseudoTokenGrid
from .nn import MLP, Linear, LayerNormAffine, Module
from .tensor import Tensor

__all__ = [
    "AttentionConfig",
    "WindowSpec",
    "MHSABlock",
    "MHCABlock",
    "ViTProcessor",
    "SwinProcessor",
    "patch_coarsen",
    "vit_attention_pairs",
    "swin_attention_pairs",
]


@dataclass(frozen=True)
class AttentionConfig:
    """Widths for one attention block: token width, heads, per-head value and
    query/key widths, and the block-MLP hidden width (defaults to dz)."""

    dz: int = 128
    heads: int = 8
    d_v: int = 16
    d_qk: int = 128
    mlp_hidden: Optional[int] = None

    def __post_init__(self):
        if min(self.dz, self.heads, self.d_v, self.d_qk) < 1:
            raise ValueError("attention widths must be positive")
        if self.mlp_hidden is not None and self.mlp_hidden < 1:
            raise ValueError("mlp_hidden must be positive")

    @property
    def hidden(self) -> int:
        return self.mlp_hidden if self.mlp_hidden is not None else self.dz


@dataclass(frozen=True)
class WindowSpec:
    """Per-dimension window, shift and roll flags for the Swin processor."""

    window: tuple
    shift: tuple
    roll: tuple

    def __post_init__(self):
        object.__setattr__(self, "window", tuple(int(w) for w in self.window))
        object.__setattr__(self, "shift", tuple(int(s) for s in self.shift))
        object.__setattr__(self, "roll", tuple(bool(r) for r in self.roll))
        if not (len(self.window) == len(self.shift) == len(self.roll)):
            raise ValueError("window, shift and roll must have equal lengths")
        if any(w < 1 for w in self.window):
            raise ValueError("window sizes must be >= 1")
        if any(not (0 <= s < w) for s, w in zip(self.shift, self.window)):
            raise ValueError("shifts must satisfy 0 <= shift < window")


class _AttentionCore(Module):
    """Shared projections and the masked multi-head attention sublayer."""

    def __init__(self, cfg: AttentionConfig, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.cfg = cfg
        self.ln1 = LayerNormAffine(cfg.dz, dtype)
        self.ln2 = LayerNormAffine(cfg.dz, dtype)
        self.wq = Linear(cfg.dz, cfg.heads * cfg.d_qk, rng, dtype)
        self.wk = Linear(cfg.dz, cfg.heads * cfg.d_qk, rng, dtype)
        self.wv = Linear(cfg.dz, cfg.heads * cfg.d_v, rng, dtype)
        self.wo = Linear(cfg.heads * cfg.d_v, cfg.dz, rng, dtype)
        self.mlp = MLP(cfg.dz, [cfg.hidden], cfg.dz, rng, dtype)

    def _heads(self, t: Tensor, width: int) -> Tensor:
        # (..., N, H*W) -> (..., H, N, W)
        shape = t.shape[:-1] + (self.cfg.heads, width)
        return T.swapaxes(T.reshape(t, shape), -3, -2)

    def _check_width(self, z: Tensor, who: str) -> None:
        if z.shape[-1] != self.cfg.dz:
            raise T.ShapeError(
                f"{who}: token width {z.shape[-1]} does not match config dz {self.cfg.dz}"
            )

    def _logits(self, zq_n: Tensor, zkv_n: Tensor, mask: Optional[np.ndarray]):
        q = self._heads(self.wq(zq_n), self.cfg.d_qk)
        k = self._heads(self.wk(zkv_n), self.cfg.d_qk)
        logits = T.mul(T.matmul(q, T.swapaxes(k, -1, -2)), 1.0 / np.sqrt(self.cfg.d_qk))
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)
            logits = T.masked_fill(logits, ~mask[..., None, :, :], T.MASK_FILL)
        return logits, mask

    def attend(self, zq: Tensor, zkv: Tensor, mask: Optional[np.ndarray]) -> Tensor:
        """Attention sublayer output (pre-residual) with LN1 applied to both sets."""
        self._check_width(zq, "attention")
        self._check_width(zkv, "attention")
        zq_n = self.ln1(zq)
        zkv_n = zq_n if zkv is zq else self.ln1(zkv)
        logits, mask = self._logits(zq_n, zkv_n, mask)
        attn = T.softmax(logits, -1)
        if mask is not None:
            row_valid = mask.any(axis=-1)
            if not row_valid.all():
                attn = T.mul(attn, row_valid[..., None, :, None].astype(attn.dtype))
        v = self._heads(self.wv(zkv_n), self.cfg.d_v)
        out = T.swapaxes(T.matmul(attn, v), -3, -2)  # (..., N, H, D_V)
        out = T.reshape(out, out.shape[:-2] + (self.cfg.heads * self.cfg.d_v,))
        return self.wo(out)

    def attention_weights(
        self, zq: Tensor, zkv: Tensor, mask: Optional[np.ndarray]
    ) -> np.ndarray:
        """Per-head softmax weights (..., H, Nq, Nk) as plain numpy, for tests."""
        zq_n = self.ln1(zq)
        zkv_n = zq_n if zkv is zq else self.ln1(zkv)
        logits, mask = self._logits(zq_n, zkv_n, mask)
        w = T.softmax(logits, -1).data.copy()
        if mask is not None:
            row_valid = mask.any(axis=-1)
            w = w * row_valid[..., None, :, None]
        return w

    def _finish(self, z: Tensor, sublayer: Tensor) -> Tensor:
        h = T.add(z, sublayer)
        return T.add(h, self.mlp(self.ln2(h)))


class MHSABlock(_AttentionCore):
    """Pre-norm multi-head self-attention block with residual MLP."""

    def forward(self, z: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
        return self._finish(z, self.attend(z, z, mask))


class MHCABlock(_AttentionCore):
    """Pre-norm multi-head cross-attention block updating the query set."""

    def forward(self, zq: Tensor, zkv: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
        return self._finish(zq, self.attend(zq, zkv, mask))


# ---------------------------------------------------------------------------
# window bookkeeping
# ---------------------------------------------------------------------------


def _partition_axes(dim: int):
    # (B, n1, w1, ..., nd, wd, D) -> (B, n1..nd, w1..wd, D)
    return [0] + [1 + 2 * i for i in range(dim)] + [2 + 2 * i for i in range(dim)] + [2 * dim + 1]


def _window_partition(u: Tensor, counts, window) -> Tensor:
    b, dz = u.shape[0], u.shape[-1]
    dim = len(counts)
    n = [c // w for c, w in zip(counts, window)]
    shape = (b,) + tuple(x for c, w in zip(n, window) for x in (c, w)) + (dz,)
    t = T.reshape(u, shape)
    t = T.transpose(t, _partition_axes(dim))
    nw, ws = int(np.prod(n)), int(np.prod(window))
    return T.reshape(t, (b * nw, ws, dz))


def _window_merge(t: Tensor, b: int, counts, window) -> Tensor:
    dim = len(counts)
    n = [c // w for c, w in zip(counts, window)]
    dz = t.shape[-1]
    t = T.reshape(t, (b,) + tuple(n) + tuple(window) + (dz,))
    t = T.transpose(t, list(np.argsort(_partition_axes(dim))))
    return T.reshape(t, (b,) + tuple(counts) + (dz,))


def _partition_mask(arr: np.ndarray, counts, window) -> np.ndarray:
    """Window-partition a per-node numpy array of shape (B, *counts)."""
    b = arr.shape[0]
    dim = len(counts)
    n = [c // w for c, w in zip(counts, window)]
    shape = (b,) + tuple(x for c, w in zip(n, window) for x in (c, w))
    out = arr.reshape(shape).transpose(_partition_axes(dim)[:-1])
    return out.reshape(b * int(np.prod(n)), int(np.prod(window)))


def patch_coarsen(grid: GridSpec, patch: Sequence[int]) -> GridSpec:
    """Grid of patch centers; patch sizes must divide the counts."""
    patch = tuple(int(p) for p in patch)
    if len(patch) != grid.dim:
        raise T.ShapeError(f"patch rank {len(patch)} does not match grid dim {grid.dim}")
    counts, extents = [], []
    for d, p in enumerate(patch):
        m = grid.counts[d]
        if p < 1 or m % p != 0:
            raise T.ShapeError(f"patch size {p} does not divide grid count {m}")
        step = grid.spacing(d)
        coords = grid.axis_coords(d)
        first = coords[0] + (p - 1) * step / 2.0
        counts.append(m // p)
        if grid.wrap[d]:
            lo, hi = grid.extents[d]
            extents.append((first, first + (hi - lo)))
        else:
            if m // p == 1:
                half = step * m / 2.0
                extents.append((first - half, first + half))
            else:
                last = coords[-1] - (p - 1) * step / 2.0
                extents.append((first, last))
    return GridSpec(tuple(counts), tuple(extents), grid.wrap)


# ---------------------------------------------------------------------------
# processors
# ---------------------------------------------------------------------------


class ViTProcessor(Module):
    """Optional patch encoding followed by full self-attention layers.

    Patch encoding flattens each patch of tokens and applies one linear map
    back to width dz, coarsening the grid by the patch factors.
    """

    def __init__(
        self,
        grid: GridSpec,
        cfg: AttentionConfig,
        layers: int,
        rng: np.random.Generator,
        dtype=np.float64,
        patch: Optional[Sequence[int]] = None,
    ):
        super().__init__()
        self.grid = grid
        self.patch = tuple(int(p) for p in patch) if patch is not None else None
        self.out_grid = patch_coarsen(grid, self.patch) if self.patch else grid
        if self.patch:
            self.patch_linear = Linear(int(np.prod(self.patch)) * cfg.dz, cfg.dz, rng, dtype)
        self.blocks = [MHSABlock(cfg, rng, dtype) for _ in range(layers)]

    def forward(self, ptg: PseudoTokenGrid) -> PseudoTokenGrid:
        if ptg.grid != self.grid:
            raise T.ShapeError("vit_process: grid does not match processor grid")
        b, dz = ptg.u.shape[0], ptg.u.shape[-1]
        if self.patch:
            t = _window_partition(ptg.u, self.grid.counts, self.patch)
            nw = self.out_grid.total
            t = T.reshape(t, (b, nw, int(np.prod(self.patch)) * dz))
            z = self.patch_linear(t)
        else:
            z = ptg.flat()
        for block in self.blocks:
            z = block(z)
        u = T.reshape(z, (b,) + tuple(self.out_grid.counts) + (dz,))
        return PseudoTokenGrid(u=u, grid=self.out_grid, provenance=ptg.provenance)


class SwinProcessor(Module):
    """Windowed self-attention with a cyclic shift between the two passes of
    each layer.

    Dimensions flagged ``roll`` wrap across the boundary during the shifted
    pass; on the others, tokens separated by the wrap seam are masked from
    attending to each other. Grids not divisible by the window are
    right-padded with masked filler nodes (not allowed on rolled dimensions,
    where padding would corrupt adjacency).
    """

    def __init__(
        self,
        grid: GridSpec,
        spec: WindowSpec,
        cfg: AttentionConfig,
        layers: int,
        rng: np.random.Generator,
        dtype=np.float64,
    ):
        super().__init__()
        if len(spec.window) != grid.dim:
            raise T.ShapeError(f"window rank {len(spec.window)} does not match grid dim {grid.dim}")
        for d, (w, m) in enumerate(zip(spec.window, grid.counts)):
            if w > m:
                raise T.ShapeError(f"window {w} larger than grid count {m} on dim {d}")
            if spec.roll[d] and m % w != 0:
                raise T.ShapeError(
                    f"rolled dim {d} needs window {w} to divide count {m} (padding would break wrap)"
                )
        self.grid = grid
        self.spec = spec
        self.padded = tuple(-(-m // w) * w for m, w in zip(grid.counts, spec.window))
        self.blocks = [
            (MHSABlock(cfg, rng, dtype), MHSABlock(cfg, rng, dtype)) for _ in range(layers)
        ]

    def _shift_regions(self) -> np.ndarray:
        """Combined wrap-seam region id per padded node for the shifted pass.

        Tokens may attend within a window only if their ids match; rolled
        dimensions contribute nothing (wrapping is allowed there).
        """
        region = np.zeros(self.padded, dtype=np.int64)
        for d, (p, s) in enumerate(zip(self.padded, self.spec.shift)):
            if self.spec.roll[d] or s == 0:
                continue
            lab = (np.arange(p) >= p - s).astype(np.int64)
            shape = [1] * len(self.padded)
            shape[d] = p
            region = region * 2 + lab.reshape(shape)
        return region

    def forward(self, ptg: PseudoTokenGrid) -> PseudoTokenGrid:
        if ptg.grid != self.grid:
            raise T.ShapeError("swin_process: grid does not match processor grid")
        b, dz = ptg.u.shape[0], ptg.u.shape[-1]
        counts, window, shift = self.grid.counts, self.spec.window, self.spec.shift
        pad = [p - m for p, m in zip(self.padded, counts)]

        u = ptg.u
        valid = np.ones((b,) + counts, dtype=bool)
        if any(pad):
            u = T.pad_end(u, [0] + pad + [0])
            valid = np.pad(valid, [(0, 0)] + [(0, a) for a in pad])

        neg_shift = tuple(-s for s in shift)
        grid_axes = tuple(range(1, self.grid.dim + 1))
        region = self._shift_regions()
        region_w = _partition_mask(region[None], self.padded, window)[None]  # (1, NW, WS)
        shifted_compat = region_w[..., :, None] == region_w[..., None, :]

        def pass_windows(t, node_valid, block, extra_compat):
            vw = _partition_mask(node_valid, self.padded, window)  # (B*NW, WS)
            mask = vw[:, :, None] & vw[:, None, :]
            if extra_compat is not None:
                nw = extra_compat.shape[1]
                compat = np.broadcast_to(extra_compat, (b, nw) + extra_compat.shape[2:])
                mask &= compat.reshape(mask.shape)
            zw = _window_partition(t, self.padded, window)
            zw = block(zw, mask)
            return _window_merge(zw, b, self.padded, window)

        for block_a, block_b in self.blocks:
            u = pass_windows(u, valid, block_a, None)
            u_s = T.roll(u, neg_shift, grid_axes) if any(shift) else u
            valid_s = np.roll(valid, neg_shift, grid_axes) if any(shift) else valid
            u_s = pass_windows(u_s, valid_s, block_b, shifted_compat)
            u = T.roll(u_s, shift, grid_axes) if any(shift) else u_s

        if any(pad):
            u = u[(slice(None),) + tuple(slice(0, m) for m in counts) + (slice(None),)]
        return PseudoTokenGrid(u=u, grid=self.grid, provenance=ptg.provenance)


def vit_attention_pairs(n_tokens: int, layers: int) -> int:
    """Analytic query-key pair count for full attention."""
    return layers * n_tokens * n_tokens


def swin_attention_pairs(counts, window, layers: int) -> int:
    """Analytic query-key pair count for windowed attention (both passes)."""
    padded = [-(-m // w) * w for m, w in zip(counts, window)]
    return 2 * layers * int(np.prod(padded)) * int(np.prod(window))
