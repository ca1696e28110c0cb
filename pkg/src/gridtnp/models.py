"""Full conditional neural processes: the gridded TNP (grid encoder x grid
processor x grid decoder), plus CNP and pseudo-token TNP baselines, with the
Gaussian likelihood head and the maximum-likelihood training loss.

Tasks are processed in padded batches; validity masks keep padded context
rows out of every attention softmax and padded targets out of the loss, so a
batch of one reproduces single-task semantics exactly. Target tokens never
write into the context pathway in any variant.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .attnproc import AttentionConfig, MHCABlock, SwinProcessor, ViTProcessor, WindowSpec
from .geomembed import FourierEmbedConfig, SphericalEmbedConfig, fourier_embed, spherical_embed
from .gridenc import (
    SENTINEL,
    AvgGridEncoder,
    GridSpec,
    KIGridEncoder,
    PseudoTokenGrid,
    PTGridEncoder,
    assign_to_grid,
)
from .griddec import _batch_neighbours, full_cross_attend, nn_cross_attend
from .nn import MLP, Module, Parameter, normal_init
from .tensor import NumericError, Tensor

__all__ = [
    "EmbeddingConfig",
    "InputEmbedder",
    "ModelConfig",
    "ConfigError",
    "TaskBatch",
    "GaussianPrediction",
    "gaussian_head",
    "cnp_loss",
    "loglik_points",
    "CNPModel",
    "PTTNPModel",
    "GriddedTNPModel",
    "build_model",
    "model_config_from_sections",
]

_DTYPES = {"float32": np.float32, "float64": np.float64}
_LOG_2PI = float(np.log(2.0 * np.pi))


class ConfigError(ValueError):
    """Inconsistent or unknown model/experiment configuration."""


# ---------------------------------------------------------------------------
# input embedding
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EmbeddingConfig:
    """How raw input coordinates become features.

    ``identity`` passes coordinates through; ``fourier`` applies the same
    Fourier embedding to each input dimension; ``spherical`` treats the first
    two dimensions as (lat, lon) degrees and embeds them with spherical
    harmonics, any trailing dimensions (e.g. time) with ``time_fourier``.
    """

    kind: str = "identity"
    fourier: Optional[FourierEmbedConfig] = None
    spherical: Optional[SphericalEmbedConfig] = None
    time_fourier: Optional[FourierEmbedConfig] = None

    def __post_init__(self):
        if self.kind not in ("identity", "fourier", "spherical"):
            raise ConfigError(f"unknown embedding kind {self.kind!r}")
        if self.kind == "fourier" and self.fourier is None:
            raise ConfigError("fourier embedding needs a FourierEmbedConfig")
        if self.kind == "spherical" and self.spherical is None:
            raise ConfigError("spherical embedding needs a SphericalEmbedConfig")

    def to_dict(self) -> dict:
        out: dict = {"kind": self.kind}
        if self.fourier:
            out["fourier"] = vars(self.fourier).copy()
        if self.spherical:
            out["spherical"] = vars(self.spherical).copy()
        if self.time_fourier:
            out["time_fourier"] = vars(self.time_fourier).copy()
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "EmbeddingConfig":
        d = dict(d)
        kind = d.pop("kind", "identity")
        fourier = FourierEmbedConfig(**d.pop("fourier")) if "fourier" in d else None
        spherical = SphericalEmbedConfig(**d.pop("spherical")) if "spherical" in d else None
        time_fourier = (
            FourierEmbedConfig(**d.pop("time_fourier")) if "time_fourier" in d else None
        )
        if d:
            raise ConfigError(f"unknown embedding keys {sorted(d)}")
        return cls(kind=kind, fourier=fourier, spherical=spherical, time_fourier=time_fourier)


class InputEmbedder:
    """Maps raw coordinates (..., D_x) to feature vectors (..., width)."""

    def __init__(self, cfg: EmbeddingConfig, dim_x: int):
        self.cfg = cfg
        self.dim_x = dim_x
        if cfg.kind == "identity":
            self.width = dim_x
        elif cfg.kind == "fourier":
            self.width = dim_x * cfg.fourier.width
        else:
            if dim_x < 2:
                raise ConfigError("spherical embedding needs at least (lat, lon) inputs")
            extra = dim_x - 2
            if extra and cfg.time_fourier is None:
                raise ConfigError("trailing input dims need a time_fourier config")
            self.width = cfg.spherical.width + extra * (cfg.time_fourier.width if extra else 0)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.dim_x:
            raise T.ShapeError(f"embedder: input dim {x.shape[-1]} != configured {self.dim_x}")
        if self.cfg.kind == "identity":
            return x
        if self.cfg.kind == "fourier":
            feats = fourier_embed(x, self.cfg.fourier)  # (..., D_x, L)
            return feats.reshape(x.shape[:-1] + (self.width,))
        parts = [spherical_embed(x[..., 0], x[..., 1], self.cfg.spherical)]
        for d in range(2, self.dim_x):
            parts.append(fourier_embed(x[..., d], self.cfg.time_fourier))
        return np.concatenate(parts, axis=-1)


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class ModelConfig:
    """Everything needed to build one model variant.

    ``dims_y`` holds the output width of each context source; targets carry
    ``target_dim_y`` outputs. Gridded settings are ignored by the baselines,
    and vice versa; ``validate`` enforces mutual consistency.
    """

    variant: str  # cnp | pt_tnp | gridded_tnp
    dim_x: int
    dims_y: tuple = (1,)
    target_dim_y: int = 1
    embedding: EmbeddingConfig = field(default_factory=EmbeddingConfig)
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    # gridded pipeline
    grid: Optional[GridSpec] = None
    encoder: str = "pt"  # pt | ki | avg
    fusion: str = "single"  # single | multi
    encode_k: int = 1
    max_slots: Optional[int] = None
    sphere: bool = False
    processor: str = "swin"  # vit | swin
    processor_layers: int = 5
    patch: Optional[tuple] = None
    window: Optional[WindowSpec] = None
    decoder: str = "nn"  # nn | full
    decoder_k: int = 9
    # pseudo-token TNP
    num_pseudo_tokens: int = 16
    pt_layers: int = 5
    # likelihood head
    var_floor: float = 0.0
    var_floor_mode: str = "std"  # std | var
    precision: str = "float32"

    def validate(self) -> None:
        if self.variant not in ("cnp", "pt_tnp", "gridded_tnp"):
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.precision not in _DTYPES:
            raise ConfigError(f"unknown precision {self.precision!r}")
        if self.var_floor < 0:
            raise ConfigError("var_floor must be >= 0")
        if self.var_floor_mode not in ("std", "var"):
            raise ConfigError(f"unknown var_floor_mode {self.var_floor_mode!r}")
        if not self.dims_y:
            raise ConfigError("need at least one context source")
        if self.variant == "pt_tnp" and self.num_pseudo_tokens < 1:
            raise ConfigError("num_pseudo_tokens must be >= 1")
        if self.variant == "gridded_tnp":
            if self.grid is None:
                raise ConfigError("gridded_tnp needs a grid")
            if self.grid.dim != self.dim_x:
                raise ConfigError(
                    f"grid dim {self.grid.dim} does not match input dim {self.dim_x}"
                )
            if self.encoder not in ("pt", "ki", "avg"):
                raise ConfigError(f"unknown encoder {self.encoder!r}")
            if self.fusion not in ("single", "multi"):
                raise ConfigError(f"unknown fusion {self.fusion!r}")
            if self.processor not in ("vit", "swin"):
                raise ConfigError(f"unknown processor {self.processor!r}")
            if self.processor == "swin" and self.window is None:
                raise ConfigError("swin processor needs a WindowSpec")
            if self.processor == "vit" and self.window is not None:
                raise ConfigError("window spec is only valid with the swin processor")
            if self.processor == "swin" and self.patch is not None:
                raise ConfigError("patch encoding is only valid with the vit processor")
            if self.decoder not in ("nn", "full"):
                raise ConfigError(f"unknown decoder {self.decoder!r}")
            if self.decoder == "nn" and self.decoder_k < 1:
                raise ConfigError("decoder_k must be >= 1")

    @property
    def dtype(self):
        return _DTYPES[self.precision]

    @property
    def n_sources(self) -> int:
        return len(self.dims_y)

    def to_sections(self) -> dict:
        """Split into the {model, grid} config-file sections."""
        model = {
            "variant": self.variant,
            "dim_x": self.dim_x,
            "dims_y": list(self.dims_y),
            "target_dim_y": self.target_dim_y,
            "embedding": self.embedding.to_dict(),
            "attention": {
                "dz": self.attention.dz,
                "heads": self.attention.heads,
                "d_v": self.attention.d_v,
                "d_qk": self.attention.d_qk,
                "mlp_hidden": self.attention.mlp_hidden,
            },
            "encoder": self.encoder,
            "fusion": self.fusion,
            "encode_k": self.encode_k,
            "max_slots": self.max_slots,
            "sphere": self.sphere,
            "processor": self.processor,
            "processor_layers": self.processor_layers,
            "patch": list(self.patch) if self.patch else None,
            "window": (
                {
                    "window": list(self.window.window),
                    "shift": list(self.window.shift),
                    "roll": list(self.window.roll),
                }
                if self.window
                else None
            ),
            "decoder": self.decoder,
            "decoder_k": self.decoder_k,
            "num_pseudo_tokens": self.num_pseudo_tokens,
            "pt_layers": self.pt_layers,
            "var_floor": self.var_floor,
            "var_floor_mode": self.var_floor_mode,
            "precision": self.precision,
        }
        return {"model": model, "grid": self.grid.to_dict() if self.grid else None}


def _strict_pop(d: dict, known: dict, what: str) -> dict:
    unknown = sorted(set(d) - set(known))
    if unknown:
        raise ConfigError(f"unknown {what} keys {unknown}")
    merged = dict(known)
    merged.update(d)
    return merged


def model_config_from_sections(model: dict, grid: Optional[dict]) -> ModelConfig:
    """Build a validated ModelConfig from the {model, grid} config sections.

    Unknown keys anywhere are rejected.
    """
    defaults = ModelConfig(variant="cnp", dim_x=1)
    known = {
        "variant": None,
        "dim_x": None,
        "dims_y": [1],
        "target_dim_y": 1,
        "embedding": {"kind": "identity"},
        "attention": {},
        "encoder": defaults.encoder,
        "fusion": defaults.fusion,
        "encode_k": defaults.encode_k,
        "max_slots": None,
        "sphere": False,
        "processor": defaults.processor,
        "processor_layers": defaults.processor_layers,
        "patch": None,
        "window": None,
        "decoder": defaults.decoder,
        "decoder_k": defaults.decoder_k,
        "num_pseudo_tokens": defaults.num_pseudo_tokens,
        "pt_layers": defaults.pt_layers,
        "var_floor": 0.0,
        "var_floor_mode": "std",
        "precision": "float32",
    }
    m = _strict_pop(dict(model), known, "model")
    if m["variant"] is None or m["dim_x"] is None:
        raise ConfigError("model section needs at least 'variant' and 'dim_x'")
    attn_known = {"dz": 128, "heads": 8, "d_v": 16, "d_qk": 128, "mlp_hidden": None}
    attn = _strict_pop(dict(m["attention"]), attn_known, "attention")
    window = None
    if m["window"] is not None:
        w = _strict_pop(dict(m["window"]), {"window": None, "shift": None, "roll": None}, "window")
        window = WindowSpec(tuple(w["window"]), tuple(w["shift"]), tuple(w["roll"]))
    cfg = ModelConfig(
        variant=m["variant"],
        dim_x=int(m["dim_x"]),
        dims_y=tuple(m["dims_y"]),
        target_dim_y=int(m["target_dim_y"]),
        embedding=EmbeddingConfig.from_dict(m["embedding"]),
        attention=AttentionConfig(**attn),
        grid=GridSpec.from_dict(grid) if grid else None,
        encoder=m["encoder"],
        fusion=m["fusion"],
        encode_k=int(m["encode_k"]),
        max_slots=m["max_slots"],
        sphere=bool(m["sphere"]),
        processor=m["processor"],
        processor_layers=int(m["processor_layers"]),
        patch=tuple(m["patch"]) if m["patch"] else None,
        window=window,
        decoder=m["decoder"],
        decoder_k=int(m["decoder_k"]),
        num_pseudo_tokens=int(m["num_pseudo_tokens"]),
        pt_layers=int(m["pt_layers"]),
        var_floor=float(m["var_floor"]),
        var_floor_mode=m["var_floor_mode"],
        precision=m["precision"],
    )
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# batched tasks
# ---------------------------------------------------------------------------


@dataclass
class TaskBatch:
    """Tasks padded to common sizes with validity masks.

    ``xs[s]`` is (B, N_s, D_x) for source s with mask ``ctx_mask[s]``;
    padded context rows repeat the task's own last real row (or zeros when a
    task has no context at all), padded targets repeat the last real target.
    """

    xs: list
    ys: list
    ctx_mask: list
    xt: np.ndarray
    yt: np.ndarray
    t_mask: np.ndarray

    @property
    def batch_size(self) -> int:
        return self.xt.shape[0]

    @classmethod
    def from_tasks(cls, tasks: Sequence) -> "TaskBatch":
        b = len(tasks)
        n_sources = len(tasks[0].sources)
        dim_x = tasks[0].x_t.shape[1]
        xs, ys, ctx_mask = [], [], []
        for s in range(n_sources):
            dy = tasks[0].sources[s][1].shape[1]
            n_max = max(1, max(t.sources[s][0].shape[0] for t in tasks))
            x = np.zeros((b, n_max, dim_x))
            y = np.zeros((b, n_max, dy))
            m = np.zeros((b, n_max), dtype=bool)
            for i, t in enumerate(tasks):
                xc, yc = t.sources[s]
                n = xc.shape[0]
                if n:
                    x[i, :n], y[i, :n], m[i, :n] = xc, yc, True
                    x[i, n:], y[i, n:] = xc[-1], yc[-1]
            xs.append(x)
            ys.append(y)
            ctx_mask.append(m)
        nt_max = max(t.x_t.shape[0] for t in tasks)
        dy_t = tasks[0].y_t.shape[1]
        xt = np.zeros((b, nt_max, dim_x))
        yt = np.zeros((b, nt_max, dy_t))
        tm = np.zeros((b, nt_max), dtype=bool)
        for i, t in enumerate(tasks):
            n = t.x_t.shape[0]
            xt[i, :n], yt[i, :n], tm[i, :n] = t.x_t, t.y_t, True
            xt[i, n:], yt[i, n:] = t.x_t[-1], t.y_t[-1]
        return cls(xs=xs, ys=ys, ctx_mask=ctx_mask, xt=xt, yt=yt, t_mask=tm)


# ---------------------------------------------------------------------------
# likelihood head and loss
# ---------------------------------------------------------------------------


@dataclass
class GaussianPrediction:
    """Per-target factorized Gaussian: mean and variance, (B, N_t, D_y)."""

    mean: Tensor
    var: Tensor
    t_mask: Optional[np.ndarray] = None


def gaussian_head(raw: Tensor, var_floor: float = 0.0, mode: str = "std") -> GaussianPrediction:
    """Split the decoder output into a mean and a softplus-positive variance.

    With a floor configured, mode "std" parameterizes
    ``sigma = sqrt(var_floor) + sqrt(softplus(v))`` (so variance tends to the
    floor as v -> -inf); mode "var" uses ``var = var_floor + softplus(v)``.
    """
    width = raw.shape[-1]
    if width % 2 != 0:
        raise T.ShapeError(f"gaussian_head: output width {width} must be 2 * D_y")
    dy = width // 2
    mean, v = T.split(raw, [dy, dy], axis=-1)
    sp = T.softplus(v)
    if var_floor == 0.0:
        var = sp
    elif mode == "std":
        sigma = T.add(T.sqrt(sp), float(np.sqrt(var_floor)))
        var = T.mul(sigma, sigma)
    elif mode == "var":
        var = T.add(sp, float(var_floor))
    else:
        raise ConfigError(f"unknown var floor mode {mode!r}")
    return GaussianPrediction(mean=mean, var=var)


def _loglik_terms(pred: GaussianPrediction, y: np.ndarray) -> Tensor:
    """Per-point log density, summed over output dims: (B, N_t)."""
    y = np.asarray(y, dtype=pred.mean.dtype)
    if y.shape != pred.mean.shape:
        raise T.ShapeError(
            f"targets {y.shape} do not match prediction mean {pred.mean.shape}"
        )
    diff = T.sub(Tensor(y), pred.mean)
    quad = T.div(T.mul(diff, diff), pred.var)
    ll = T.mul(T.add(T.add(T.log(pred.var), quad), _LOG_2PI), -0.5)
    return T.tsum(ll, axis=-1)


def cnp_loss(pred: GaussianPrediction, y: np.ndarray) -> Tensor:
    """Negative mean per-target-point log-likelihood (maximum-likelihood loss).

    The reported "log-lik." metric is the positive per-point mean of the same
    quantity. Padded targets (mask False) are excluded.
    """
    if np.any(pred.var.data <= 0):
        raise ConfigError("cnp_loss: non-positive predictive variance")
    ll = _loglik_terms(pred, y)
    if pred.t_mask is None:
        return T.neg(T.tmean(ll))
    w = pred.t_mask.astype(ll.dtype)
    total = T.tsum(T.mul(ll, Tensor(w)))
    return T.neg(T.div(total, float(w.sum())))


def loglik_points(pred: GaussianPrediction, y: np.ndarray) -> np.ndarray:
    """Per-point log-likelihoods as plain numpy (no graph), for evaluation."""
    return _loglik_terms(pred, y).data


# ---------------------------------------------------------------------------
# shared pieces
# ---------------------------------------------------------------------------


def _check_finite(arr: np.ndarray, stage: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite activation at stage: {stage}")


class _Encoders(Module):
    """Per-source pointwise encoder MLPs and the target-input encoder MLP."""

    def __init__(self, cfg: ModelConfig, rng, dtype):
        super().__init__()
        self.embedder = InputEmbedder(cfg.embedding, cfg.dim_x)
        dz = cfg.attention.dz
        self.source_mlps = [
            MLP(self.embedder.width + dy, [dz, dz], dz, rng, dtype) for dy in cfg.dims_y
        ]
        self.target_mlp = MLP(self.embedder.width, [dz, dz], dz, rng, dtype)

    def encode_source(self, s: int, x: np.ndarray, y: np.ndarray, dtype) -> Tensor:
        feats = self.embedder(x).astype(dtype)
        inp = np.concatenate([feats, np.asarray(y, dtype=dtype)], axis=-1)
        return self.source_mlps[s](Tensor(inp))

    def encode_targets(self, xt: np.ndarray, dtype) -> Tensor:
        return self.target_mlp(Tensor(self.embedder(xt).astype(dtype)))


class _ModelBase(Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.dtype = cfg.dtype

    def forward_task(self, task) -> GaussianPrediction:
        return self.forward(TaskBatch.from_tasks([task]))

    def _head(self, raw: Tensor, t_mask: np.ndarray) -> GaussianPrediction:
        pred = gaussian_head(raw, self.cfg.var_floor, self.cfg.var_floor_mode)
        _check_finite(pred.mean.data, "likelihood head (mean)")
        _check_finite(pred.var.data, "likelihood head (variance)")
        pred.t_mask = t_mask
        return pred


# ---------------------------------------------------------------------------
# CNP
# ---------------------------------------------------------------------------


class CNPModel(_ModelBase):
    """Deep-sets CNP: per-source mean aggregation summed across sources,
    concatenated with the target embedding and decoded pointwise.

    Context rows are lexicographically sorted before the reduction so the
    output is bit-identical under context permutation.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__(cfg)
        dz = cfg.attention.dz
        self.enc = _Encoders(cfg, rng, self.dtype)
        self.decoder_mlp = MLP(
            dz + self.enc.embedder.width, [dz, dz], 2 * cfg.target_dim_y, rng, self.dtype
        )

    @staticmethod
    def _sorted_rows(x: np.ndarray, y: np.ndarray, mask: np.ndarray):
        """Reorder each task's rows to a canonical order: real rows first,
        sorted lexicographically by coordinates then values."""
        b = x.shape[0]
        xo, yo, mo = x.copy(), y.copy(), mask.copy()
        for i in range(b):
            keys = np.concatenate([y[i], x[i]], axis=-1).T  # last key = primary
            order = np.lexsort(np.vstack([keys, ~mask[i]]))
            xo[i], yo[i], mo[i] = x[i][order], y[i][order], mask[i][order]
        return xo, yo, mo

    def forward(self, batch: TaskBatch) -> GaussianPrediction:
        cfg = self.cfg
        agg = None
        for s in range(cfg.n_sources):
            x, y, mask = self._sorted_rows(batch.xs[s], batch.ys[s], batch.ctx_mask[s])
            tokens = self.enc.encode_source(s, x, y, self.dtype)  # (B, N, dz)
            w = mask.astype(self.dtype)[..., None]
            count = np.maximum(w.sum(axis=1, keepdims=True), 1.0)
            mean_s = T.mul(T.tsum(T.mul(tokens, Tensor(w)), axis=1, keepdims=True), Tensor(1.0 / count))
            agg = mean_s if agg is None else T.add(agg, mean_s)
        _check_finite(agg.data, "context aggregation")
        b, nt = batch.xt.shape[:2]
        feats = self.enc.embedder(batch.xt).astype(self.dtype)
        agg_b = T.broadcast_to(agg, (b, nt, agg.shape[-1]))
        raw = self.decoder_mlp(T.concat([agg_b, Tensor(feats)], axis=-1))
        return self._head(raw, batch.t_mask)


# ---------------------------------------------------------------------------
# pseudo-token TNP (induced set transformer)
# ---------------------------------------------------------------------------


class PTTNPModel(_ModelBase):
    """Context and targets interact only through M learned pseudo-tokens.

    Each layer updates, in order: pseudo-tokens from context, targets from
    pseudo-tokens, context from pseudo-tokens. With no context the first and
    last updates contribute only their residual MLP path.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__(cfg)
        dz = cfg.attention.dz
        self.enc = _Encoders(cfg, rng, self.dtype)
        self.u0 = Parameter(
            normal_init((cfg.num_pseudo_tokens, dz), rng, self.dtype), init_scheme="normal_std"
        )
        self.layers = [
            _ISTLayer(cfg.attention, rng, self.dtype) for _ in range(cfg.pt_layers)
        ]
        self.decoder_mlp = MLP(dz, [dz, dz], 2 * cfg.target_dim_y, rng, self.dtype)

    def forward(self, batch: TaskBatch) -> GaussianPrediction:
        cfg = self.cfg
        tokens = [
            self.enc.encode_source(s, batch.xs[s], batch.ys[s], self.dtype)
            for s in range(cfg.n_sources)
        ]
        zc = tokens[0] if len(tokens) == 1 else T.concat(tokens, axis=1)
        ctx_mask = np.concatenate(batch.ctx_mask, axis=1)  # (B, Nc)
        b = batch.batch_size
        m, dz = cfg.num_pseudo_tokens, cfg.attention.dz
        zt = self.enc.encode_targets(batch.xt, self.dtype)
        u = T.broadcast_to(T.reshape(self.u0.tensor, (1, m, dz)), (b, m, dz))
        key_mask = ctx_mask[:, None, :]  # broadcasts over pseudo-token queries
        for layer in self.layers:
            u = layer.ctx_to_u(u, zc, key_mask)
            zt = layer.u_to_t(zt, u)
            zc = layer.u_to_c(zc, u)
        _check_finite(zt.data, "pseudo-token processor")
        return self._head(self.decoder_mlp(zt), batch.t_mask)


class _ISTLayer(Module):
    def __init__(self, attn_cfg: AttentionConfig, rng, dtype):
        super().__init__()
        self.ctx_to_u = MHCABlock(attn_cfg, rng, dtype)
        self.u_to_t = MHCABlock(attn_cfg, rng, dtype)
        self.u_to_c = MHCABlock(attn_cfg, rng, dtype)


# ---------------------------------------------------------------------------
# gridded TNP
# ---------------------------------------------------------------------------


class GriddedTNPModel(_ModelBase):
    """Grid encoder -> grid processor -> grid decoder, per the pipeline
    decomposition. Targets only read the processed grid; they never enter the
    encoder, which preserves target-set independence.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__(cfg)
        dz = cfg.attention.dz
        dtype = self.dtype
        self.enc = _Encoders(cfg, rng, dtype)

        n_enc = cfg.n_sources if cfg.fusion == "multi" else 1
        self.grid_encoders = [self._make_encoder(rng, dtype) for _ in range(n_enc)]
        if cfg.fusion == "multi":
            self.fusion_mlp = MLP(n_enc * dz, [dz, dz], dz, rng, dtype)

        if cfg.processor == "vit":
            self.processor = ViTProcessor(
                cfg.grid, cfg.attention, cfg.processor_layers, rng, dtype, patch=cfg.patch
            )
        else:
            self.processor = SwinProcessor(
                cfg.grid, cfg.window, cfg.attention, cfg.processor_layers, rng, dtype
            )
        self.decode_attn = MHCABlock(cfg.attention, rng, dtype)
        self.decoder_mlp = MLP(dz, [dz, dz], 2 * cfg.target_dim_y, rng, dtype)
        self.clamp_tally = 0

    def _make_encoder(self, rng, dtype):
        cfg = self.cfg
        dz = cfg.attention.dz
        if cfg.encoder == "pt":
            return PTGridEncoder(cfg.grid, dz, MHCABlock(cfg.attention, rng, dtype), rng, dtype)
        if cfg.encoder == "ki":
            return KIGridEncoder(cfg.grid, dz, rng, dtype, sphere=cfg.sphere)
        return AvgGridEncoder(cfg.grid, dz, rng, dtype)

    def _assignment_arrays(self, coords: np.ndarray, mask: np.ndarray):
        """Per-task nearest-cell assignment over the real rows only, with
        member indices remapped into padded row positions."""
        cfg = self.cfg
        b = coords.shape[0]
        per_task = []
        s_max = 1
        for i in range(b):
            real = np.flatnonzero(mask[i])
            a = assign_to_grid(coords[i][real], cfg.grid, k=cfg.encode_k, max_slots=cfg.max_slots)
            self.clamp_tally += a.clamped_count
            if real.size:
                remapped = np.where(a.mask, real[np.where(a.mask, a.padded_index, 0)], SENTINEL)
            else:
                remapped = a.padded_index  # already all-sentinel
            per_task.append(remapped)
            s_max = max(s_max, a.max_slots)
        m_total = cfg.grid.total
        idx = np.full((b, m_total, s_max), SENTINEL, dtype=np.int64)
        for i, r in enumerate(per_task):
            idx[i, :, : r.shape[1]] = r
        return idx, idx != SENTINEL

    def forward(self, batch: TaskBatch) -> GaussianPrediction:
        cfg = self.cfg
        b = batch.batch_size
        dz = cfg.attention.dz
        tokens = [
            self.enc.encode_source(s, batch.xs[s], batch.ys[s], self.dtype)
            for s in range(cfg.n_sources)
        ]
        for t in tokens:
            _check_finite(t.data, "pointwise encoder")

        if cfg.fusion == "single":
            z = tokens[0] if len(tokens) == 1 else T.concat(tokens, axis=1)
            coords = np.concatenate(batch.xs, axis=1)
            mask = np.concatenate(batch.ctx_mask, axis=1)
            idx, slot_mask = self._assignment_arrays(coords, mask)
            u_flat = self.grid_encoders[0](z, coords, idx, slot_mask)
        else:
            per_source = []
            for s in range(cfg.n_sources):
                idx, slot_mask = self._assignment_arrays(batch.xs[s], batch.ctx_mask[s])
                per_source.append(
                    self.grid_encoders[s](tokens[s], batch.xs[s], idx, slot_mask)
                )
            u_flat = self.fusion_mlp(T.concat(per_source, axis=-1))
        _check_finite(u_flat.data, "grid encoder")

        u = T.reshape(u_flat, (b,) + tuple(cfg.grid.counts) + (dz,))
        ptg = PseudoTokenGrid(u=u, grid=cfg.grid, provenance=cfg.encoder)
        ptg = self.processor(ptg)
        _check_finite(ptg.u.data, "grid processor")

        z0t = self.enc.encode_targets(batch.xt, self.dtype)
        if cfg.decoder == "nn":
            nidx, nvalid = _batch_neighbours(batch.xt, ptg.grid, cfg.decoder_k)
            zt = nn_cross_attend(z0t, ptg, nidx, nvalid, self.decode_attn)
        else:
            zt = full_cross_attend(z0t, ptg, self.decode_attn)
        _check_finite(zt.data, "grid decoder")
        return self._head(self.decoder_mlp(zt), batch.t_mask)


def build_model(cfg: ModelConfig, seed: int):
    """Construct the configured variant with seed-deterministic parameters."""
    cfg.validate()
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    if cfg.variant == "cnp":
        return CNPModel(cfg, rng)
    if cfg.variant == "pt_tnp":
        return PTTNPModel(cfg, rng)
    return GriddedTNPModel(cfg, rng)
