"""Synthetic task generation: exact squared-exponential GP samplers, the
exact GP posterior oracle used as the Bayes-optimal reference, a two-source
correlated-GP task for multi-modal experiments, and task (de)serialization.

Sampling is exact (Cholesky with a jitter ladder) rather than approximate,
which keeps a trustworthy oracle available at desk scale; the total point
count per task is capped accordingly.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np

from .gridenc import GridSpec

__all__ = [
    "Task",
    "GPTaskConfig",
    "MultiSourceTaskConfig",
    "TaskFormatError",
    "se_kernel",
    "cholesky_with_jitter",
    "sample_gp_task",
    "OraclePrediction",
    "gp_posterior_oracle",
    "sample_multisource_task",
    "write_tasks",
    "read_tasks",
    "iter_tasks",
    "tasks_to_csv",
    "task_generator",
]

EXACT_SAMPLING_CAP = 4096
_MAGIC = b"GTNPTASK"
TASK_SCHEMA_VERSION = 1


class TaskFormatError(RuntimeError):
    """Task file is malformed, truncated, or of an unsupported version."""


@dataclass
class Task:
    """One meta-learning task: per-source context sets plus a target set.

    ``sources[s]`` is an ``(X_c, Y_c)`` pair of arrays (N_s, D_x) / (N_s, D_y);
    ``meta`` records the generator id, seed, and GP hyperparameters.
    """

    sources: list
    x_t: np.ndarray
    y_t: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def n_context(self) -> int:
        return int(sum(x.shape[0] for x, _ in self.sources))

    @property
    def n_target(self) -> int:
        return int(self.x_t.shape[0])


@dataclass(frozen=True)
class GPTaskConfig:
    """Squared-exponential GP regression tasks on a box."""

    dim: int = 1
    extent: tuple = (-6.0, 6.0)
    lengthscale: float = 0.5
    noise: float = 0.1
    n_context: tuple = (64, 256)
    n_target: int = 64
    kernel_variance: float = 1.0
    cap: int = EXACT_SAMPLING_CAP

    def __post_init__(self):
        if self.lengthscale <= 0:
            raise ValueError("lengthscale must be positive")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")
        if self.n_context[0] > self.n_context[1] or self.n_context[0] < 0:
            raise ValueError("n_context range invalid")
        if self.n_target < 1:
            raise ValueError("n_target must be >= 1")

    def to_dict(self) -> dict:
        d = vars(self).copy()
        d["extent"] = list(self.extent)
        d["n_context"] = list(self.n_context)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GPTaskConfig":
        d = dict(d)
        if "extent" in d:
            d["extent"] = tuple(d["extent"])
        if "n_context" in d:
            d["n_context"] = tuple(d["n_context"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown GP task config keys {sorted(unknown)}")
        return cls(**d)


def se_kernel(xa: np.ndarray, xb: np.ndarray, lengthscale: float, variance: float = 1.0) -> np.ndarray:
    """Squared-exponential kernel matrix: variance * exp(-|xa - xb|^2 / (2 l^2))."""
    xa = np.atleast_2d(xa)
    xb = np.atleast_2d(xb)
    sq = ((xa[:, None, :] - xb[None, :, :]) ** 2).sum(-1)
    return variance * np.exp(-0.5 * sq / lengthscale**2)


def cholesky_with_jitter(k: np.ndarray, base: float = 1e-8, limit: float = 1e-4) -> np.ndarray:
    """Lower Cholesky factor, escalating diagonal jitter by 10x up to a limit."""
    if k.shape[0] == 0:
        return np.zeros((0, 0))
    try:
        return np.linalg.cholesky(k)
    except np.linalg.LinAlgError:
        pass
    jitter = base
    scale = float(np.mean(np.diag(k))) or 1.0
    while jitter <= limit:
        try:
            return np.linalg.cholesky(k + jitter * scale * np.eye(k.shape[0]))
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise np.linalg.LinAlgError(
        f"Cholesky failed with jitter up to {limit} on a {k.shape[0]}x{k.shape[0]} matrix"
    )


def _task_rng(seed: int, stream: tuple = ()) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=stream))


def sample_gp_task(cfg: GPTaskConfig, seed: int) -> Task:
    """Draw one GP regression task exactly; same seed gives a bit-identical task.

    Inputs are uniform on the extent; the joint function values come from a
    Cholesky factor of the SE kernel; observations (context and target) add
    independent N(0, noise^2).
    """
    rng = _task_rng(seed)
    n_c = int(rng.integers(cfg.n_context[0], cfg.n_context[1] + 1))
    total = n_c + cfg.n_target
    if total > cfg.cap:
        raise ValueError(f"task size {total} exceeds exact-sampling cap {cfg.cap}")
    lo, hi = cfg.extent
    x = rng.uniform(lo, hi, size=(total, cfg.dim))
    k = se_kernel(x, x, cfg.lengthscale, cfg.kernel_variance)
    chol = cholesky_with_jitter(k)
    f = chol @ rng.standard_normal(total)
    y = f + cfg.noise * rng.standard_normal(total)
    meta = {
        "generator": "gp",
        "seed": int(seed),
        "lengthscale": cfg.lengthscale,
        "noise": cfg.noise,
        "kernel_variance": cfg.kernel_variance,
    }
    return Task(
        sources=[(x[:n_c], y[:n_c, None])],
        x_t=x[n_c:],
        y_t=y[n_c:, None],
        meta=meta,
    )


@dataclass
class OraclePrediction:
    """Exact GP predictive (noise included) at the targets."""

    mean: np.ndarray
    var: np.ndarray
    logliks: np.ndarray

    @property
    def mean_loglik(self) -> float:
        return float(self.logliks.mean())


def gp_posterior_oracle(task: Task) -> OraclePrediction:
    """Exact SE-GP posterior at the task's targets, the Bayes-optimal
    reference for the training objective.

    Requires a single-source GP task whose meta carries the generating
    hyperparameters. Predictive variance includes the observation noise.
    """
    if len(task.sources) != 1:
        raise ValueError("gp_posterior_oracle expects a single-source GP task")
    for key in ("lengthscale", "noise"):
        if key not in task.meta:
            raise ValueError(f"task meta lacks {key!r}; not a GP task?")
    ell = task.meta["lengthscale"]
    noise = task.meta["noise"]
    variance = task.meta.get("kernel_variance", 1.0)
    xc, yc = task.sources[0]
    xt, yt = task.x_t, task.y_t
    n_c = xc.shape[0]
    if n_c > EXACT_SAMPLING_CAP:
        raise ValueError(f"context size {n_c} exceeds exact cap {EXACT_SAMPLING_CAP}")

    if n_c == 0:
        mean = np.zeros(xt.shape[0])
        var = np.full(xt.shape[0], variance + noise**2)
    else:
        k_cc = se_kernel(xc, xc, ell, variance) + noise**2 * np.eye(n_c)
        chol = cholesky_with_jitter(k_cc)
        k_tc = se_kernel(xt, xc, ell, variance)
        alpha = np.linalg.solve(chol.T, np.linalg.solve(chol, yc[:, 0]))
        mean = k_tc @ alpha
        w = np.linalg.solve(chol, k_tc.T)
        var = variance - (w * w).sum(axis=0) + noise**2
    logliks = -0.5 * (np.log(2 * np.pi * var) + (yt[:, 0] - mean) ** 2 / var)
    return OraclePrediction(mean=mean, var=var, logliks=logliks)


# ---------------------------------------------------------------------------
# two-source tasks
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MultiSourceTaskConfig:
    """Two correlated outputs: source A observed on a coarse regular grid,
    source B at scattered locations; targets are held-out B points.

    Both outputs share a latent SE-GP component with weight sqrt(correlation),
    so same-location values of A and B have the configured correlation.
    """

    dim: int = 1
    extent: tuple = (-6.0, 6.0)
    lengthscale: float = 0.5
    noise: float = 0.1
    correlation: float = 0.8
    grid_counts_a: tuple = (16,)
    n_b_range: tuple = (16, 64)
    n_target: int = 64
    kernel_variance: float = 1.0
    cap: int = EXACT_SAMPLING_CAP

    def __post_init__(self):
        if not (0.0 <= self.correlation <= 1.0):
            raise ValueError("correlation must lie in [0, 1]")
        if len(self.grid_counts_a) != self.dim:
            raise ValueError("grid_counts_a must match the input dim")

    def to_dict(self) -> dict:
        d = vars(self).copy()
        d["extent"] = list(self.extent)
        d["grid_counts_a"] = list(self.grid_counts_a)
        d["n_b_range"] = list(self.n_b_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MultiSourceTaskConfig":
        d = dict(d)
        for key in ("extent", "grid_counts_a", "n_b_range"):
            if key in d:
                d[key] = tuple(d[key])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown multisource config keys {sorted(unknown)}")
        return cls(**d)


def sample_multisource_task(cfg: MultiSourceTaskConfig, seed: int) -> Task:
    """Draw one two-source task from a shared-latent correlated GP pair."""
    rng = _task_rng(seed)
    spec = GridSpec(
        counts=cfg.grid_counts_a,
        extents=tuple((cfg.extent[0], cfg.extent[1]) for _ in range(cfg.dim)),
        wrap=tuple(False for _ in range(cfg.dim)),
    )
    xa = spec.node_coords()
    n_a = xa.shape[0]
    n_b = int(rng.integers(cfg.n_b_range[0], cfg.n_b_range[1] + 1))
    n_bt = n_b + cfg.n_target
    total = n_a + n_bt
    if total > cfg.cap:
        raise ValueError(f"task size {total} exceeds exact-sampling cap {cfg.cap}")
    xb = rng.uniform(cfg.extent[0], cfg.extent[1], size=(n_bt, cfg.dim))

    x_all = np.concatenate([xa, xb], axis=0)
    k_all = se_kernel(x_all, x_all, cfg.lengthscale, cfg.kernel_variance)
    g = cholesky_with_jitter(k_all) @ rng.standard_normal(total)
    k_a = se_kernel(xa, xa, cfg.lengthscale, cfg.kernel_variance)
    e_a = cholesky_with_jitter(k_a) @ rng.standard_normal(n_a)
    k_b = se_kernel(xb, xb, cfg.lengthscale, cfg.kernel_variance)
    e_b = cholesky_with_jitter(k_b) @ rng.standard_normal(n_bt)

    w_shared = np.sqrt(cfg.correlation)
    w_own = np.sqrt(1.0 - cfg.correlation)
    f_a = w_shared * g[:n_a] + w_own * e_a
    f_b = w_shared * g[n_a:] + w_own * e_b
    y_a = f_a + cfg.noise * rng.standard_normal(n_a)
    y_b = f_b + cfg.noise * rng.standard_normal(n_bt)

    meta = {
        "generator": "multisource",
        "seed": int(seed),
        "lengthscale": cfg.lengthscale,
        "noise": cfg.noise,
        "correlation": cfg.correlation,
        "kernel_variance": cfg.kernel_variance,
    }
    return Task(
        sources=[(xa, y_a[:, None]), (xb[:n_b], y_b[:n_b, None])],
        x_t=xb[n_b:],
        y_t=y_b[n_b:, None],
        meta=meta,
    )


def task_generator(kind: str, cfg):
    """A ``seed -> Task`` callable for the named generator."""
    if kind == "gp":
        return lambda seed: sample_gp_task(cfg, seed)
    if kind == "multisource":
        return lambda seed: sample_multisource_task(cfg, seed)
    raise ValueError(f"unknown task generator {kind!r}")


# ---------------------------------------------------------------------------
# task files
# ---------------------------------------------------------------------------


def _pack_array(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f8").tobytes()


def _task_record(task: Task) -> bytes:
    shapes = {
        "sources": [[list(x.shape), list(y.shape)] for x, y in task.sources],
        "x_t": list(task.x_t.shape),
        "y_t": list(task.y_t.shape),
    }
    head = json.dumps({"meta": task.meta, "shapes": shapes}).encode()
    body = b"".join(
        [_pack_array(a) for x, y in task.sources for a in (x, y)]
        + [_pack_array(task.x_t), _pack_array(task.y_t)]
    )
    return struct.pack("<I", len(head)) + head + body


def _read_exact(f, n: int) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise TaskFormatError(f"truncated task file: wanted {n} bytes, got {len(data)}")
    return data


def _unpack_task(record: bytes) -> Task:
    buf = io.BytesIO(record)
    (head_len,) = struct.unpack("<I", _read_exact(buf, 4))
    head = json.loads(_read_exact(buf, head_len))
    shapes = head["shapes"]

    def take(shape):
        shape = tuple(shape)
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(_read_exact(buf, 8 * n), dtype="<f8").reshape(shape)
        return arr.astype(np.float64)

    sources = [(take(sx), take(sy)) for sx, sy in shapes["sources"]]
    return Task(sources=sources, x_t=take(shapes["x_t"]), y_t=take(shapes["y_t"]), meta=head["meta"])


def write_tasks(path, tasks: Sequence[Task], generator_config: Optional[dict] = None) -> None:
    """Write length-prefixed binary task records (little-endian, JSON header)."""
    header = json.dumps(
        {
            "schema_version": TASK_SCHEMA_VERSION,
            "count": len(tasks),
            "generator_config": generator_config or {},
        }
    ).encode()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for task in tasks:
            record = _task_record(task)
            f.write(struct.pack("<I", len(record)))
            f.write(record)


def iter_tasks(path) -> Iterator[Task]:
    """Stream tasks from a file one record at a time."""
    with open(path, "rb") as f:
        magic = f.read(len(_MAGIC))
        if magic != _MAGIC:
            raise TaskFormatError(f"bad magic {magic!r}; not a task file")
        (header_len,) = struct.unpack("<I", _read_exact(f, 4))
        header = json.loads(_read_exact(f, header_len))
        version = header.get("schema_version")
        if version != TASK_SCHEMA_VERSION:
            raise TaskFormatError(
                f"task schema version {version!r} unsupported (expected {TASK_SCHEMA_VERSION})"
            )
        for _ in range(header["count"]):
            (rec_len,) = struct.unpack("<I", _read_exact(f, 4))
            yield _unpack_task(_read_exact(f, rec_len))


def read_tasks(path) -> list:
    return list(iter_tasks(path))


def tasks_to_csv(path, tasks: Sequence[Task]) -> None:
    """Flat CSV export: one row per point with role and source labels."""
    if not tasks:
        dim_x = dim_y = 0
    else:
        dim_x = tasks[0].x_t.shape[1]
        dim_y = tasks[0].y_t.shape[1]
    cols = (
        ["task_id", "role", "source_id"]
        + [f"x{d}" for d in range(dim_x)]
        + [f"y{d}" for d in range(dim_y)]
    )
    with open(path, "w") as f:
        f.write(",".join(cols) + "\n")

        def emit(task_id, role, source_id, xs, ys):
            for x, y in zip(xs, ys):
                vals = [str(task_id), role, str(source_id)]
                vals += [repr(float(v)) for v in x]
                vals += [repr(float(v)) for v in y]
                f.write(",".join(vals) + "\n")

        for i, task in enumerate(tasks):
            for s, (xc, yc) in enumerate(task.sources):
                emit(i, "context", s, xc, yc)
            emit(i, "target", len(task.sources) - 1, task.x_t, task.y_t)
