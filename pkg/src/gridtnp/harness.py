"""Training and evaluation: AdamW with global-norm clipping, the
meta-learning loop, metrics, experiment configs, and results emission.

Determinism contract: the task stream is reseeded per iteration from
(seed, iteration), the validation set from a separate stream of the same
seed, and parameter init from the seed, so a (seed, config) pair produces
identical metrics on one machine, including across resumes.
"""

from __future__ import annotations

import csv
import json
import os
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .models import (
    ConfigError,
    GaussianPrediction,
    ModelConfig,
    TaskBatch,
    build_model,
    cnp_loss,
    loglik_points,
    model_config_from_sections,
)
from .nn import Module, load_checkpoint, read_checkpoint_header, save_checkpoint
from .taskgen import (
    GPTaskConfig,
    MultiSourceTaskConfig,
    Task,
    gp_posterior_oracle,
    read_tasks,
    task_generator,
)

__all__ = [
    "TrainConfig",
    "DataConfig",
    "MetricsRow",
    "METRICS_COLUMNS",
    "clip_by_global_norm",
    "adamw_step",
    "AdamW",
    "train",
    "TrainResult",
    "evaluate",
    "evaluate_oracle",
    "EvalResult",
    "paired_diff",
    "emit_results",
    "write_metrics_csv",
    "read_metrics_csv",
    "plot_from_csv",
    "load_experiment_config",
    "measure_fpt",
]

METRICS_COLUMNS = [
    "iteration",
    "split",
    "loglik",
    "loglik_stderr",
    "rmse",
    "rmse_stderr",
    "fpt_ms",
    "params",
]


@dataclass
class TrainConfig:
    """Optimization settings; lr/clip/batch follow the common recipe defaults."""

    iterations: int = 1000
    batch_size: int = 8
    lr: float = 5e-4
    grad_clip: float = 0.5
    seed: int = 0
    eval_every: int = 500
    val_tasks: int = 512
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01

    def __post_init__(self):
        if min(self.iterations, self.batch_size, self.eval_every, self.val_tasks) < 1:
            raise ConfigError("iterations, batch_size, eval_every, val_tasks must be >= 1")
        if self.lr < 0 or self.grad_clip <= 0:
            raise ConfigError("lr must be >= 0 and grad_clip > 0")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train config keys {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = vars(self).copy()
        d["betas"] = list(self.betas)
        return d


@dataclass
class DataConfig:
    """Where tasks come from: a generator ('gp' or 'multisource') or a file.

    ``keep_sources`` optionally restricts tasks to a subset of their context
    sources (e.g. a single-source ablation of a two-source generator).
    """

    kind: str
    gp: Optional[GPTaskConfig] = None
    multisource: Optional[MultiSourceTaskConfig] = None
    path: Optional[str] = None
    keep_sources: Optional[tuple] = None

    def __post_init__(self):
        if self.kind not in ("gp", "multisource", "file"):
            raise ConfigError(f"unknown data kind {self.kind!r}")
        if self.kind == "gp" and self.gp is None:
            raise ConfigError("gp data needs a 'gp' section")
        if self.kind == "multisource" and self.multisource is None:
            raise ConfigError("multisource data needs a 'multisource' section")
        if self.kind == "file" and not self.path:
            raise ConfigError("file data needs a 'path'")
        if self.keep_sources is not None:
            self.keep_sources = tuple(int(s) for s in self.keep_sources)

    def filter_task(self, task: Task) -> Task:
        if self.keep_sources is None:
            return task
        return Task(
            sources=[task.sources[i] for i in self.keep_sources],
            x_t=task.x_t,
            y_t=task.y_t,
            meta=task.meta,
        )

    @classmethod
    def from_dict(cls, d: dict) -> "DataConfig":
        d = dict(d)
        kind = d.pop("kind", None)
        gp = GPTaskConfig.from_dict(d.pop("gp")) if "gp" in d else None
        ms = MultiSourceTaskConfig.from_dict(d.pop("multisource")) if "multisource" in d else None
        path = d.pop("path", None)
        keep = d.pop("keep_sources", None)
        if d:
            raise ConfigError(f"unknown data config keys {sorted(d)}")
        return cls(kind=kind, gp=gp, multisource=ms, path=path,
                   keep_sources=tuple(keep) if keep is not None else None)

    def to_dict(self) -> dict:
        out: dict = {"kind": self.kind}
        if self.gp:
            out["gp"] = self.gp.to_dict()
        if self.multisource:
            out["multisource"] = self.multisource.to_dict()
        if self.path:
            out["path"] = self.path
        if self.keep_sources is not None:
            out["keep_sources"] = list(self.keep_sources)
        return out


@dataclass
class MetricsRow:
    iteration: int
    split: str
    loglik: float
    loglik_stderr: float = 0.0
    rmse: float = 0.0
    rmse_stderr: float = 0.0
    fpt_ms: float = 0.0
    params: int = 0


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


def clip_by_global_norm(grads: Sequence[np.ndarray], clip: float):
    """Scale the whole gradient vector so its global L2 norm is at most clip."""
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads)))
    if norm > clip and norm > 0:
        scale = clip / norm
        grads = [g * scale for g in grads]
    return grads, norm


def adamw_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    state: dict,
    lr: float,
    betas: tuple = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.01,
    clip: Optional[float] = None,
) -> bool:
    """One decoupled-weight-decay Adam update, in place on ``params``.

    Gradients are first clipped by global norm. A non-finite gradient skips
    the whole step (state["skipped"] counts these). Returns True if applied.
    """
    if not all(np.all(np.isfinite(g)) for g in grads):
        state["skipped"] = state.get("skipped", 0) + 1
        return False
    if clip is not None:
        grads, _ = clip_by_global_norm(grads, clip)
    if "m" not in state:
        state["m"] = [np.zeros_like(p) for p in params]
        state["v"] = [np.zeros_like(p) for p in params]
        state["step"] = 0
    state["step"] += 1
    t = state["step"]
    b1, b2 = betas
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + eps) + weight_decay * p
        p -= lr * update
    return True


class AdamW:
    """Optimizer wrapper over a module's parameters."""

    def __init__(self, module: Module, cfg: TrainConfig):
        self.params = module.parameters()
        self.cfg = cfg
        self.state: dict = {}

    def step(self) -> bool:
        arrays = [p.data for p in self.params]
        grads = [p.grad for p in self.params]
        return adamw_step(
            arrays,
            grads,
            self.state,
            lr=self.cfg.lr,
            betas=self.cfg.betas,
            eps=self.cfg.eps,
            weight_decay=self.cfg.weight_decay,
            clip=self.cfg.grad_clip,
        )

    def state_arrays(self) -> dict:
        """Moment estimates as named arrays, for checkpoint persistence."""
        if not self.state:
            return {}
        out = {}
        for i, (m, v) in enumerate(zip(self.state["m"], self.state["v"])):
            out[f"adamw.m.{i}"] = m
            out[f"adamw.v.{i}"] = v
        return out

    def state_meta(self) -> dict:
        if not self.state:
            return {}
        return {"step": self.state["step"], "skipped": self.state.get("skipped", 0)}

    def load_state(self, meta: dict, arrays: dict) -> None:
        if not meta:
            return
        dtype = self.params[0].data.dtype if self.params else np.float64
        self.state = {
            "step": int(meta["step"]),
            "skipped": int(meta.get("skipped", 0)),
            "m": [arrays[f"adamw.m.{i}"].astype(dtype) for i in range(len(self.params))],
            "v": [arrays[f"adamw.v.{i}"].astype(dtype) for i in range(len(self.params))],
        }


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def _iteration_seed(seed: int, iteration: int, slot: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=seed, spawn_key=(0, iteration, slot))


def _make_sampler(data: DataConfig) -> Callable[[int, int], Task]:
    if data.kind == "file":
        tasks = [data.filter_task(t) for t in read_tasks(data.path)]

        def from_file(iteration: int, slot: int, _n=len(tasks)) -> Task:
            return tasks[(iteration * 1000003 + slot) % _n]

        return from_file
    gen = task_generator(data.kind, data.gp if data.kind == "gp" else data.multisource)

    def from_generator(iteration: int, slot: int) -> Task:
        # derive a plain int seed for the generator from the seed tree
        seed = int(_iteration_seed(train_seed_holder[0], iteration, slot).generate_state(1)[0])
        return data.filter_task(gen(seed))

    return from_generator


# module-level holder so the closure above sees the active training seed
train_seed_holder = [0]


def validation_tasks(data: DataConfig, seed: int, count: int) -> list:
    """A fixed held-out task set drawn from a separate seed stream."""
    if data.kind == "file":
        return [data.filter_task(t) for t in read_tasks(data.path)[:count]]
    gen = task_generator(data.kind, data.gp if data.kind == "gp" else data.multisource)
    seeds = [
        int(np.random.SeedSequence(entropy=seed, spawn_key=(1, i)).generate_state(1)[0])
        for i in range(count)
    ]
    return [data.filter_task(gen(s)) for s in seeds]


@dataclass
class TrainResult:
    checkpoint: str
    best_val_loglik: float
    rows: list
    model: Module


def train(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    data_cfg: DataConfig,
    out_dir,
    resume: Optional[str] = None,
    log_every: Optional[int] = None,
) -> TrainResult:
    """Meta-learning loop: sample a task batch, forward, loss, backward, step.

    Validates periodically on a fixed held-out set and keeps the
    best-validation checkpoint (``best.ckpt``) plus the final state
    (``last.ckpt``). Metrics go to ``metrics.csv`` in ``out_dir``.
    """
    os.makedirs(out_dir, exist_ok=True)
    model = build_model(model_cfg, seed=train_cfg.seed)
    opt = AdamW(model, train_cfg)
    start_iter = 0
    if resume:
        extra, arrays = load_checkpoint(resume, model)
        opt.load_state(extra.get("optimizer", {}), arrays)
        start_iter = int(extra.get("iteration", 0))

    train_seed_holder[0] = train_cfg.seed
    sampler = _make_sampler(data_cfg)
    val_set = validation_tasks(data_cfg, train_cfg.seed, train_cfg.val_tasks)
    val_batches = _batched(val_set, train_cfg.batch_size)

    sections = model_cfg.to_sections()
    best_path = os.path.join(out_dir, "best.ckpt")
    last_path = os.path.join(out_dir, "last.ckpt")
    rows: list = []
    best_val = -np.inf
    log_every = log_every or train_cfg.eval_every
    running_loss, running_n = 0.0, 0

    for it in range(start_iter, train_cfg.iterations):
        tasks = [sampler(it, j) for j in range(train_cfg.batch_size)]
        batch = TaskBatch.from_tasks(tasks)
        pred = model(batch)
        loss = cnp_loss(pred, batch.yt)
        loss_val = float(loss.data)
        if not np.isfinite(loss_val):
            raise T.NumericError(f"non-finite loss at iteration {it}")
        model.zero_grad()
        T.backward(loss)
        opt.step()
        running_loss += loss_val
        running_n += 1

        if (it + 1) % log_every == 0 or it + 1 == train_cfg.iterations:
            rows.append(
                MetricsRow(
                    iteration=it + 1,
                    split="train",
                    loglik=-running_loss / max(running_n, 1),
                    params=model.num_params(),
                )
            )
            running_loss, running_n = 0.0, 0
        if (it + 1) % train_cfg.eval_every == 0 or it + 1 == train_cfg.iterations:
            val = _eval_batches(model, val_batches)
            rows.append(
                MetricsRow(
                    iteration=it + 1,
                    split="val",
                    loglik=val.loglik,
                    loglik_stderr=val.loglik_stderr,
                    rmse=val.rmse,
                    rmse_stderr=val.rmse_stderr,
                    params=model.num_params(),
                )
            )
            if val.loglik > best_val:
                best_val = val.loglik
                save_checkpoint(
                    best_path,
                    model,
                    extra={"sections": sections, "iteration": it + 1},
                )

    save_checkpoint(
        last_path,
        model,
        extra={
            "sections": sections,
            "iteration": train_cfg.iterations,
            "optimizer": opt.state_meta(),
        },
        arrays=opt.state_arrays(),
    )
    if not os.path.exists(best_path):
        save_checkpoint(best_path, model, extra={"sections": sections, "iteration": train_cfg.iterations})
    write_metrics_csv(os.path.join(out_dir, "metrics.csv"), rows)
    return TrainResult(checkpoint=best_path, best_val_loglik=best_val, rows=rows, model=model)


def load_model_from_checkpoint(path) -> Module:
    """Rebuild the model recorded in a checkpoint and load its weights."""
    extra = read_checkpoint_header(path).get("extra", {})
    sections = extra.get("sections")
    if not sections:
        raise ConfigError(f"checkpoint {path} lacks embedded model sections")
    cfg = model_config_from_sections(sections["model"], sections.get("grid"))
    model = build_model(cfg, seed=0)
    load_checkpoint(path, model)
    return model


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvalResult:
    loglik: float
    loglik_stderr: float
    rmse: float
    rmse_stderr: float
    fpt_ms: float
    params: int
    per_task_loglik: np.ndarray
    per_task_rmse: np.ndarray
    normalized_errors: np.ndarray

    def row(self, iteration: int = 0, split: str = "test") -> MetricsRow:
        return MetricsRow(
            iteration=iteration,
            split=split,
            loglik=self.loglik,
            loglik_stderr=self.loglik_stderr,
            rmse=self.rmse,
            rmse_stderr=self.rmse_stderr,
            fpt_ms=self.fpt_ms,
            params=self.params,
        )


def _batched(tasks: Sequence[Task], batch_size: int) -> list:
    return [
        TaskBatch.from_tasks(tasks[i : i + batch_size])
        for i in range(0, len(tasks), batch_size)
    ]


def _stderr(x: np.ndarray) -> float:
    if x.size <= 1:
        return 0.0
    return float(x.std(ddof=1) / np.sqrt(x.size))


def _eval_batches(model: Module, batches: Sequence[TaskBatch]) -> EvalResult:
    lls, rmses, nerrs = [], [], []
    for batch in batches:
        pred = model(batch)
        ll = loglik_points(pred, batch.yt)
        err = pred.mean.data - batch.yt
        std = np.sqrt(pred.var.data)
        for i in range(batch.batch_size):
            m = batch.t_mask[i]
            lls.append(ll[i][m].mean())
            rmses.append(np.sqrt((err[i][m] ** 2).mean()))
            nerrs.append((err[i][m] / std[i][m]).reshape(-1))
    lls = np.asarray(lls)
    rmses = np.asarray(rmses)
    return EvalResult(
        loglik=float(lls.mean()),
        loglik_stderr=_stderr(lls),
        rmse=float(rmses.mean()),
        rmse_stderr=_stderr(rmses),
        fpt_ms=0.0,
        params=model.num_params(),
        per_task_loglik=lls,
        per_task_rmse=rmses,
        normalized_errors=np.concatenate(nerrs) if nerrs else np.zeros(0),
    )


def evaluate(
    model: Module,
    tasks: Sequence[Task],
    batch_size: int = 8,
    fpt_batches: int = 20,
) -> EvalResult:
    """Test metrics over a task set, plus forward-pass wall time.

    FPT is the median wall-clock time of forward passes on pre-built batches
    (task construction and I/O excluded), at the given batch size.
    """
    batches = _batched(tasks, batch_size)
    result = _eval_batches(model, batches)
    if fpt_batches > 0:
        timing = [b for b in batches if b.batch_size == batch_size] or batches
        times = []
        for i in range(fpt_batches):
            b = timing[i % len(timing)]
            t0 = time.perf_counter()
            model(b)
            times.append((time.perf_counter() - t0) * 1000.0)
        result.fpt_ms = float(np.median(times))
    return result


def evaluate_oracle(tasks: Sequence[Task]) -> EvalResult:
    """The exact GP posterior evaluated through the same metric plumbing."""
    lls, rmses, nerrs = [], [], []
    for task in tasks:
        o = gp_posterior_oracle(task)
        lls.append(o.logliks.mean())
        err = o.mean - task.y_t[:, 0]
        rmses.append(np.sqrt((err**2).mean()))
        nerrs.append(err / np.sqrt(o.var))
    lls = np.asarray(lls)
    rmses = np.asarray(rmses)
    return EvalResult(
        loglik=float(lls.mean()),
        loglik_stderr=_stderr(lls),
        rmse=float(rmses.mean()),
        rmse_stderr=_stderr(rmses),
        fpt_ms=0.0,
        params=0,
        per_task_loglik=lls,
        per_task_rmse=rmses,
        normalized_errors=np.concatenate(nerrs) if nerrs else np.zeros(0),
    )


def paired_diff(a: np.ndarray, b: np.ndarray):
    """Mean and standard error of per-task differences a - b."""
    d = np.asarray(a) - np.asarray(b)
    return float(d.mean()), _stderr(d)


def measure_fpt(model: Module, tasks: Sequence[Task], batch_size: int = 8, repeats: int = 20) -> float:
    return evaluate(model, tasks[:batch_size], batch_size=batch_size, fpt_batches=repeats).fpt_ms


# ---------------------------------------------------------------------------
# results emission
# ---------------------------------------------------------------------------


def write_metrics_csv(path, rows: Sequence[MetricsRow]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(METRICS_COLUMNS)
        for r in rows:
            writer.writerow(
                [
                    r.iteration,
                    r.split,
                    repr(float(r.loglik)),
                    repr(float(r.loglik_stderr)),
                    repr(float(r.rmse)),
                    repr(float(r.rmse_stderr)),
                    repr(float(r.fpt_ms)),
                    r.params,
                ]
            )


def read_metrics_csv(path) -> list:
    rows = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != METRICS_COLUMNS:
            raise ConfigError(f"unexpected metrics columns {reader.fieldnames}")
        for rec in reader:
            rows.append(
                MetricsRow(
                    iteration=int(rec["iteration"]),
                    split=rec["split"],
                    loglik=float(rec["loglik"]),
                    loglik_stderr=float(rec["loglik_stderr"]),
                    rmse=float(rec["rmse"]),
                    rmse_stderr=float(rec["rmse_stderr"]),
                    fpt_ms=float(rec["fpt_ms"]),
                    params=int(rec["params"]),
                )
            )
    return rows


def write_per_task_csv(path, result: EvalResult) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["task_id", "loglik", "rmse"])
        for i, (ll, rm) in enumerate(zip(result.per_task_loglik, result.per_task_rmse)):
            writer.writerow([i, repr(float(ll)), repr(float(rm))])


def _deterministic_savefig(fig, path) -> None:
    import matplotlib

    matplotlib.rcParams["svg.hashsalt"] = "gridtnp"
    fig.savefig(path, format="svg", metadata={"Date": None})


def plot_from_csv(metrics_csv, out_dir) -> list:
    """Render the learning-curve and log-lik vs FPT scatter from a metrics CSV.

    Output SVGs are byte-deterministic functions of the CSV contents, so
    plots regenerate identically from the CSV alone.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = read_metrics_csv(metrics_csv)
    os.makedirs(out_dir, exist_ok=True)
    written = []

    curves: dict = {}
    for r in rows:
        if r.split in ("train", "val"):
            curves.setdefault(r.split, []).append((r.iteration, r.loglik))
    if curves:
        fig, ax = plt.subplots(figsize=(6, 4))
        for split in sorted(curves):
            pts = sorted(curves[split])
            ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=split)
        ax.set_xlabel("iteration")
        ax.set_ylabel("mean log-likelihood")
        ax.legend()
        fig.tight_layout()
        path = os.path.join(out_dir, "learning_curve.svg")
        _deterministic_savefig(fig, path)
        plt.close(fig)
        written.append(path)

    tests = [r for r in rows if r.split not in ("train", "val")]
    if tests:
        fig, ax = plt.subplots(figsize=(6, 4))
        for r in tests:
            ax.scatter([r.fpt_ms], [r.loglik])
            ax.annotate(r.split, (r.fpt_ms, r.loglik), textcoords="offset points", xytext=(4, 4))
        ax.set_xlabel("forward-pass time (ms, batch 8)")
        ax.set_ylabel("test log-likelihood")
        fig.tight_layout()
        path = os.path.join(out_dir, "loglik_vs_fpt.svg")
        _deterministic_savefig(fig, path)
        plt.close(fig)
        written.append(path)
    return written


def emit_results(
    rows: Sequence[MetricsRow], out_dir, per_task: Optional[EvalResult] = None
) -> dict:
    """Write metrics.csv (+ per-task CSV) and regenerate the static plots."""
    os.makedirs(out_dir, exist_ok=True)
    metrics_path = os.path.join(out_dir, "metrics.csv")
    write_metrics_csv(metrics_path, rows)
    out = {"metrics": metrics_path, "plots": plot_from_csv(metrics_path, out_dir)}
    if per_task is not None:
        per_task_path = os.path.join(out_dir, "per_task.csv")
        write_per_task_csv(per_task_path, per_task)
        out["per_task"] = per_task_path
    return out


# ---------------------------------------------------------------------------
# experiment config files
# ---------------------------------------------------------------------------


def load_experiment_config(path):
    """Parse a {model, grid, train, data} JSON config; unknown keys rejected."""
    with open(path) as f:
        raw = json.load(f)
    unknown = set(raw) - {"model", "grid", "train", "data"}
    if unknown:
        raise ConfigError(f"unknown config sections {sorted(unknown)}")
    if "model" not in raw:
        raise ConfigError("config needs a 'model' section")
    model_cfg = model_config_from_sections(raw["model"], raw.get("grid"))
    train_cfg = TrainConfig.from_dict(raw.get("train", {}))
    data_cfg = DataConfig.from_dict(raw["data"]) if "data" in raw else None
    return model_cfg, train_cfg, data_cfg
