"""Shared desk-scale training runs for the acceptance suite.

Each named run trains one model variant on the synthetic task distribution
and evaluates it (plus the exact GP oracle where applicable) on a fixed
held-out test set. Results are cached under ``tests/_artifacts`` keyed by a
hash of the full configuration, so re-running the suite reuses finished
training. Run standalone to pre-train: ``python3 tests/acceptance_runs.py all``.
"""

import hashlib
import json
import os
import sys
from dataclasses import dataclass

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

import numpy as np

from gridtnp.attnproc import AttentionConfig, WindowSpec
from gridtnp.geomembed import FourierEmbedConfig
from gridtnp.gridenc import GridSpec
from gridtnp.harness import DataConfig, TrainConfig, evaluate, evaluate_oracle, train
from gridtnp.models import EmbeddingConfig, ModelConfig
from gridtnp.taskgen import GPTaskConfig, MultiSourceTaskConfig, task_generator

ARTIFACTS = os.path.join(os.path.dirname(__file__), "_artifacts")
TEST_TASK_ENTROPY = 20260810
N_TEST_TASKS = 512

GP_CFG = GPTaskConfig(
    dim=1, extent=(-6.0, 6.0), lengthscale=0.5, noise=0.1, n_context=(64, 256), n_target=64
)
MS_CFG = MultiSourceTaskConfig(
    dim=1, extent=(-6.0, 6.0), lengthscale=0.5, noise=0.1, correlation=0.8,
    grid_counts_a=(16,), n_b_range=(16, 64), n_target=64,
)


def desk_attention() -> AttentionConfig:
    return AttentionConfig(dz=64, heads=4, d_v=16, d_qk=32, mlp_hidden=64)


def desk_embedding() -> EmbeddingConfig:
    return EmbeddingConfig(kind="fourier", fourier=FourierEmbedConfig(32, 0.1, 24.0))


def swin_model(cells: int, encoder: str = "pt", decoder: str = "nn", n_sources: int = 1,
               fusion: str = "single") -> ModelConfig:
    return ModelConfig(
        variant="gridded_tnp",
        dim_x=1,
        dims_y=tuple(1 for _ in range(n_sources)),
        embedding=desk_embedding(),
        attention=desk_attention(),
        grid=GridSpec((cells,), ((-6.0, 6.0),), (False,)),
        encoder=encoder,
        fusion=fusion,
        processor="swin",
        processor_layers=2,
        window=WindowSpec((4,), (2,), (False,)),
        decoder=decoder,
        decoder_k=3,
        precision="float32",
    )


def train_cfg(iterations: int, seed: int) -> TrainConfig:
    return TrainConfig(
        iterations=iterations, batch_size=8, lr=5e-4, grad_clip=0.5,
        seed=seed, eval_every=2000, val_tasks=512,
    )


@dataclass
class RunSpec:
    name: str
    model: ModelConfig
    train: TrainConfig
    data: DataConfig
    with_oracle: bool


def _gp_data() -> DataConfig:
    return DataConfig(kind="gp", gp=GP_CFG)


def _ms_data(keep=None) -> DataConfig:
    return DataConfig(kind="multisource", multisource=MS_CFG, keep_sources=keep)


def build_runs() -> dict:
    runs = {}

    def add(name, model, tc, data, with_oracle):
        runs[name] = RunSpec(name, model, tc, data, with_oracle)

    # criterion 4 (and the nn side of criterion 6)
    add("c4_swin32", swin_model(32), train_cfg(20000, 0), _gp_data(), True)
    add("c4_cnp", ModelConfig(variant="cnp", dim_x=1, embedding=desk_embedding(),
                              attention=desk_attention(), precision="float32"),
        train_cfg(20000, 0), _gp_data(), True)
    add("c4_pttnp", ModelConfig(variant="pt_tnp", dim_x=1, embedding=desk_embedding(),
                                attention=desk_attention(), num_pseudo_tokens=16,
                                pt_layers=2, precision="float32"),
        train_cfg(20000, 0), _gp_data(), True)

    # criterion 5: coarse-grid encoder comparison across three seeds
    for seed in (0, 1, 2):
        add(f"c5_pt_s{seed}", swin_model(8, encoder="pt"), train_cfg(20000, seed), _gp_data(), False)
        add(f"c5_ki_s{seed}", swin_model(8, encoder="ki"), train_cfg(20000, seed), _gp_data(), False)

    # criterion 6: full-attention decoder counterpart of c4_swin32
    add("c6_full", swin_model(32, decoder="full"), train_cfg(20000, 0), _gp_data(), False)

    # criterion 7: two-source tasks
    for seed in (0, 1, 2):
        add(f"c7_multi_s{seed}", swin_model(32, n_sources=2, fusion="multi"),
            train_cfg(6000, seed), _ms_data(), False)
        add(f"c7_single_s{seed}", swin_model(32, n_sources=2, fusion="single"),
            train_cfg(6000, seed), _ms_data(), False)
    add("c7_bonly", swin_model(32, n_sources=1), train_cfg(6000, 0), _ms_data(keep=(1,)), False)
    return runs


RUNS = build_runs()


def test_tasks(data: DataConfig, count: int = N_TEST_TASKS) -> list:
    """The fixed held-out test set for one task distribution."""
    gen = task_generator(data.kind, data.gp if data.kind == "gp" else data.multisource)
    seeds = [
        int(np.random.SeedSequence(entropy=TEST_TASK_ENTROPY, spawn_key=(3, i)).generate_state(1)[0])
        for i in range(count)
    ]
    return [data.filter_task(gen(s)) for s in seeds]


def _config_hash(spec: RunSpec) -> str:
    payload = {
        "sections": spec.model.to_sections(),
        "train": spec.train.to_dict(),
        "data": spec.data.to_dict(),
        "test": [TEST_TASK_ENTROPY, N_TEST_TASKS],
    }
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def run_cached(name: str) -> dict:
    """Train (or load) one named run; returns the stored result record."""
    import time

    spec = RUNS[name]
    out_dir = os.path.join(ARTIFACTS, name)
    result_path = os.path.join(out_dir, "result.json")
    want_hash = _config_hash(spec)
    if os.path.exists(result_path):
        with open(result_path) as f:
            result = json.load(f)
        if result.get("config_hash") == want_hash:
            return result
    os.makedirs(out_dir, exist_ok=True)
    t0 = time.time()
    res = train(spec.model, spec.train, spec.data, out_dir)
    minutes = (time.time() - t0) / 60.0

    tasks = test_tasks(spec.data)
    ev = evaluate(res.model, tasks, batch_size=spec.train.batch_size, fpt_batches=20)
    result = {
        "name": name,
        "config_hash": want_hash,
        "minutes": minutes,
        "params": ev.params,
        "fpt_ms": ev.fpt_ms,
        "loglik": ev.loglik,
        "loglik_stderr": ev.loglik_stderr,
        "rmse": ev.rmse,
        "per_task_loglik": ev.per_task_loglik.tolist(),
        "per_task_rmse": ev.per_task_rmse.tolist(),
        "best_val": res.best_val_loglik,
    }
    if spec.with_oracle:
        orc = evaluate_oracle(tasks)
        result["oracle_loglik"] = orc.loglik
        result["oracle_per_task"] = orc.per_task_loglik.tolist()
    with open(result_path, "w") as f:
        json.dump(result, f)
    return result


def main(argv):
    names = argv[1:] or ["all"]
    workers = int(os.environ.get("ACCEPT_WORKERS", "2"))
    if names == ["all"]:
        names = list(RUNS)
    os.environ.setdefault("OMP_NUM_THREADS", "1")
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=workers) as pool:
        for name, result in zip(names, pool.map(run_cached, names)):
            print(f"{name}: loglik {result['loglik']:.4f} ({result['minutes']:.1f} min)")


if __name__ == "__main__":
    main(sys.argv)
