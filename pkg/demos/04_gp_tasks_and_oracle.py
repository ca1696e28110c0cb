"""Synthetic GP meta-learning tasks and the exact posterior oracle that
bounds every model's achievable log-likelihood."""

import numpy as np

from gridtnp.taskgen import (
    GPTaskConfig,
    MultiSourceTaskConfig,
    gp_posterior_oracle,
    sample_gp_task,
    sample_multisource_task,
    tasks_to_csv,
    write_tasks,
    read_tasks,
)

cfg = GPTaskConfig(dim=1, extent=(-6.0, 6.0), lengthscale=0.5, noise=0.1,
                   n_context=(64, 256), n_target=64)
task = sample_gp_task(cfg, seed=0)
print(f"task: {task.n_context} context, {task.n_target} targets, meta {task.meta}")

oracle = gp_posterior_oracle(task)
print(f"oracle mean log-lik {oracle.mean_loglik:.4f}, "
      f"predictive std range [{np.sqrt(oracle.var).min():.3f}, {np.sqrt(oracle.var).max():.3f}]")

# The oracle improves monotonically as context grows.
xc, yc = task.sources[0]
from gridtnp.taskgen import Task

for n in (0, 8, 32, 128, xc.shape[0]):
    sub = Task(sources=[(xc[:n], yc[:n])], x_t=task.x_t, y_t=task.y_t, meta=task.meta)
    print(f"  context {n:4d}: oracle log-lik {gp_posterior_oracle(sub).mean_loglik:+.4f}")

# Two-source tasks: source A on a coarse regular grid, source B scattered,
# outputs correlated through a shared latent GP.
ms = MultiSourceTaskConfig(correlation=0.8, grid_counts_a=(16,), n_b_range=(16, 64), n_target=64)
two = sample_multisource_task(ms, seed=1)
print(f"\ntwo-source task: A has {two.sources[0][0].shape[0]} grid points, "
      f"B has {two.sources[1][0].shape[0]} scattered points")

# Tasks round-trip bit-exactly through the binary file format.
import tempfile, os

with tempfile.TemporaryDirectory() as d:
    path = os.path.join(d, "tasks.bin")
    write_tasks(path, [task, two], generator_config={"demo": True})
    back = read_tasks(path)
    same = all(np.array_equal(a.y_t, b.y_t) for a, b in zip([task, two], back))
    print(f"file round-trip bit-identical: {same} ({os.path.getsize(path)} bytes)")
    tasks_to_csv(os.path.join(d, "tasks.csv"), [task])
    print("csv export rows:", sum(1 for _ in open(os.path.join(d, "tasks.csv"))))
