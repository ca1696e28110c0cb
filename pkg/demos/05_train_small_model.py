"""Train a small Swin-TNP on 1-D GP tasks for a few hundred iterations and
compare against the exact GP oracle. Writes metrics and plots to ./demo_run.

About two minutes on a laptop CPU; increase --iters for better results
(the acceptance setup trains 20k iterations).
"""

import argparse

import numpy as np

from gridtnp.attnproc import AttentionConfig, WindowSpec
from gridtnp.geomembed import FourierEmbedConfig
from gridtnp.gridenc import GridSpec
from gridtnp.harness import DataConfig, TrainConfig, emit_results, evaluate, evaluate_oracle, train
from gridtnp.models import EmbeddingConfig, ModelConfig
from gridtnp.taskgen import GPTaskConfig, task_generator


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--iters", type=int, default=500)
    parser.add_argument("--out", default="demo_run")
    args = parser.parse_args()

    gp = GPTaskConfig(dim=1, extent=(-6.0, 6.0), lengthscale=0.5, noise=0.1,
                      n_context=(64, 256), n_target=64)
    data = DataConfig(kind="gp", gp=gp)
    model_cfg = ModelConfig(
        variant="gridded_tnp",
        dim_x=1,
        embedding=EmbeddingConfig(kind="fourier", fourier=FourierEmbedConfig(32, 0.1, 24.0)),
        attention=AttentionConfig(dz=64, heads=4, d_v=16, d_qk=32, mlp_hidden=64),
        grid=GridSpec((32,), ((-6.0, 6.0),), (False,)),
        encoder="pt",
        processor="swin",
        processor_layers=2,
        window=WindowSpec((4,), (2,), (False,)),
        decoder="nn",
        decoder_k=3,
        precision="float32",
    )
    train_cfg = TrainConfig(iterations=args.iters, batch_size=8, lr=5e-4, grad_clip=0.5,
                            seed=0, eval_every=max(args.iters // 5, 1), val_tasks=64)
    result = train(model_cfg, train_cfg, data, args.out)

    gen = task_generator("gp", gp)
    test_tasks = [gen(10_000 + i) for i in range(128)]
    ev = evaluate(result.model, test_tasks, fpt_batches=10)
    orc = evaluate_oracle(test_tasks)
    print(f"\nafter {args.iters} iterations over 128 test tasks:")
    print(f"  model  log-lik {ev.loglik:+.4f} +/- {ev.loglik_stderr:.4f}, rmse {ev.rmse:.4f}")
    print(f"  oracle log-lik {orc.loglik:+.4f} +/- {orc.loglik_stderr:.4f}, rmse {orc.rmse:.4f}")
    print(f"  gap to Bayes-optimal: {orc.loglik - ev.loglik:.4f} nats")
    print(f"  forward pass (batch 8): {ev.fpt_ms:.1f} ms, {ev.params} parameters")

    rows = result.rows + [ev.row(split="swin-tnp"), orc.row(split="oracle")]
    out = emit_results(rows, args.out, per_task=ev)
    print(f"wrote {out['metrics']} and {len(out['plots'])} plots")


if __name__ == "__main__":
    main()
