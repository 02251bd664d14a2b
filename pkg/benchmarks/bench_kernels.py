"""Compare the compiled and numpy kernel backends.

    python benchmarks/bench_kernels.py [--repeat 20]

Times the distillation and policy-gradient kernels on a default-sized batch
(32 questions x 8 rollouts x 2 positions, V=8) and on a wider vocabulary, plus
a full training step, under each backend.
"""
import argparse
import timeit

import numpy as np

from scsdpo import kernels
from scsdpo.trainer import TrainConfig, init_state, train_step

SHAPES = [(512, 8, 8), (512, 1000, 100), (4096, 256, 100)]


def bench_cells(repeat: int) -> list[tuple]:
    rows = []
    rng = np.random.default_rng(0)
    for n, v, k in SHAPES:
        zs, zt = rng.normal(scale=2.0, size=(2, n, v))
        tok = rng.integers(0, v, size=n)
        adv = rng.normal(size=n)
        for name in ("python", "compiled"):
            kernels.use_backend(name)
            for div in ("kl", "jsd"):
                code = kernels.divergence_code(div)
                t = min(timeit.repeat(lambda: kernels.distill_cells(zs, zt, k, code), number=1, repeat=repeat))
                rows.append((f"distill/{div}", f"N={n} V={v} K={k}", name, t))
            t = min(timeit.repeat(lambda: kernels.policy_gradient_cells(zs, tok, adv), number=1, repeat=repeat))
            rows.append(("policy_grad", f"N={n} V={v}", name, t))
    return rows


def bench_step(repeat: int) -> list[tuple]:
    rows = []
    config = TrainConfig()
    task = config.task.build()
    for name in ("python", "compiled"):
        kernels.use_backend(name)
        state = init_state(task, config)
        t = min(timeit.repeat(lambda: train_step(state, task, config), number=1, repeat=repeat))
        rows.append(("train_step", "default config", name, t))
    return rows


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    if not kernels.compiled_available():
        raise SystemExit("compiled kernels are not built; run `pip install -e . --no-build-isolation`")
    original = kernels.backend()
    try:
        rows = bench_cells(args.repeat) + bench_step(max(3, args.repeat // 4))
    finally:
        kernels.use_backend(original)
    times = {(r[0], r[1], r[2]): r[3] for r in rows}
    print(f"{'kernel':14s} {'shape':22s} {'python ms':>10s} {'compiled ms':>12s} {'speedup':>8s}")
    for kernel, shape in dict.fromkeys((r[0], r[1]) for r in rows):
        py, c = times[kernel, shape, "python"], times[kernel, shape, "compiled"]
        print(f"{kernel:14s} {shape:22s} {py * 1e3:10.3f} {c * 1e3:12.3f} {py / c:7.1f}x")


if __name__ == "__main__":
    main()
