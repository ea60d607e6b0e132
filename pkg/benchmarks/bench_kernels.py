"""Compare the compiled kernels against the numpy fallback.

Usage: python benchmarks/bench_kernels.py [--repeat N] [--skip-train]

Times the two hot kernels at adapter-sized shapes, then one short planted
training run per backend (each in a fresh interpreter, since the backend is
chosen at import). Results of both backends are also checked for bit equality.
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from elastic_rank.kernels import available_backends

TRAIN_SNIPPET = """
import time
from elastic_rank import BACKEND
from elastic_rank.allocator import AllocatorConfig
from elastic_rank.harness import MethodKind, MethodSpec, PlantedLowRankTask, TrainSettings, prepare_task, run_method
task = PlantedLowRankTask()
cfg = AllocatorConfig(total_steps=1500, t_warmup=200, t_stabilize=300, adjust_interval=100, k=2, b=3, init_rank=3)
data = prepare_task(task, 0)
t = time.perf_counter()
run = run_method(data, MethodSpec(MethodKind.ELASTIC, cfg), TrainSettings(), 0)
print(BACKEND, time.perf_counter() - t, repr(run.metric))
"""


def bench(fn, repeat):
    timer = timeit.Timer(fn)
    n, _ = timer.autorange()
    return min(timer.repeat(repeat, n)) / n


def kernel_table(repeat):
    backends = available_backends()
    rng = np.random.default_rng(0)
    shapes = [(32, 16, 16), (32, 16, 3), (16, 16, 32), (128, 64, 64)]
    rows = []
    for m, k, n in shapes:
        a, b = rng.standard_normal((m, k)), rng.standard_normal((k, n))
        outs = {name: mod.matmul(a, b) for name, mod in backends.items()}
        times = {name: bench(lambda mod=mod: mod.matmul(a, b), repeat) for name, mod in backends.items()}
        rows.append((f"matmul {m}x{k} @ {k}x{n}", times, outs))
    for size in (256, 4096):
        cur = np.abs(rng.standard_normal(size))
        outs, times = {}, {}
        for name, mod in backends.items():
            i_bar, u_bar = np.zeros(size), np.zeros(size)
            mod.ema_update(i_bar, u_bar, cur, 0.85, 0.85, True)
            outs[name] = np.concatenate([i_bar, u_bar])
            times[name] = bench(lambda mod=mod: mod.ema_update(i_bar, u_bar, cur, 0.85, 0.85, True), repeat)
        rows.append((f"ema_update n={size}", times, outs))
    return list(backends), rows


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--skip-train", action="store_true")
    args = parser.parse_args(argv)

    names, rows = kernel_table(args.repeat)
    if "compiled" not in names:
        print("compiled extension not built; only the numpy fallback is timed")
    header = f"{'kernel':<28}" + "".join(f"{n + ' (us)':>16}" for n in names)
    if len(names) == 2:
        header += f"{'speedup':>10}{'bit-equal':>11}"
    print(header)
    for label, times, outs in rows:
        line = f"{label:<28}" + "".join(f"{times[n] * 1e6:16.2f}" for n in names)
        if len(names) == 2:
            same = np.array_equal(outs["python"], outs["compiled"])
            line += f"{times['python'] / times['compiled']:10.2f}{str(same):>11}"
        print(line)

    if args.skip_train:
        return 0
    print()
    print(f"{'training run (1500 steps)':<28}{'seconds':>10}  final mse")
    for name in names:
        env = {**os.environ, "ELASTIC_RANK_BACKEND": name}
        out = subprocess.run([sys.executable, "-c", TRAIN_SNIPPET], env=env, capture_output=True, text=True, check=True)
        backend, seconds, metric = out.stdout.split()
        print(f"{backend:<28}{float(seconds):10.2f}  {metric}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
