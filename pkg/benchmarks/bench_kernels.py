"""Time the numba kernels against their numpy twins.

    python benchmarks/bench_kernels.py              # per-call kernel timings
    python benchmarks/bench_kernels.py --experiment # also a full simulate per backend

Per-call timings use arrays of the sizes the agents actually pass (10 arms,
5 Q actions, 16 core counts) plus one large case per kernel, so the numbers
show both dispatch overhead and loop throughput. Compilation happens in a
warm-up call and is reported separately.
"""

from __future__ import annotations

import argparse
import os
import subprocess
import sys
import tempfile
import time
import timeit

import numpy as np

from wfsizing import _kernels


def _cases(n_arms: int, n_cores: int):
    rng = np.random.default_rng(0)
    h = rng.uniform(-5, 5, n_arms)
    q = rng.normal(size=(6, 10, 5))
    mask = np.array([True, True, False, True, True])
    cpus = np.arange(1, n_cores + 1, dtype=np.int64)
    return {
        "softmax": lambda k: k(h),
        "sample_index": lambda k: k(h, 0.37),
        "preference_step": lambda k: k(h.copy(), 1, 0.01),
        "masked_argmax": lambda k: k(q[2, 3], mask),
        "q_backup": lambda k: k(q, 1, 2, 3, -0.5, 1, 3, mask, 0.1, 0.5),
        "speedup_curve": lambda k: k(1000.0, 0.9, 8.0, 0.03, cpus),
    }


def bench_kernels(repeat: int) -> list[tuple[str, str, float, float, float]]:
    rows = []
    for label, arms, cores in (("agent-sized", 10, 16), ("large", 4096, 4096)):
        for name, call in _cases(arms, cores).items():
            if label == "large" and name in ("masked_argmax", "q_backup"):
                continue  # fixed five-action shape; nothing grows
            jit = _kernels.NUMBA_BACKEND[name]
            t0 = time.perf_counter()
            call(jit)
            compile_s = time.perf_counter() - t0
            t_np = min(timeit.repeat(lambda: call(_kernels.NUMPY_BACKEND[name]), number=repeat, repeat=3)) / repeat
            t_nb = min(timeit.repeat(lambda: call(jit), number=repeat, repeat=3)) / repeat
            rows.append((name, label, t_np * 1e6, t_nb * 1e6, compile_s))
    return rows


def bench_experiment() -> dict[str, float]:
    out = {}
    for flag in ("0", "1"):
        env = dict(os.environ, WFSIZING_NUMBA=flag)
        with tempfile.TemporaryDirectory() as tmp:
            t0 = time.perf_counter()
            subprocess.run([sys.executable, "-m", "wfsizing.cli", "simulate", "--out", tmp],
                           env=env, check=True, stdout=subprocess.DEVNULL)
            out["numba" if flag == "1" else "numpy"] = time.perf_counter() - t0
    return out


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=2000)
    ap.add_argument("--experiment", action="store_true", help="also time a full simulate run per backend")
    args = ap.parse_args(argv)

    print(f"{'kernel':<16} {'case':<12} {'numpy us':>10} {'numba us':>10} {'speedup':>8} {'first call s':>13}")
    for name, label, t_np, t_nb, first in bench_kernels(args.repeat):
        print(f"{name:<16} {label:<12} {t_np:>10.2f} {t_nb:>10.2f} {t_np / t_nb:>7.1f}x {first:>13.3f}")
    if args.experiment:
        for backend, secs in bench_experiment().items():
            print(f"simulate (bundled config, {backend}): {secs:.2f} s")
    return 0


if __name__ == "__main__":
    sys.exit(main())
