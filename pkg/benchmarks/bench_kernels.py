#!/usr/bin/env python3
"""Head-to-head timing of the compiled and numpy local-update kernels.

Times the per-client K-step local phase (the simulator's hot loop) on
representative desk-scale workloads, plus one full engine run, and prints a
speedup table.

Usage: python benchmarks/bench_kernels.py [--repeats 200]
"""
import argparse
import time

import numpy as np

from dfedsim import kernels
from dfedsim.data import make_synthetic_blobs, partition_iid
from dfedsim.engine import PartitionSpec, ProblemSpec, RunConfig, run
from dfedsim.numerics import RngStream
from dfedsim.optimizers import HyperParams
from dfedsim.problems import LogisticProblem, QuadraticProblem
from dfedsim.topology import TopologySpec


def time_call(fn, repeats):
    fn()  # warm up
    tic = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - tic) / repeats


def kernel_workloads(repeats):
    rng = RngStream(1, "bench")
    quad = QuadraticProblem.random(1, 20, rng.spawn("quad"))
    ds = make_synthetic_blobs(4, 8, 512, 3.0, rng.spawn("blobs"))
    logit = LogisticProblem(ds, partition_iid(ds, 1, rng.spawn("part")))

    xq = rng.spawn("xq").standard_normal(quad.d)
    xl = rng.spawn("xl").standard_normal(logit.d) * 0.1
    etas = np.full(5, 0.05)
    idx = logit.sample_minibatch_block(0, 32, 5, rng.spawn("mb"))
    v0 = np.zeros(logit.d)

    cases = {
        "prox quadratic d=20 K=5": lambda: kernels.local_prox(quad, 0, xq, xq, etas, 0.1),
        "prox logistic B=32 K=5": lambda: kernels.local_prox(logit, 0, xl, xl, etas, 0.1, idx=idx),
        "momentum logistic B=32 K=5": lambda: kernels.local_momentum(logit, 0, xl, v0, etas, 0.9, idx=idx),
        "sam logistic B=32 K=5": lambda: kernels.local_sam(logit, 0, xl, etas, 0.1, idx=idx),
    }
    rows = []
    for name, fn in cases.items():
        timings = {}
        for backend in ("python", "compiled") if kernels.COMPILED_AVAILABLE else ("python",):
            kernels.set_backend(backend)
            timings[backend] = time_call(fn, repeats)
        rows.append((name, timings))
    kernels.set_backend("auto")
    return rows


def engine_workload():
    cfg = RunConfig(
        algorithm="dfedcata", m=32, seed=3,
        hyper=HyperParams(eta=0.01, lambda_=0.1, beta=0.9, K=5, T=60, batch_size=32),
        topology=TopologySpec("random_dynamic", 32, seed=3, n_neighbors=4),
        problem=ProblemSpec(kind="logistic", classes=4, features=8,
                            train_n=2048, test_n=256, separation=3.0),
        partition=PartitionSpec(kind="dirichlet", alpha=0.3),
        eval_every=10,
    )
    rows = []
    for backend in ("python", "compiled") if kernels.COMPILED_AVAILABLE else ("python",):
        kernels.set_backend(backend)
        tic = time.perf_counter()
        run(cfg)
        rows.append((backend, time.perf_counter() - tic))
    kernels.set_backend("auto")
    return rows


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=200)
    args = parser.parse_args()

    if not kernels.COMPILED_AVAILABLE:
        print("compiled core not built; timing the numpy fallback only\n")

    print(f"{'kernel':<30} {'python':>12} {'compiled':>12} {'speedup':>9}")
    for name, timings in kernel_workloads(args.repeats):
        py = timings["python"]
        if "compiled" in timings:
            c = timings["compiled"]
            print(f"{name:<30} {py * 1e6:>10.1f}us {c * 1e6:>10.1f}us {py / c:>8.1f}x")
        else:
            print(f"{name:<30} {py * 1e6:>10.1f}us {'-':>12} {'-':>9}")

    print("\nfull run (m=32, T=60, dynamic topology, logistic):")
    rows = engine_workload()
    for backend, seconds in rows:
        print(f"  {backend:<10} {seconds:.2f}s")
    if len(rows) == 2:
        print(f"  speedup    {rows[0][1] / rows[1][1]:.1f}x")


if __name__ == "__main__":
    main()
