"""Compiled vs numpy top-k scan timings.

    python benchmarks/bench_kernels.py [--n 200000] [--d 32] [--repeats 20]

Reports the median wall time per call for the dense scan, the 8-bit code
scan and the selection step alone, for each backend.
"""

import argparse
import statistics
import time

import numpy as np

from grank import _kernels
from grank._kernels import fallback
from grank.mips import QuantizedCorpus


def timed(fn, repeats):
    fn()
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - t0)
    return statistics.median(samples) * 1e3


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=200_000)
    ap.add_argument("--d", type=int, default=32)
    ap.add_argument("--ks", default="50,500,2000")
    ap.add_argument("--repeats", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    vectors = rng.standard_normal((args.n, args.d)).astype(np.float32)
    vectors /= np.linalg.norm(vectors, axis=1, keepdims=True)
    query = vectors[0].copy()
    scores = vectors @ query
    q = QuantizedCorpus.quantize(vectors)
    backends = {"python": fallback}
    if _kernels.compiled is not None:
        backends["cython"] = _kernels.compiled
    else:
        print("compiled kernel not built; only the fallback is timed")

    print(f"n={args.n} d={args.d} median of {args.repeats} (ms)")
    print(f"{'k':>6s} {'op':>8s} " + " ".join(f"{b:>9s}" for b in backends) + ("   speedup" if len(backends) == 2 else ""))
    for k in (int(v) for v in args.ks.split(",")):
        ops = {
            "select": lambda m: m.topk_select(scores, k),
            "dense": lambda m: m.topk_dense(vectors, query, k),
            "codes": lambda m: m.topk_codes(q.codes, q.scale, q.offset, query, k),
        }
        for name, op in ops.items():
            ms = {b: timed(lambda: op(m), args.repeats) for b, m in backends.items()}
            line = f"{k:6d} {name:>8s} " + " ".join(f"{ms[b]:9.3f}" for b in backends)
            if len(ms) == 2:
                line += f"   {ms['python'] / ms['cython']:7.2f}x"
            print(line)
            # both backends must return the same ids
            if len(backends) == 2:
                a, b = (op(m)[0] for m in backends.values())
                assert np.array_equal(a, b), f"backend mismatch for {name} k={k}"


if __name__ == "__main__":
    main()
