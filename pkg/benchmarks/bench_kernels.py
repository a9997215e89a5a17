"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Shapes follow the desk profile: 5 updates per round over a 6.6k-parameter
model, and 20 updates for the Krum stress case.
"""
import argparse
import timeit

import numpy as np

from fedbackdoor import _fallback, kernels


def cases(rng):
    d = 6_634  # 64 -> 64 -> 32 -> 10 MLP
    X5 = rng.normal(size=(5, d))
    X20 = rng.normal(size=(20, d))
    offsets = np.array([0, 4096, 4160, 6208, 6240, 6560, 6570, d])
    g, gt = rng.normal(size=d), rng.normal(size=d)
    return {
        "krum_scores n=20": lambda impl: kernels.krum_scores(X20, 15, impl),
        "coord_median n=5": lambda impl: kernels.coord_median(X5, impl),
        "clip_rows n=20": lambda impl: kernels.clip_rows(X20, 0.1, impl),
        "topk_craft": lambda impl: kernels.topk_craft(gt, g, offsets, 0.5, 0.5, impl),
        "topk_mask k=100": lambda impl: kernels.topk_mask(g, offsets, 100, impl),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    if kernels.BACKEND != "compiled":
        print("compiled extension not available; timing the fallback only")
    backends = [("python", _fallback)]
    if kernels.BACKEND == "compiled":
        backends.insert(0, ("compiled", kernels._impl))
    rng = np.random.default_rng(0)
    print(f"{'kernel':<20}" + "".join(f"{name:>14}" for name, _ in backends) + f"{'speedup':>10}")
    for label, fn in cases(rng).items():
        times = []
        for _, impl in backends:
            fn(impl)
            best = min(timeit.repeat(lambda: fn(impl), number=1, repeat=args.repeat))
            times.append(best)
        row = f"{label:<20}" + "".join(f"{t * 1e3:>12.3f}ms" for t in times)
        if len(times) == 2:
            row += f"{times[1] / times[0]:>9.1f}x"
        print(row)


if __name__ == "__main__":
    main()
