"""Compare the compiled and NumPy kernel backends.

    python benchmarks/bench_kernels.py [--repeat N]

Prints median wall time per call and the speedup of each backend over the
NumPy fallback. Outputs are checked for agreement before timing.
"""

import argparse
import timeit

import numpy as np

from unsupface.kernels import backends


def cases(rng):
    boxes_a = np.column_stack([rng.uniform(0, 600, (8, 2)), rng.uniform(20, 90, (8, 2))])
    boxes_b = np.column_stack([rng.uniform(0, 600, (8, 2)), rng.uniform(20, 90, (8, 2))])
    g64, g128 = rng.random((64, 64)), rng.random((128, 128))
    return {
        "iou_matrix 8x8": lambda k: k.iou_matrix(boxes_a, boxes_b),
        "lbp_codes 64x64": lambda k: k.lbp_codes(g64),
        "lbp_histograms 64x64": lambda k: k.lbp_histograms(g64, 16),
        "lbp_histograms 128x128": lambda k: k.lbp_histograms(g128, 16),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=7)
    args = ap.parse_args()
    impls = backends()
    rng = np.random.default_rng(0)
    print(f"backends: {', '.join(impls)}")
    print(f"{'kernel':<24}" + "".join(f"{n:>14}" for n in impls) + f"{'speedup':>10}")
    for name, fn in cases(rng).items():
        ref = fn(impls["python"])
        for mod in impls.values():
            np.testing.assert_allclose(fn(mod), ref, rtol=1e-12)
        times = {}
        for bname, mod in impls.items():
            t = timeit.Timer(lambda: fn(mod))
            n, _ = t.autorange()
            times[bname] = np.median(t.repeat(args.repeat, n)) / n
        speed = times["python"] / times["cython"] if "cython" in times else float("nan")
        print(f"{name:<24}" + "".join(f"{times[b] * 1e6:>11.1f} us" for b in impls)
              + f"{speed:>9.1f}x")


if __name__ == "__main__":
    main()
