"""Time the compiled kernels against the pure-Python fallback.

Usage: python3 benchmarks/bench_backends.py [--sizes 64 128] [--repeats 5]
"""
import argparse

from qfnlos import COMPILED_AVAILABLE
from qfnlos.benchmark import backends_csv, compare_backends


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--sizes", type=int, nargs="+", default=[64, 128])
    p.add_argument("--repeats", type=int, default=5)
    args = p.parse_args()
    if not COMPILED_AVAILABLE:
        print("compiled kernels are not built; only the Python backend will be timed")
    for n in args.sizes:
        rows = compare_backends(n=n, repeats=args.repeats)
        print(f"N={n}")
        print(backends_csv(rows), end="")
        times = {(r.kernel, r.backend): r.median_seconds for r in rows}
        for kernel in sorted({r.kernel for r in rows}):
            if (kernel, "compiled") in times:
                speedup = times[(kernel, "python")] / times[(kernel, "compiled")]
                print(f"  {kernel}: compiled is {speedup:.1f}x faster")


if __name__ == "__main__":
    main()
