"""Compare the compiled kernels with the numpy/pure-Python fallback.

    python benchmarks/bench_kernels.py [--repeat 5]

Prints one CSV row per (kernel, backend) with the best wall time and the
speedup of the compiled build. Outputs of both backends are checked for
bit equality first.
"""

from __future__ import annotations

import argparse
import sys
import timeit

import numpy as np

from xfuse import _kernels_py as py_backend

try:
    from xfuse import _kernels as c_backend
except ImportError:  # extension not built
    c_backend = None


def cases(rng):
    x = rng.standard_normal((16, 24, 34, 34))  # conv input, "same" padding already applied
    cols = rng.standard_normal((24 * 9, 16 * 32 * 32))
    blob = rng.integers(0, 256, size=1 << 20, dtype=np.uint8)  # ~ one classifier checkpoint
    return {
        "im2col 16x24x32x32 k3": (lambda b: b.im2col(x, 3, 3)),
        "col2im 16x24x32x32 k3": (lambda b: b.col2im(cols, x.shape, 3, 3)),
        "fnv1a64 1 MiB": (lambda b: b.fnv1a64(blob)),
    }


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if c_backend is None:
        print("compiled extension not available; build with `pip install -e . --no-build-isolation`", file=sys.stderr)
        return 1
    rng = np.random.default_rng(0)
    print("kernel,backend,seconds,speedup")
    for name, fn in cases(rng).items():
        a, b = fn(py_backend), fn(c_backend)
        same = a == b if isinstance(a, int) else np.array_equal(a, b)
        if not same:
            print(f"{name}: backends disagree", file=sys.stderr)
            return 1
        # the pure-Python checksum is slow; a single run is enough to time it
        reps = 1 if name.startswith("fnv") else args.repeat
        t_py = min(timeit.repeat(lambda: fn(py_backend), number=1, repeat=reps))
        t_c = min(timeit.repeat(lambda: fn(c_backend), number=1, repeat=args.repeat))
        print(f"{name},python,{t_py:.6f},1.00")
        print(f"{name},cython,{t_c:.6f},{t_py / t_c:.2f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
