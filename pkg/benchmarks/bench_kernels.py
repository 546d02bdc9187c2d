"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5]
"""

import argparse
import timeit

import numpy as np

from hvae import _pykernels

try:
    from hvae import _ckernels
except ImportError:
    _ckernels = None


def cases(rng):
    x = rng.standard_normal((16, 32, 16, 16))
    cols = rng.standard_normal((32 * 9, 16 * 16 * 16))
    px = rng.integers(0, 256, (16, 3, 32, 32)) * (2 / 255) - 1
    mean = rng.uniform(-1, 1, px.shape)
    logvar = rng.uniform(-8, 0, px.shape)
    return {
        "im2col 16x32x16x16 k3": lambda m: m.im2col(x, 3),
        "col2im 16x32x16x16 k3": lambda m: m.col2im(cols, 16, 32, 16, 16, 3),
        "disc_gauss 16x3x32x32": lambda m: m.disc_gauss(px, mean, logvar, 1e-12),
    }


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--number", type=int, default=10)
    args = p.parse_args(argv)
    backends = {"python": _pykernels}
    if _ckernels is not None:
        backends["cython"] = _ckernels
    else:
        print("compiled kernels not built; timing the numpy fallback only")
    print(f"{'kernel':<26}" + "".join(f"{b:>12}" for b in backends) + ("     speedup" if len(backends) == 2 else ""))
    for name, fn in cases(np.random.default_rng(0)).items():
        times = {}
        for b, mod in backends.items():
            t = timeit.repeat(lambda: fn(mod), repeat=args.repeat, number=args.number)
            times[b] = min(t) / args.number * 1e3
        line = f"{name:<26}" + "".join(f"{times[b]:>10.3f}ms" for b in backends)
        if len(times) == 2:
            line += f"{times['python'] / times['cython']:>11.2f}x"
        print(line)


if __name__ == "__main__":
    main()
