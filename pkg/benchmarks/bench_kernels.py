"""Benchmark the compiled kernels against the numpy fallback.

Runs each hot kernel on desk-scale and production-scale shapes and prints
per-call timings plus the speedup. Invoke as:

    python benchmarks/bench_kernels.py [--repeats 200]
"""

import argparse
import time

import numpy as np

from trivit.numerics.kernels import pykernels

try:
    from trivit.numerics.kernels import _ckernels
except ImportError:
    _ckernels = None

RNG = np.random.default_rng(0)

# (name, shape label, per-backend callable factory)
SHAPES = {
    "desk tokens (17x64)": (17, 64),
    "prod tokens (209x768)": (209, 768),
    "prod attn rows (209x209)": (209, 209),
}
VOLUMES = {
    "desk volume (28^3)": (28, 28, 28),
    "prod volume (91x109x91)": (91, 109, 91),
}


def timeit(fn, repeats):
    fn()  # warm up
    start = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - start) / repeats


def bench_pairs(repeats):
    cases = []
    for label, shape in SHAPES.items():
        x = RNG.normal(scale=2.0, size=shape).astype(np.float32)
        gy = RNG.normal(size=shape).astype(np.float32)
        gain = np.ones(shape[1], dtype=np.float32)
        y = pykernels.softmax_forward(x)
        xhat, rstd = pykernels.layer_norm_forward(x, 1e-5)
        cases.extend(
            [
                (f"softmax_forward {label}", lambda m, x=x: m.softmax_forward(x)),
                (f"softmax_backward {label}", lambda m, y=y, gy=gy: m.softmax_backward(y, gy)),
                (f"layer_norm_forward {label}", lambda m, x=x: m.layer_norm_forward(x, 1e-5)),
                (
                    f"layer_norm_backward {label}",
                    lambda m, xh=xhat, rs=rstd, g=gain, gy=gy: m.layer_norm_backward(xh, rs, g, gy),
                ),
                (f"gelu_forward {label}", lambda m, x=x: m.gelu_forward(x)),
                (f"gelu_backward {label}", lambda m, x=x, gy=gy: m.gelu_backward(x, gy)),
            ]
        )
    for label, dims in VOLUMES.items():
        vol = RNG.normal(size=dims).astype(np.float32)
        cases.append(
            (f"rotate_plane {label}", lambda m, v=vol: m.rotate_plane(v, 2, 0.3))
        )

    print(f"{'kernel':54s} {'numpy':>10s} {'compiled':>10s} {'speedup':>8s}")
    for name, call in cases:
        t_py = timeit(lambda: call(pykernels), repeats)
        if _ckernels is None:
            print(f"{name:54s} {t_py * 1e6:9.1f}u {'n/a':>10s} {'-':>8s}")
            continue
        t_c = timeit(lambda: call(_ckernels), repeats)
        print(f"{name:54s} {t_py * 1e6:9.1f}u {t_c * 1e6:9.1f}u {t_py / t_c:7.1f}x")


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeats", type=int, default=200)
    args = parser.parse_args()
    if _ckernels is None:
        print("compiled extension not built; showing numpy timings only")
    bench_pairs(args.repeats)


if __name__ == "__main__":
    main()
