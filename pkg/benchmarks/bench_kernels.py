"""Compare the compiled conv2d kernels against the numpy reference.

Runs forward + both backward passes at the convolution shapes the decoder
actually hits during training, prints per-shape timings, and verifies the
two backends agree numerically. Usage::

    python benchmarks/bench_kernels.py [--repeats N] [--dtype float32]
"""

import argparse
import time

import numpy as np

from vtm.kernels import backend_name, reference

try:
    from vtm.kernels import _native
except ImportError:
    _native = None

# (label, x shape, w shape, stride, pad) — decoder/encoder hot shapes
SHAPES = [
    ("head3x3", (8, 48, 16, 16), (48, 48, 3, 3), 1, 1),
    ("rcu3x3", (8, 96, 8, 8), (96, 96, 3, 3), 1, 1),
    ("proj1x1", (8, 192, 8, 8), (96, 192, 1, 1), 1, 0),
    ("down2x2", (8, 48, 16, 16), (96, 48, 3, 3), 2, 1),
    ("big3x3", (4, 48, 32, 32), (48, 48, 3, 3), 1, 1),
]


def time_backend(mod, x, w, x_shape, w_shape, stride, pad, repeats):
    y = mod.conv2d_forward(x, w, stride, pad)
    gy = np.ones_like(y)
    mod.conv2d_backward_input(gy, w, x_shape, stride, pad)
    mod.conv2d_backward_weight(x, gy, w_shape, stride, pad)
    start = time.perf_counter()
    for _ in range(repeats):
        mod.conv2d_forward(x, w, stride, pad)
        mod.conv2d_backward_input(gy, w, x_shape, stride, pad)
        mod.conv2d_backward_weight(x, gy, w_shape, stride, pad)
    return (time.perf_counter() - start) / repeats


def check_agreement(x, w, x_shape, w_shape, stride, pad):
    yr = reference.conv2d_forward(x, w, stride, pad)
    yn = _native.conv2d_forward(x, w, stride, pad)
    gy = np.ones_like(yr)
    pairs = [
        (yr, yn),
        (reference.conv2d_backward_input(gy, w, x_shape, stride, pad),
         _native.conv2d_backward_input(gy, w, x_shape, stride, pad)),
        (reference.conv2d_backward_weight(x, gy, w_shape, stride, pad),
         _native.conv2d_backward_weight(x, gy, w_shape, stride, pad)),
    ]
    return max(float(np.abs(a - b).max()) for a, b in pairs)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=30)
    ap.add_argument("--dtype", choices=("float32", "float64"),
                    default="float32")
    args = ap.parse_args()

    print(f"active backend: {backend_name()}")
    if _native is None:
        print("compiled extension not available; nothing to compare")
        return

    dtype = np.dtype(args.dtype)
    rng = np.random.default_rng(0)
    print(f"{'shape':10s} {'python':>10s} {'native':>10s} "
          f"{'speedup':>8s} {'max|diff|':>10s}")
    for label, x_shape, w_shape, stride, pad in SHAPES:
        x = rng.standard_normal(x_shape).astype(dtype)
        w = rng.standard_normal(w_shape).astype(dtype)
        t_py = time_backend(reference, x, w, x_shape, w_shape, stride, pad,
                            args.repeats)
        t_nat = time_backend(_native, x, w, x_shape, w_shape, stride, pad,
                             args.repeats)
        diff = check_agreement(x, w, x_shape, w_shape, stride, pad)
        print(f"{label:10s} {t_py * 1e3:9.2f}ms {t_nat * 1e3:9.2f}ms "
              f"{t_py / t_nat:7.2f}x {diff:10.2e}")


if __name__ == "__main__":
    main()
