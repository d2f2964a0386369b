"""Time the numba kernels against their numpy counterparts.

    python benchmarks/bench_kernels.py [--repeat N]

Each kernel runs once untimed (numba compiles on first call), then the best of
``--repeat`` runs is reported along with the largest output difference
between the two implementations.
"""
import argparse
import time

import numpy as np

from rollcast import kernels
from rollcast._accel import HAVE_NUMBA
from rollcast.dynamics import GridSpec, channel_forcing
from rollcast.linear_lab import shrink_target


def _cases():
    rng = np.random.default_rng(0)
    grid = GridSpec.uniform(16, 32)
    x0 = 8.0 + 0.01 * rng.standard_normal((16, 32))
    forcing = channel_forcing(grid, 8.0, 2.0, np.arange(365))
    jacs = np.ascontiguousarray(np.eye(64) + 0.05 * rng.standard_normal((2000, 64, 64)))
    basis = np.linalg.qr(rng.standard_normal((64, 4)))[0]
    theta = np.eye(3) + 0.1 * rng.standard_normal((3, 3))
    phi = shrink_target(3, 0.3)
    return {
        "l96_channel (16x32, 1 year)": ("l96_channel", (x0, forcing, 0.01, 1)),
        "l63_run (100k steps)": ("l63_run", (np.ones(3), 10.0, 28.0, 8.0 / 3.0, 0.01, 100_000, 10)),
        "l63_tangent (20k steps)": ("l63_tangent", (np.ones(3), 10.0, 28.0, 8.0 / 3.0, 0.01, 20_000)),
        "qr_log_growth (2000 x 64x64, k=4)": ("qr_log_growth", (jacs, basis, 1)),
        "deep_linear_grad (d=3, L=64)": ("deep_linear_grad", (theta, phi, 64)),
        "deep_linear_gd (d=3, L=8, 20k it)": ("deep_linear_gd", (np.eye(3), phi, 8, 1e-4, 20_000, 0.0, 1e8)),
    }


def _best(fn, args, repeat):
    out = fn(*args)
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t)
    return best, out


def _first_array(out):
    return np.asarray(out[0] if isinstance(out, tuple) else out, dtype=np.float64)


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=3)
    args = parser.parse_args(argv)
    if not HAVE_NUMBA:
        print("numba is not installed; the loop kernels run as plain python")
    print(f"{'kernel':38s} {'numba s':>10s} {'numpy s':>10s} {'speedup':>8s} {'max diff':>10s}")
    for label, (name, inputs) in _cases().items():
        t_loop, a = _best(getattr(kernels.loops, name), inputs, args.repeat)
        t_vec, b = _best(getattr(kernels.vectorized, name), inputs, args.repeat)
        diff = float(np.max(np.abs(_first_array(a) - _first_array(b))))
        print(f"{label:38s} {t_loop:10.4f} {t_vec:10.4f} {t_vec / t_loop:8.1f} {diff:10.2e}")


if __name__ == "__main__":
    main()
