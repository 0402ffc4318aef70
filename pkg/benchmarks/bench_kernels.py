"""Time the conv2d kernels under each available backend.

    python benchmarks/bench_kernels.py [--repeat N]

Shapes follow the layers that dominate a training step: the two FAP convs
on the detector grid and the mask predictor on crops.  The first call per
backend is excluded so numba compile time does not count.
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from claps import _kernels

SHAPES = {
    # name: (N, C_in, H, W, C_out, k)
    "fap_det_conv1": (8, 7, 16, 16, 32, 3),
    "fap_det_conv2": (8, 32, 16, 16, 32, 3),
    "fap_proj": (8, 32, 16, 16, 32, 1),
    "mask_crop": (8, 8, 24, 24, 8, 3),
}


def _time(fn, repeat: int) -> float:
    fn()
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench(repeat: int = 20) -> list[tuple[str, str, float, float]]:
    rng = np.random.default_rng(0)
    rows = []
    before = _kernels.get_backend()
    try:
        for name, (n, c, h, w, co, k) in SHAPES.items():
            x = rng.normal(size=(n, c, h, w))
            wt = rng.normal(size=(co, c, k, k))
            b = rng.normal(size=co)
            g = rng.normal(size=(n, co, h, w))
            for backend in _kernels.available_backends():
                _kernels.set_backend(backend)
                fwd = _time(lambda: _kernels.conv2d_forward(x, wt, b), repeat)
                bwd = _time(lambda: _kernels.conv2d_backward(x, wt, g), repeat)
                rows.append((name, backend, fwd, bwd))
    finally:
        _kernels.set_backend(before)
    return rows


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    print(f"{'layer':<15} {'backend':<8} {'forward ms':>11} {'backward ms':>12}")
    for name, backend, fwd, bwd in bench(args.repeat):
        print(f"{name:<15} {backend:<8} {fwd * 1e3:>11.3f} {bwd * 1e3:>12.3f}")


if __name__ == "__main__":
    main()
