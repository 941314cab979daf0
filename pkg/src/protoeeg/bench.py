"""Convolution kernel benchmark: compiled path vs pure numpy.

Run as ``python3 -m protoeeg.bench``.  Times the three convolution kernels
(forward, grad-wrt-input, grad-wrt-kernels) at the production layer shapes,
cross-checking first that both backends agree numerically.  The compiled
path needs numba; without it only the numpy timings print.
"""

from __future__ import annotations

import argparse
import statistics
import sys
import time

import numpy as np

from . import kernels as K
from .model import DEFAULT_BLOCKS, INPUT_CHANNELS, INPUT_TIME

_OPS = ("forward", "grad_input", "grad_kernels")


def _layer_shapes(batch: int):
    """(x, kernels, grad_out, geometry) per conv block at production sizes."""
    rng = np.random.default_rng(0)
    ci, h, w = 1, INPUT_TIME, INPUT_CHANNELS
    for block in DEFAULT_BLOCKS:
        kh, kw = block.kernel
        sh, sw = block.stride
        ho, wo = K.out_shape(h, w, kh, kw, sh, sw)
        x = rng.normal(size=(batch, ci, h, w))
        kern = rng.normal(size=(block.out_channels, ci, kh, kw))
        grad_out = rng.normal(size=(batch, block.out_channels, ho, wo))
        yield x, kern, grad_out, (h, w, kh, kw, sh, sw)
        ci, h, w = block.out_channels, ho, wo


def _calls(x, kern, grad_out, geom, suffix: str):
    h, w, kh, kw, sh, sw = geom
    fwd = getattr(K, f"conv2d_forward_{suffix}")
    bwd_in = getattr(K, f"conv2d_backward_input_{suffix}")
    bwd_k = getattr(K, f"conv2d_backward_kernels_{suffix}")
    return {"forward": lambda: fwd(x, kern, sh, sw),
            "grad_input": lambda: bwd_in(grad_out, kern, h, w, sh, sw),
            "grad_kernels": lambda: bwd_k(grad_out, x, kh, kw, sh, sw)}


def _median_ms(fn, repeats: int) -> float:
    fn()  # warm: first numba call pays compilation
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1e3)
    return statistics.median(times)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="python3 -m protoeeg.bench",
        description="Time the convolution kernels on both backends.")
    parser.add_argument("--batch", type=int, default=32)
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args(argv)

    have_numba = hasattr(K, "conv2d_forward_numba")
    print(f"active backend: {K.BACKEND}   batch: {args.batch}   "
          f"repeats: {args.repeats}")
    if not have_numba:
        print("numba not importable; timing the numpy path only")

    worst = 0.0
    for i, (x, kern, grad_out, geom) in enumerate(_layer_shapes(args.batch), 1):
        co, ci, kh, kw = kern.shape
        print(f"\nlayer {i}: {co}x{ci} kernel {kh}x{kw} stride "
              f"{geom[4]}x{geom[5]}  input {x.shape[2]}x{x.shape[3]}")
        numpy_calls = _calls(x, kern, grad_out, geom, "numpy")
        numba_calls = _calls(x, kern, grad_out, geom, "numba") if have_numba else None
        for op in _OPS:
            t_np = _median_ms(numpy_calls[op], args.repeats)
            if numba_calls is None:
                print(f"  {op:<13} numpy {t_np:8.2f} ms")
                continue
            diff = float(np.max(np.abs(numpy_calls[op]() - numba_calls[op]())))
            worst = max(worst, diff)
            t_nb = _median_ms(numba_calls[op], args.repeats)
            print(f"  {op:<13} numpy {t_np:8.2f} ms   numba {t_nb:8.2f} ms   "
                  f"x{t_np / max(t_nb, 1e-9):5.1f}   |diff| {diff:.2e}")

    if have_numba:
        ok = worst < 1e-9
        print(f"\nbackend agreement: max |numpy - numba| = {worst:.2e} "
              f"({'OK' if ok else 'MISMATCH'})")
        return 0 if ok else 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
