"""Micro-benchmarks: dense matvec vs FFT convolution vs XD forward.

Reports wall time (mean/stddev over repeats) and exact multiply-add counts.
Counting conventions: a dense n x n matvec is n^2 multiply-adds; one
butterfly application is 2 n log2 n; FFT convolution is one forward and one
inverse transform plus the pointwise product, (c_in + c_out) * 2 n log2 n +
c_in * c_out * n; XD counts come from xd_madds (K/M once per channel, L on
the weights, plus the per-channel-pair elementwise work).
"""

from __future__ import annotations

import csv
import time
from typing import Dict, List, Sequence

import numpy as np

from . import kaleidoscope as kal
from . import xd

__all__ = ["dense_madds", "fft_conv_madds", "run_bench", "write_csv"]


def dense_madds(n: int) -> int:
    return n * n


def fft_conv_madds(n: int, c: int = 1) -> int:
    return (c + c) * kal.butterfly_madds(n) + c * c * n


def _time(fn, repeats: int) -> Dict[str, float]:
    fn()  # warm up
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        samples.append((time.perf_counter() - t0) * 1e6)
    return {"mean_us": float(np.mean(samples)),
            "stddev_us": float(np.std(samples))}


def run_bench(sizes: Sequence[int], depths: Sequence[int] = (1,),
              channels: int = 1, repeats: int = 5,
              seed: int = 0) -> List[Dict[str, object]]:
    rng = np.random.default_rng(seed)
    rows: List[Dict[str, object]] = []
    for n in sizes:
        x = rng.standard_normal((channels, n))
        # dense matvec (single-channel map, n^2 exactly)
        A = rng.standard_normal((n, n))
        v = rng.standard_normal(n)
        t = _time(lambda: A @ v, repeats)
        rows.append({"op": "dense", "n": n, "c": 1, "depth": 0,
                     "madds": dense_madds(n), **t})
        # FFT convolution
        filt = np.zeros(n)
        filt[:3] = rng.standard_normal(3)
        spec = np.fft.fft(filt)
        t = _time(lambda: np.fft.ifft(np.fft.fft(x, axis=1) * spec, axis=1).real,
                  repeats)
        rows.append({"op": "fft_conv", "n": n, "c": channels, "depth": 1,
                     "madds": fft_conv_madds(n, channels), **t})
        # XD forward at each requested depth
        for d in depths:
            op = xd.init_from_conv(n, 3, channels=channels)
            if d > 1:
                op = xd.pad_depth(op, (d, d, d))
            w = rng.standard_normal(op.filter_shape)
            t = _time(lambda: xd.xd_forward(op, w, x), repeats)
            rows.append({"op": "xd", "n": n, "c": channels, "depth": d,
                         "madds": xd.xd_madds(op), **t})
    return rows


def write_csv(rows: List[Dict[str, object]], path) -> None:
    cols = ["op", "n", "c", "depth", "mean_us", "stddev_us", "madds"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols)
        writer.writeheader()
        for r in rows:
            writer.writerow({k: r[k] for k in cols})
