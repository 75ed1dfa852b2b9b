"""Synthetic desk-scale tasks and the dataset file format.

Three generators, each a small analog of a finding from the experiments the
package operationalizes:

- ``dilated``: targets are a fixed random dilation-4, k=3 circular
  convolution of smooth random inputs — an undilated backbone cannot reach
  the receptive field, a dilation-capable searched operation can.
- ``fourier``: targets apply a fixed random 4-mode Fourier multiplier —
  operator learning in miniature.
- ``permuted``: two-class 2-d patterns whose rows and columns are scrambled
  by a fixed hidden permutation — convolutions lose locality, an operation
  that can absorb the inverse permutation does not.

Datasets are stored as a raw little-endian float blob (inputs then targets,
sample-major, row-major) plus a JSON sidecar recording shapes, dtype, task
kind, and the generator parameters needed to re-derive targets.
"""

from __future__ import annotations

import dataclasses
import json
import pathlib
from typing import Dict, Optional, Tuple

import numpy as np

__all__ = ["Dataset", "generate", "save_dataset", "load_dataset", "split_dataset"]

_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


@dataclasses.dataclass
class Dataset:
    """In-memory dataset: inputs, targets, and the sidecar metadata."""

    name: str
    inputs: np.ndarray   # (n_samples, *input_shape)
    targets: np.ndarray  # (n_samples, *target_shape)
    task_kind: str       # operator | classification
    dtype: str = "f64"
    generator: Dict[str, object] = dataclasses.field(default_factory=dict)

    def __post_init__(self):
        if self.task_kind not in ("operator", "classification"):
            raise ValueError(f"unknown task_kind {self.task_kind!r}")
        if self.dtype not in _DTYPES:
            raise ValueError(f"dtype must be one of {sorted(_DTYPES)}")
        if self.inputs.shape[0] != self.targets.shape[0]:
            raise ValueError("inputs/targets sample counts differ")

    @property
    def n_samples(self) -> int:
        return int(self.inputs.shape[0])


def _smooth_inputs(rng: np.random.Generator, samples: int, n: int,
                   max_mode: int = 6) -> np.ndarray:
    """Random smooth periodic signals: a few low-frequency sinusoids."""
    t = np.arange(n) / n
    x = np.zeros((samples, 1, n))
    for m in range(1, max_mode + 1):
        amp = rng.standard_normal((samples, 1, 1)) / m
        phase = rng.uniform(0, 2 * np.pi, (samples, 1, 1))
        x += amp * np.cos(2 * np.pi * m * t + phase)
    return x


def _dilated(n: int, samples: int, seed: int) -> Dataset:
    rng = np.random.default_rng(seed)
    filt = rng.standard_normal(3)
    x = _smooth_inputs(rng, samples, n)
    y = np.zeros_like(x)
    for tap in range(3):
        y += filt[tap] * np.roll(x, 4 * tap, axis=2)
    return Dataset("dilated", x, y, "operator",
                   generator={"kind": "dilated", "k": 3, "dilation": 4,
                              "filter": filt.tolist(), "seed": seed})


def _fourier(n: int, samples: int, seed: int) -> Dataset:
    rng = np.random.default_rng(seed)
    modes = 4
    coef = rng.standard_normal(modes) + 1j * rng.standard_normal(modes)
    x = _smooth_inputs(rng, samples, n)
    spec = np.fft.fft(x, axis=2)
    mult = np.zeros(n, complex)
    mult[:modes] = coef
    # conjugate-symmetric completion keeps targets real
    mult[n - modes + 1:] = np.conj(coef[1:][::-1])
    y = np.fft.ifft(spec * mult, axis=2).real
    return Dataset("fourier", x, y, "operator",
                   generator={"kind": "fourier", "modes": modes, "seed": seed,
                              "coef_real": coef.real.tolist(),
                              "coef_imag": coef.imag.tolist()})


def _permuted(n: int, samples: int, seed: int, permute: bool = True) -> Dataset:
    rng = np.random.default_rng(seed)
    t = np.arange(n) / n
    # Class-0 template: a fixed smooth 2-d pattern.  Class 1 reuses the same
    # pixel values in a scrambled order, so the two classes have identical
    # value marginals and differ only in spatial arrangement.  Each sample is
    # also circularly rolled by a random offset, so class identity lives in
    # translation-invariant local structure rather than per-pixel statistics
    # that would survive the hidden permutation.
    z = np.zeros((n, n))
    for m1 in range(1, 4):
        for m2 in range(1, 4):
            z += (rng.standard_normal() / (m1 * m2)
                  * np.cos(2 * np.pi * (m1 * t[:, None] + m2 * t[None, :])
                           + rng.uniform(0, 2 * np.pi)))
    t0 = z / np.sqrt(np.mean(z * z))
    t1 = t0.ravel()[rng.permutation(n * n)].reshape(n, n)
    templates = [t0, t1]
    row_perm = rng.permutation(n)
    col_perm = rng.permutation(n)
    labels = rng.integers(0, 2, samples)
    x = np.empty((samples, 1, n, n))
    for s in range(samples):
        amp = 0.75 + 0.5 * rng.random()
        base = np.roll(templates[labels[s]],
                       (rng.integers(n), rng.integers(n)), axis=(0, 1))
        img = amp * base + 1.25 * rng.standard_normal((n, n))
        if permute:
            img = img[np.ix_(row_perm, col_perm)]
        x[s, 0] = img
    return Dataset("permuted" if permute else "unpermuted",
                   x, labels.astype(float)[:, None], "classification",
                   generator={"kind": "permuted", "seed": seed,
                              "permute": bool(permute),
                              "row_perm": row_perm.tolist(),
                              "col_perm": col_perm.tolist()})


def generate(task: str, n: int, samples: int, seed: int = 0) -> Dataset:
    """Build one of the synthetic tasks; n must be a power of two."""
    if n < 2 or n & (n - 1):
        raise ValueError(f"n must be a power of two, got {n}")
    if samples < 0:
        raise ValueError("samples must be nonnegative")
    if task == "dilated":
        return _dilated(n, samples, seed)
    if task == "fourier":
        return _fourier(n, samples, seed)
    if task == "permuted":
        return _permuted(n, samples, seed, permute=True)
    if task == "unpermuted":
        return _permuted(n, samples, seed, permute=False)
    raise ValueError(f"unknown task {task!r}")


def save_dataset(ds: Dataset, path) -> None:
    """Write blob at ``path`` and JSON sidecar at ``path`` + '.json'."""
    path = pathlib.Path(path)
    dt = _DTYPES[ds.dtype]
    per_in = int(np.prod(ds.inputs.shape[1:]))
    per_tgt = int(np.prod(ds.targets.shape[1:]))
    blob = np.concatenate([ds.inputs.reshape(ds.n_samples, per_in),
                           ds.targets.reshape(ds.n_samples, per_tgt)], axis=1)
    path.write_bytes(np.ascontiguousarray(blob, dtype=dt).tobytes())
    sidecar = {
        "name": ds.name,
        "n_samples": ds.n_samples,
        "input_shape": list(ds.inputs.shape[1:]),
        "target_shape": list(ds.targets.shape[1:]),
        "dtype": ds.dtype,
        "task_kind": ds.task_kind,
        "generator": ds.generator,
    }
    path.with_suffix(path.suffix + ".json").write_text(
        json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def load_dataset(path) -> Dataset:
    path = pathlib.Path(path)
    sidecar = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    dt = _DTYPES[sidecar["dtype"]]
    in_shape = tuple(sidecar["input_shape"])
    tgt_shape = tuple(sidecar["target_shape"])
    ns = int(sidecar["n_samples"])
    per = int(np.prod(in_shape)) + int(np.prod(tgt_shape))
    raw = np.frombuffer(path.read_bytes(), dtype=dt)
    if raw.size != ns * per:
        raise ValueError(f"blob holds {raw.size} values, sidecar implies {ns * per}")
    flat = raw.reshape(ns, per) if ns else raw.reshape(0, per)
    split = int(np.prod(in_shape))
    return Dataset(sidecar["name"],
                   flat[:, :split].reshape((ns,) + in_shape).astype(np.float64),
                   flat[:, split:].reshape((ns,) + tgt_shape).astype(np.float64),
                   sidecar["task_kind"], sidecar["dtype"],
                   sidecar.get("generator", {}))


def split_dataset(ds: Dataset, train: int, valid: int) -> Tuple[Dataset, Dataset, Dataset]:
    """Deterministic leading-order split into train/valid/test."""
    if train + valid > ds.n_samples:
        raise ValueError("split sizes exceed dataset")

    def piece(a, b, tag):
        return Dataset(f"{ds.name}:{tag}", ds.inputs[a:b], ds.targets[a:b],
                       ds.task_kind, ds.dtype, ds.generator)

    return (piece(0, train, "train"), piece(train, train + valid, "valid"),
            piece(train + valid, ds.n_samples, "test"))
