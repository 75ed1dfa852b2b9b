"""Brute-force dense reference implementations (oracles).

Each ``naive_*`` function is the most literal possible transcription of the
corresponding operation definition: direct circular-index summation for
convolutions, dense analytic DFT matrices (never FFT, never butterflies)
wherever a Fourier transform appears, and dense degree/adjacency algebra for
graph kinds.  The oracles deliberately share no code with the structured fast
path so the two have independent failure modes.  Performance is a non-goal.

``equivalence_report`` runs an XD-operation against an oracle on random
weights/inputs and reports per-trial relative errors (absolute fallback for
near-zero references), serializable as line-delimited text.
"""

from __future__ import annotations

import dataclasses
import itertools
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

__all__ = [
    "OracleSpec",
    "naive_conv",
    "naive_avgpool",
    "naive_skip",
    "naive_zero",
    "naive_fno",
    "naive_transposed_conv",
    "naive_graph_conv",
    "oracle_forward",
    "EquivalenceReport",
    "equivalence_report",
    "standard_claims",
]

_KINDS = ("conv", "avgpool", "skip", "zero", "fno", "transposed_conv",
          "graph_conv", "fixed_linear_compose")


@dataclasses.dataclass
class OracleSpec:
    """Which reference operation to run, with its per-kind parameters."""

    kind: str
    params: Dict[str, object] = dataclasses.field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown oracle kind {self.kind!r}")


def _spatial_tuple(v, ndim: int) -> Tuple[int, ...]:
    if np.isscalar(v):
        return (int(v),) * ndim
    return tuple(int(u) for u in v)


def _check_ranges(n: int, k: int, s: int, d: int) -> None:
    if k < 1 or k > n:
        raise ValueError(f"filter size {k} out of range for n={n}")
    if k > 1 and not (1 <= d <= (n - 1) // (k - 1)):
        raise ValueError(f"dilation {d} out of range for n={n}, k={k}")
    if k == 1 and d != 1:
        raise ValueError("dilation must be 1 for k=1")
    if s < 1 or (n > 1 and s > n - 1):
        raise ValueError(f"stride {s} out of range for n={n}")


def _pad_input(x: np.ndarray, n: Tuple[int, ...]) -> np.ndarray:
    """Zero-pad trailing spatial axes of x up to sizes n (leading corner)."""
    ndim = len(n)
    lead = x.shape[: x.ndim - ndim]
    out = np.zeros(lead + n, dtype=x.dtype)
    out[(Ellipsis,) + tuple(slice(0, s) for s in x.shape[x.ndim - ndim:])] = x
    return out


def naive_conv(w: np.ndarray, x: np.ndarray, n, stride=1, dilation=1,
               groups: Optional[np.ndarray] = None) -> np.ndarray:
    """Circular convolution y_i[t] = sum_j B[i,j] sum_tap w[i,j,tap] x_j[t - d*tap].

    ``w`` has shape (c_out, c_in, k per axis); ``x`` has shape (c_in, *m) and
    is zero-padded to the n^N circular domain.  Strided positions not
    congruent to 0 (mod s) are zeroed after the fact.  Direct summation only.
    """
    ndim = w.ndim - 2
    ns = _spatial_tuple(n, ndim)
    ss = _spatial_tuple(stride, ndim)
    ds = _spatial_tuple(dilation, ndim)
    ks = w.shape[2:]
    for ni, ki, si, di in zip(ns, ks, ss, ds):
        _check_ranges(ni, ki, si, di)
    c_out, c_in = w.shape[:2]
    if x.shape[0] != c_in:
        raise ValueError(f"input has {x.shape[0]} channels, filter expects {c_in}")
    B = np.ones((c_out, c_in)) if groups is None else np.asarray(groups, dtype=float)
    xp = _pad_input(np.asarray(x, dtype=float), ns)
    y = np.zeros((c_out,) + ns)
    for i in range(c_out):
        for j in range(c_in):
            if B[i, j] == 0.0:
                continue
            for taps in itertools.product(*(range(ki) for ki in ks)):
                shift = tuple(t * di for t, di in zip(taps, ds))
                y[i] += B[i, j] * w[(i, j) + taps] * np.roll(xp[j], shift,
                                                            axis=tuple(range(ndim)))
    for ax, si in enumerate(ss):
        if si > 1:
            mask = (np.arange(ns[ax]) % si == 0).astype(float)
            y *= mask.reshape((1,) * (1 + ax) + (-1,) + (1,) * (ndim - 1 - ax))
    return y


def naive_avgpool(x: np.ndarray, n, kernel, stride=1, dilation=1) -> np.ndarray:
    """Per-channel circular averaging filter 1_k/k with stride mask."""
    ndim = np.asarray(x).ndim - 1
    ks = _spatial_tuple(kernel, ndim)
    c = x.shape[0]
    w = np.zeros((c, c) + ks)
    for i in range(c):
        w[(i, i) + (slice(None),) * ndim] = 1.0 / float(np.prod(ks))
    return naive_conv(w, x, n, stride=stride, dilation=dilation,
                      groups=np.eye(c))


def naive_skip(x: np.ndarray, n) -> np.ndarray:
    """Identity on the padded circular domain."""
    ndim = np.asarray(x).ndim - 1
    return _pad_input(np.asarray(x, dtype=float), _spatial_tuple(n, ndim))


def naive_zero(x: np.ndarray, n) -> np.ndarray:
    ndim = np.asarray(x).ndim - 1
    ns = _spatial_tuple(n, ndim)
    return np.zeros((x.shape[0],) + ns)


def _dense_dft(n: int) -> np.ndarray:
    j = np.arange(n)
    return np.exp(-2j * np.pi * np.outer(j, j) / n)


def naive_fno(w: np.ndarray, x: np.ndarray, n, modes) -> np.ndarray:
    """Truncated Fourier multiplier: Re(sum_j F^-1 diag(R_ij, 0) F x_j).

    The real taps pack into the complex multiplier
    R = w[..., :modes] + i w[..., modes:2 modes] per axis (Kronecker lift in
    higher dimensions), zero beyond the retained modes.  Dense analytic DFT.
    """
    ndim = w.ndim - 2
    ns = _spatial_tuple(n, ndim)
    mo = _spatial_tuple(modes, ndim)
    for ni, mi in zip(ns, mo):
        if not (1 <= mi <= ni // 2):
            raise ValueError(f"modes {mi} out of range for n={ni}")
    if w.shape[2:] != tuple(2 * mi for mi in mo):
        raise ValueError("filter size must be 2*modes per axis")
    c_out, c_in = w.shape[:2]
    Fs = [_dense_dft(ni) for ni in ns]
    Finvs = [np.conj(F) / F.shape[0] for F in Fs]
    xp = _pad_input(np.asarray(x, dtype=float), ns).astype(complex)
    y = np.zeros((c_out,) + ns)
    for i in range(c_out):
        acc = np.zeros(ns, dtype=complex)
        for j in range(c_in):
            # complex multiplier from the real taps, axis by axis
            R = w[i, j].astype(complex)
            for ax, mi in enumerate(mo):
                lo = np.take(R, range(mi), axis=ax)
                hi = np.take(R, range(mi, 2 * mi), axis=ax)
                R = lo + 1j * hi
            mult = np.zeros(ns, dtype=complex)
            mult[tuple(slice(0, mi) for mi in mo)] = R
            u = xp[j]
            for ax, F in enumerate(Fs):
                u = np.moveaxis(np.tensordot(F, u, axes=([1], [ax])), 0, ax)
            u = mult * u
            for ax, Fi in enumerate(Finvs):
                u = np.moveaxis(np.tensordot(Fi, u, axes=([1], [ax])), 0, ax)
            acc += u
        y[i] = acc.real
    return y


def naive_transposed_conv(w: np.ndarray, x: np.ndarray, dilation=1) -> np.ndarray:
    """Transposed convolution with stride = d(k-1)+1: each input element is
    replaced by the element times the dilated filter."""
    ndim = w.ndim - 2
    ds = _spatial_tuple(dilation, ndim)
    ks = w.shape[2:]
    ms = x.shape[1:]
    strides = tuple(di * (ki - 1) + 1 for ki, di in zip(ks, ds))
    outs = tuple(mi * si for mi, si in zip(ms, strides))
    c_out, c_in = w.shape[:2]
    y = np.zeros((c_out,) + outs)
    for i in range(c_out):
        for j in range(c_in):
            for pos in itertools.product(*(range(mi) for mi in ms)):
                for taps in itertools.product(*(range(ki) for ki in ks)):
                    tgt = tuple(p * s + t * d
                                for p, s, t, d in zip(pos, strides, taps, ds))
                    y[(i,) + tgt] += x[(j,) + pos] * w[(i, j) + taps]
    return y


def naive_graph_conv(w: np.ndarray, x: np.ndarray, adjacency: np.ndarray,
                     kind: str = "normalized") -> np.ndarray:
    """Graph convolution G x_j per channel followed by a 1x1 channel mix.

    kind "normalized": G = D^-1/2 (A + I) D^-1/2 with D the degree matrix of
    A + I (self-loops added).  kind "diffusion": G = D^-1 A; an isolated node
    (zero degree) is invalid.  Output y_i = sum_j w[i,j,0] (G x_j).
    """
    A = np.asarray(adjacency, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("adjacency must be square")
    if kind == "normalized":
        Ah = A + np.eye(A.shape[0])
        deg = Ah.sum(axis=1)
        G = (Ah / np.sqrt(deg)[:, None]) / np.sqrt(deg)[None, :]
    elif kind == "diffusion":
        deg = A.sum(axis=1)
        if np.any(deg == 0):
            raise ValueError("diffusion graph convolution: isolated node (zero degree)")
        G = A / deg[:, None]
    else:
        raise ValueError(f"unknown graph kind {kind!r}")
    if w.ndim != 3 or w.shape[2] != 1:
        raise ValueError("graph convolution supports k=1 filters only")
    gx = x @ G.T  # (c, nodes): each channel mapped by G
    return np.einsum("ij,jt->it", w[:, :, 0], gx)


def oracle_forward(spec: OracleSpec, w: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Dispatch an OracleSpec on a weight/input pair."""
    p = spec.params
    if spec.kind == "conv":
        return naive_conv(w, x, p["n"], p.get("stride", 1), p.get("dilation", 1),
                          p.get("groups"))
    if spec.kind == "avgpool":
        return naive_avgpool(x, p["n"], p["kernel"], p.get("stride", 1),
                             p.get("dilation", 1))
    if spec.kind == "skip":
        return naive_skip(x, p["n"])
    if spec.kind == "zero":
        return naive_zero(x, p["n"])
    if spec.kind == "fno":
        return naive_fno(w, x, p["n"], p["modes"])
    if spec.kind == "transposed_conv":
        return naive_transposed_conv(w, x, p.get("dilation", 1))
    if spec.kind == "graph_conv":
        return naive_graph_conv(w, x, p["adjacency"], p.get("graph_kind", "normalized"))
    if spec.kind == "fixed_linear_compose":
        inner = oracle_forward(p["base"], w, x) if p.get("side") == "output" else x
        A = np.asarray(p["matrix"], dtype=float)
        if p.get("side") == "output":
            return np.stack([A @ inner[i] for i in range(inner.shape[0])])
        xt = np.stack([A @ x[j] for j in range(x.shape[0])])
        return oracle_forward(p["base"], w, xt)
    raise ValueError(f"unknown oracle kind {spec.kind!r}")


def random_graph(nodes: int, family: str, seed: int = 0) -> np.ndarray:
    """Random adjacency from a family whose normalized/diffusion operator is
    exactly representable by width-1 K-matrices.

    "circulant": random symmetric circulant connection set (at least one
    offset); "matching": random perfect matching (every node degree 1).
    """
    rng = np.random.default_rng(seed)
    A = np.zeros((nodes, nodes))
    if family == "circulant":
        offsets = [s for s in range(1, nodes // 2 + 1) if rng.random() < 0.5]
        if not offsets:
            offsets = [1 + int(rng.integers(nodes // 2))]
        for s in offsets:
            for u in range(nodes):
                A[u, (u + s) % nodes] = A[(u + s) % nodes, u] = 1.0
    elif family == "matching":
        if nodes % 2:
            raise ValueError("matching family needs an even node count")
        order = rng.permutation(nodes)
        for t in range(0, nodes, 2):
            u, v = order[t], order[t + 1]
            A[u, v] = A[v, u] = 1.0
    else:
        raise ValueError(f"unknown graph family {family!r}")
    return A


# ---------------------------------------------------------------------------
# Equivalence reporting
# ---------------------------------------------------------------------------

@dataclasses.dataclass
class EquivalenceReport:
    """Per-trial error record of one XD-vs-oracle equivalence run."""

    name: str
    trial_errors: List[float]
    tolerance: float = 1e-8

    @property
    def max_error(self) -> float:
        return max(self.trial_errors) if self.trial_errors else 0.0

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance

    def lines(self) -> List[str]:
        out = [f"claim\t{self.name}\ttolerance\t{self.tolerance:.3e}"]
        for t, e in enumerate(self.trial_errors):
            out.append(f"trial\t{t}\terror\t{e:.6e}")
        out.append(f"result\t{'PASS' if self.passed else 'FAIL'}"
                   f"\tmax_error\t{self.max_error:.6e}")
        return out

    def __str__(self) -> str:
        return "\n".join(self.lines())


def _trial_error(got: np.ndarray, ref: np.ndarray) -> float:
    if got.shape != ref.shape:
        raise ValueError(f"shape mismatch: xd {got.shape} vs oracle {ref.shape}")
    denom = np.linalg.norm(ref.ravel())
    diff = np.linalg.norm((got - ref).ravel())
    if denom < 1e-10:  # near-zero reference: absolute fallback
        return float(diff)
    return float(diff / denom)


def equivalence_report(xd, oracle: OracleSpec, trials: int = 5, seed: int = 0,
                       name: Optional[str] = None) -> EquivalenceReport:
    """Run xd_forward against the oracle on random weights and inputs."""
    from . import xd as xdmod  # local import keeps the oracles standalone

    rng = np.random.default_rng(seed)
    errors = []
    for _ in range(trials):
        w = rng.standard_normal(xd.filter_shape)
        x = rng.standard_normal((xd.filter_shape[1],) + xd.m)
        got = xdmod.xd_forward(xd, w, x).data
        ref = oracle_forward(oracle, w, x)
        errors.append(_trial_error(np.asarray(got, dtype=float), ref))
    return EquivalenceReport(name or oracle.kind, errors)


def standard_claims() -> List[Tuple[str, object, OracleSpec]]:
    """The shipped verification suite: one configuration per expressivity claim."""
    from . import xd as xdmod

    claims: List[Tuple[str, object, OracleSpec]] = []
    claims.append(("conv k=3 n=16 c=2",
                   xdmod.init_from_conv(16, 3, channels=2),
                   OracleSpec("conv", {"n": 16})))
    claims.append(("conv k=3 d=4 n=16 c=2",
                   xdmod.init_from_conv(16, 3, dilation=4, channels=2),
                   OracleSpec("conv", {"n": 16, "dilation": 4})))
    claims.append(("conv k=5 s=3 n=32",
                   xdmod.init_from_conv(32, 5, stride=3),
                   OracleSpec("conv", {"n": 32, "stride": 3})))
    groups = np.array([[1.0, 0.0], [0.0, 1.0]])
    claims.append(("grouped conv k=3 n=16 c=2",
                   xdmod.init_from_conv(16, 3, groups=groups, channels=2),
                   OracleSpec("conv", {"n": 16, "groups": groups})))
    claims.append(("skip n=16 c=2", xdmod.init_skip(16, channels=2),
                   OracleSpec("skip", {"n": 16})))
    claims.append(("zero n=16 c=2", xdmod.init_zero(16, channels=2),
                   OracleSpec("zero", {"n": 16})))
    claims.append(("avgpool k=3 s=2 n=16 c=2",
                   xdmod.init_avgpool(16, 3, stride=2, channels=2),
                   OracleSpec("avgpool", {"n": 16, "kernel": 3, "stride": 2})))
    claims.append(("fno modes=4 n=16 c=2", xdmod.init_fno(16, 4, channels=2),
                   OracleSpec("fno", {"n": 16, "modes": 4})))
    claims.append(("transposed conv m=4 k=3 d=2",
                   xdmod.init_transposed_conv(4, 3, dilation=2),
                   OracleSpec("transposed_conv", {"dilation": 2})))
    A_ring = random_graph(8, "circulant", seed=7)
    gconv = xdmod.compose_fixed_kmatrix(
        xdmod.init_from_conv(8, 1, channels=2),
        xdmod.graph_kmatrix(A_ring, "normalized"), side="input")
    claims.append(("graph conv 8 nodes c=2", gconv,
                   OracleSpec("graph_conv", {"adjacency": A_ring,
                                             "graph_kind": "normalized"})))
    A_match = random_graph(8, "matching", seed=11)
    gdiff = xdmod.compose_fixed_kmatrix(
        xdmod.init_from_conv(8, 1, channels=2),
        xdmod.graph_kmatrix(A_match, "diffusion"), side="input")
    claims.append(("diffusion graph conv 8 nodes c=2", gdiff,
                   OracleSpec("graph_conv", {"adjacency": A_match,
                                             "graph_kind": "diffusion"})))
    claims.append(("2-d conv k=3 n=8 per axis",
                   xdmod.init_from_conv(8, 3, channels=2, ndim=2),
                   OracleSpec("conv", {"n": (8, 8)})))
    claims.append(("2-d fno modes=2 n=8 per axis",
                   xdmod.init_fno(8, 2, channels=2, ndim=2),
                   OracleSpec("fno", {"n": (8, 8), "modes": 2})))
    return claims
