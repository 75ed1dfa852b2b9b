"""XD-operations: multi-channel structured layers Re(K diag(L w + b) M x).

An XD-operation is parameterized by three Kronecker-structured K-matrices
(K, L, M, shared across channels), a bias b over the padded spatial domain,
and channel gates C.  Its forward map is

    y_i = Re( K * sum_j C[i,j] * (L w_ij + b) .* (M x_j) )

with the filter w and input x zero-padded into the common power-of-two domain
n^N (filter tap t sits at position t; the input occupies the leading m^N
corner).  K and M are each applied once per output/input channel; only the
cheap elementwise products are per channel pair.

Constructive warm starts cover convolution (any filter size, dilation,
stride, channel groups), skip, zero, average pooling, FNO, transposed
convolution with stride equal to the dilated kernel size, and composition
with fixed K-matrices (hence graph convolutions via sparse adjacencies).
"""

from __future__ import annotations

import dataclasses
import math
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from . import autodiff as ad
from . import kaleidoscope as kal
from .autodiff import Tensor
from .kaleidoscope import KMatrix, KroneckerK

__all__ = [
    "XDParams",
    "XDOp",
    "xd_forward",
    "init_from_conv",
    "init_skip",
    "init_zero",
    "init_avgpool",
    "init_fno",
    "init_transposed_conv",
    "compose_fixed_kmatrix",
    "pad_depth",
    "circulant_kmatrix",
    "graph_kmatrix",
    "parameter_groups",
    "xd_madds",
]


def _as_tuple(v, ndim: int) -> Tuple[int, ...]:
    if np.isscalar(v):
        return (int(v),) * ndim
    t = tuple(int(u) for u in v)
    if len(t) != ndim:
        raise ValueError(f"expected {ndim} per-axis values, got {t}")
    return t


def _next_pow2(v: int) -> int:
    return 1 << max(1, (v - 1).bit_length())


@dataclasses.dataclass
class XDParams:
    """Architecture parameters a = ((K, L, M), b, C) of one XD-operation."""

    K: KroneckerK
    L: KroneckerK
    M: KroneckerK
    b: Tensor
    C: Tensor
    b_frozen: bool = False
    C_frozen: bool = False

    def __post_init__(self):
        dims = self.K.dims
        if self.L.dims != dims or self.M.dims != dims:
            raise ValueError(f"K/L/M dims disagree: {self.K.dims}/{self.L.dims}/{self.M.dims}")
        if tuple(self.b.shape) != dims:
            raise ValueError(f"bias shape {self.b.shape} != spatial dims {dims}")
        if self.C.data.ndim != 2:
            raise ValueError("channel gates C must be a matrix")

    @property
    def dims(self) -> Tuple[int, ...]:
        return self.K.dims

    @property
    def depth(self) -> Tuple[int, int, int]:
        """Declared depth triple (d_K, d_L, d_M), uniform across axes."""
        triple = []
        for Ks in (self.K, self.L, self.M):
            ds = {K.depth for K in Ks.axes}
            if len(ds) != 1:
                raise ValueError("per-axis depths disagree within one K-matrix")
            triple.append(ds.pop())
        return tuple(triple)


class XDOp:
    """One searchable layer: XDParams plus filter/input placement metadata."""

    __slots__ = ("params", "filter_shape", "m", "weight", "output_view")

    def __init__(self, params: XDParams, filter_shape: Tuple[int, ...],
                 m: Sequence[int], weight: Optional[Tensor] = None,
                 output_view: Optional[List[np.ndarray]] = None):
        n = params.dims
        ndim = len(n)
        if len(filter_shape) != 2 + ndim:
            raise ValueError("filter_shape must be (c_out, c_in, k per axis)")
        self.params = params
        self.filter_shape = tuple(int(v) for v in filter_shape)
        self.m = _as_tuple(m, ndim)
        for ki, mi, ni in zip(self.filter_shape[2:], self.m, n):
            if ki > ni or mi > ni:
                raise ValueError(f"filter/input size ({ki}/{mi}) exceeds domain {ni}")
        c_out, c_in = self.filter_shape[:2]
        if params.C.shape != (c_out, c_in):
            raise ValueError(f"gate shape {params.C.shape} != ({c_out}, {c_in})")
        if weight is None:
            weight = Tensor(np.zeros(self.filter_shape), requires_grad=True, name="w")
        if tuple(weight.shape) != self.filter_shape:
            raise ValueError("weight shape mismatch")
        self.weight = weight
        self.output_view = output_view

    @property
    def n(self) -> Tuple[int, ...]:
        return self.params.dims

    @property
    def ndim(self) -> int:
        return len(self.n)

    @property
    def depth(self) -> Tuple[int, int, int]:
        return self.params.depth


def _pad_spatial(x: Tensor, sizes: Tuple[int, ...], n: Tuple[int, ...],
                 first_axis: int) -> Tensor:
    for ax, (s, t) in enumerate(zip(sizes, n)):
        if s < t:
            x = ad.zero_pad(x, first_axis + ax, 0, t - s)
    return x


def xd_forward(op: XDOp, w=None, x=None):
    """Forward map of an XD-operation.

    ``w`` defaults to the op's owned weight tensor; ``x`` is real with shape
    (c_in, *m) or batched (batch, c_in, *m).  Returns a real tensor over the
    full n^N domain (or the configured output view), matching x's batching.
    """
    if x is None:
        raise ValueError("xd_forward requires an input tensor")
    w = op.weight if w is None else w
    wt = w if isinstance(w, Tensor) else Tensor(np.asarray(w))
    xt = x if isinstance(x, Tensor) else Tensor(np.asarray(x))
    if tuple(wt.shape) != op.filter_shape:
        raise ValueError(f"weight shape {wt.shape} != {op.filter_shape}")
    N = op.ndim
    c_out, c_in = op.filter_shape[:2]
    batched = xt.data.ndim == 2 + N
    if not batched:
        if xt.data.ndim != 1 + N:
            raise ValueError(f"input rank {xt.data.ndim} incompatible with N={N}")
        xt = ad.reshape(xt, (1,) + tuple(xt.shape))
    if xt.shape[1] != c_in or tuple(xt.shape[2:]) != op.m:
        raise ValueError(f"input shape {xt.shape[1:]} != ({c_in}, *{op.m})")

    spatial = tuple(range(2, 2 + N))
    # u_j = M x_j : one Kronecker apply per input-channel fiber set.
    xp = _pad_spatial(ad.to_complex(xt), op.m, op.n, first_axis=2)
    u = kal.kron_apply(op.params.M, xp, spatial_axes=spatial)
    # s_ij = L w_ij + b
    wp = _pad_spatial(ad.to_complex(wt), op.filter_shape[2:], op.n, first_axis=2)
    s = kal.kron_apply(op.params.L, wp, spatial_axes=spatial)
    s = ad.add(s, ad.reshape(op.params.b, (1, 1) + op.n))
    # y_i = K sum_j C[i,j] * s_ij .* u_j
    cs = ad.mul(ad.reshape(op.params.C, (c_out, c_in) + (1,) * N), s)
    prod = ad.mul(ad.reshape(cs, (1, c_out, c_in) + op.n),
                  ad.reshape(u, (xt.shape[0], 1, c_in) + op.n))
    y = ad.sum_(prod, axis=2)
    y = kal.kron_apply(op.params.K, y, spatial_axes=spatial)
    y = ad.real(y)
    if op.output_view is not None:
        for ax, idx in enumerate(op.output_view):
            if idx is not None:
                y = ad.gather(y, idx, axis=2 + ax)
    return y if batched else ad.reshape(y, tuple(y.shape)[1:])


# ---------------------------------------------------------------------------
# Shared construction pieces
# ---------------------------------------------------------------------------

def _dense_dft(n: int) -> np.ndarray:
    j = np.arange(n)
    return np.exp(-2j * np.pi * np.outer(j, j) / n)


def _zero_kmatrix(n: int, depth: int = 1) -> KMatrix:
    """K-matrix materializing exactly to the zero matrix."""
    K = kal.init_identity(n, depth)
    stage = K.factors[0][0].stages[0]
    for t in (stage.a, stage.b, stage.c, stage.d):
        t.data = np.zeros_like(t.data)
    return K


def _masked_idft(n: int, stride: int) -> KMatrix:
    """K = diag(stride mask) F^-1; mask keeps positions == 0 (mod stride)."""
    K = kal.init_idft(n)
    if stride > 1:
        mask = (np.arange(n) % stride == 0).astype(np.complex128)
        K.factors[0][0].scale_output(mask)
    return K


def _dilation_perm(n: int, k: int, d: int) -> np.ndarray:
    """Gather indices of P_d: filter tap t moves to position t*d."""
    idx = np.full(n, -1, dtype=np.intp)
    for t in range(k):
        idx[t * d] = t
    free = iter(j for j in range(n) if j >= k)
    for p in range(n):
        if idx[p] < 0:
            idx[p] = next(free)
    return idx


def _dft_perm(n: int, perm: np.ndarray) -> KMatrix:
    """Depth-3 K-matrix F P for a routing permutation P (gather semantics)."""
    return kal.kmatrix_compose(kal.init_dft(n), kal.init_permutation(n, perm))


def _validate_conv_ranges(n: int, k: int, stride: int, dilation: int) -> None:
    if k < 1 or k > n:
        raise ValueError(f"filter size {k} out of range for n={n}")
    if k > 1 and not (1 <= dilation <= (n - 1) // (k - 1)):
        raise ValueError(f"dilation {dilation} out of range for n={n}, k={k}")
    if k == 1 and dilation != 1:
        raise ValueError("dilation must be 1 for k=1")
    if not (1 <= stride <= n - 1) and not (stride == 1 and n == 1):
        if not (stride == 1):
            raise ValueError(f"stride {stride} out of range for n={n}")


def _channel_pair(channels) -> Tuple[int, int]:
    if np.isscalar(channels):
        return int(channels), int(channels)
    c_out, c_in = channels
    return int(c_out), int(c_in)


def _gates(channels, groups) -> Tensor:
    c_out, c_in = _channel_pair(channels)
    if groups is None:
        C = np.ones((c_out, c_in), dtype=np.complex128)
    else:
        C = np.asarray(groups, dtype=np.complex128)
        if C.shape != (c_out, c_in) or not np.all(np.isin(C.real, (0.0, 1.0))):
            raise ValueError("groups must be a 0/1 c_out x c_in matrix")
    return Tensor(C, requires_grad=True, name="C")


def _bias(value: np.ndarray, frozen: bool = False) -> Tensor:
    return Tensor(np.asarray(value, dtype=np.complex128), requires_grad=True, name="b")


# ---------------------------------------------------------------------------
# Initializers
# ---------------------------------------------------------------------------

def init_from_conv(n, k, stride=1, dilation=1, groups=None, channels: int = 1,
                   ndim: int = 1, m=None) -> XDOp:
    """Warm start equal to circular convolution: K = diag(mask) F^-1,
    L = F P_d, M = F, b = 0, C = groups; depth (1,3,1) (1,1,1 when d=1)."""
    ns = _as_tuple(n, ndim)
    ks = _as_tuple(k, ndim)
    ss = _as_tuple(stride, ndim)
    ds = _as_tuple(dilation, ndim)
    ms = _as_tuple(n if m is None else m, ndim)
    for ni, ki, si, di in zip(ns, ks, ss, ds):
        _validate_conv_ranges(ni, ki, si, di)
    any_dil = any(d > 1 for d in ds)
    K = KroneckerK([_masked_idft(ni, si) for ni, si in zip(ns, ss)])
    if any_dil:
        L = KroneckerK([_dft_perm(ni, _dilation_perm(ni, ki, di))
                        for ni, ki, di in zip(ns, ks, ds)])
    else:
        L = KroneckerK([kal.init_dft(ni) for ni in ns])
    M = KroneckerK([kal.init_dft(ni) for ni in ns])
    params = XDParams(K, L, M, _bias(np.zeros(ns)), _gates(channels, groups))
    c_out, c_in = _channel_pair(channels)
    rng = np.random.default_rng(0)
    w0 = Tensor(rng.standard_normal((c_out, c_in) + ks) / math.sqrt(c_in * int(np.prod(ks))),
                requires_grad=True, name="w")
    return XDOp(params, (c_out, c_in) + ks, ms, weight=w0)


def _parameter_free(n, channels: int, ndim: int, m, bias: np.ndarray,
                    stride=1) -> XDOp:
    ns = _as_tuple(n, ndim)
    ss = _as_tuple(stride, ndim)
    K = KroneckerK([_masked_idft(ni, si) for ni, si in zip(ns, ss)])
    L = KroneckerK([_zero_kmatrix(ni) for ni in ns])
    M = KroneckerK([kal.init_dft(ni) for ni in ns])
    params = XDParams(K, L, M, _bias(bias),
                      Tensor(np.eye(channels, dtype=np.complex128),
                             requires_grad=True, name="C"))
    ms = _as_tuple(n if m is None else m, ndim)
    return XDOp(params, (channels, channels) + (1,) * ndim, ms)


def init_skip(n, channels: int = 1, ndim: int = 1, m=None, crop: bool = False) -> XDOp:
    """Identity for every weight: L = 0, b = 1, C = I; depth (1,1,1)."""
    ns = _as_tuple(n, ndim)
    op = _parameter_free(n, channels, ndim, m, np.ones(ns))
    if crop and m is not None:
        op.output_view = [np.arange(mi, dtype=np.intp) for mi in op.m]
    return op


def init_zero(n, channels: int = 1, ndim: int = 1, m=None) -> XDOp:
    """Zero map for every weight: L = 0, b = 0, C = I; depth (1,1,1)."""
    ns = _as_tuple(n, ndim)
    return _parameter_free(n, channels, ndim, m, np.zeros(ns))


def init_avgpool(n, kernel, stride=1, dilation=1, channels: int = 1,
                 ndim: int = 1, m=None) -> XDOp:
    """Average pooling: weight-independent conv with filter 1_k/k per channel.

    b is the Fourier transform of the dilated averaging filter so that
    diag(b) matches diag(F a_d(1_k/k)) in the convolution diagonalization.
    """
    ns = _as_tuple(n, ndim)
    ks = _as_tuple(kernel, ndim)
    ds = _as_tuple(dilation, ndim)
    ss = _as_tuple(stride, ndim)
    for ni, ki, si, di in zip(ns, ks, ss, ds):
        _validate_conv_ranges(ni, ki, si, di)
    bias_axes = []
    for ni, ki, di in zip(ns, ks, ds):
        filt = np.zeros(ni)
        filt[np.arange(ki) * di] = 1.0 / ki
        bias_axes.append(_dense_dft(ni) @ filt)
    bias = bias_axes[0]
    for v in bias_axes[1:]:
        bias = np.multiply.outer(bias, v)
    return _parameter_free(n, channels, ndim, m, bias, stride=stride)


def init_fno(n, modes, channels: int = 1, ndim: int = 1, m=None) -> XDOp:
    """Fourier neural operator with `modes` retained frequencies per axis.

    L is the n-sparse (depth-4) map packing the real filter taps into the
    complex low-mode multiplier w[:modes] + i w[modes:2 modes]; K = F^-1,
    M = F, b = 0, C = all-ones; depth (1,4,1).
    """
    ns = _as_tuple(n, ndim)
    mo = _as_tuple(modes, ndim)
    for ni, mi in zip(ns, mo):
        if not (1 <= mi <= ni // 2):
            raise ValueError(f"modes {mi} out of range for n={ni}")
    K = KroneckerK([kal.init_idft(ni) for ni in ns])
    L_axes = []
    for ni, mi in zip(ns, mo):
        entries = [(t, t, 1.0) for t in range(mi)]
        entries += [(t, mi + t, 1j) for t in range(mi)]
        L_axes.append(kal.init_sparse(ni, entries))
    L = KroneckerK(L_axes)
    M = KroneckerK([kal.init_dft(ni) for ni in ns])
    params = XDParams(K, L, M, _bias(np.zeros(ns)), _gates(channels, None))
    c_out, c_in = _channel_pair(channels)
    ks = tuple(2 * mi for mi in mo)
    ms = _as_tuple(n if m is None else m, ndim)
    rng = np.random.default_rng(0)
    w0 = Tensor(rng.standard_normal((c_out, c_in) + ks) / math.sqrt(c_in * int(np.prod(ks))),
                requires_grad=True, name="w")
    return XDOp(params, (c_out, c_in) + ks, ms, weight=w0)


def init_transposed_conv(m, k, dilation=1, channels: int = 1, ndim: int = 1) -> XDOp:
    """Transposed convolution with stride = d(k-1)+1 (the dilated kernel size).

    Equivalent to a regular convolution with the dilated filter applied to
    the input spread out by the stride: M = F P_spread (depth 3),
    L = F P_d (depth 3), K = F^-1; output cropped to m*stride per axis.
    """
    ms = _as_tuple(m, ndim)
    ks = _as_tuple(k, ndim)
    ds = _as_tuple(dilation, ndim)
    strides = tuple(di * (ki - 1) + 1 for ki, di in zip(ks, ds))
    outs = tuple(mi * si for mi, si in zip(ms, strides))
    ns = tuple(_next_pow2(oi) for oi in outs)
    for ni, ki, di in zip(ns, ks, ds):
        _validate_conv_ranges(ni, ki, 1, di)
    K = KroneckerK([kal.init_idft(ni) for ni in ns])
    L = KroneckerK([_dft_perm(ni, _dilation_perm(ni, ki, di))
                    for ni, ki, di in zip(ns, ks, ds)])
    M_axes = []
    for ni, mi, si in zip(ns, ms, strides):
        spread = np.full(ni, -1, dtype=np.intp)
        for t in range(mi):
            spread[t * si] = t
        free = iter(j for j in range(ni) if j >= mi)
        for p in range(ni):
            if spread[p] < 0:
                spread[p] = next(free)
        M_axes.append(_dft_perm(ni, spread))
    M = KroneckerK(M_axes)
    params = XDParams(K, L, M, _bias(np.zeros(ns)), _gates(channels, None))
    view = [np.arange(oi, dtype=np.intp) if oi < ni else None
            for oi, ni in zip(outs, ns)]
    if all(v is None for v in view):
        view = None
    rng = np.random.default_rng(0)
    w0 = Tensor(rng.standard_normal((channels, channels) + ks) / math.sqrt(channels * int(np.prod(ks))),
                requires_grad=True, name="w")
    return XDOp(params, (channels, channels) + ks, ms, weight=w0, output_view=view)


def compose_fixed_kmatrix(op: XDOp, A: Union[KMatrix, KroneckerK],
                          side: str = "input") -> XDOp:
    """Compose with Lin_A: input side sets M <- M A, output side K <- A K."""
    if isinstance(A, KMatrix):
        if op.ndim != 1:
            raise ValueError("pass a KroneckerK for multi-axis operations")
        A = KroneckerK([A])
    if A.dims != op.n:
        raise ValueError(f"A dims {A.dims} != op domain {op.n}")
    p = op.params
    if side == "input":
        M = KroneckerK([kal.kmatrix_compose(Mi, Ai) for Mi, Ai in zip(p.M.axes, A.axes)])
        new = XDParams(p.K.copy(), p.L.copy(), M, p.b, p.C, p.b_frozen, p.C_frozen)
    elif side == "output":
        K = KroneckerK([kal.kmatrix_compose(Ai, Ki) for Ai, Ki in zip(A.axes, p.K.axes)])
        new = XDParams(K, p.L.copy(), p.M.copy(), p.b, p.C, p.b_frozen, p.C_frozen)
    else:
        raise ValueError("side must be 'input' or 'output'")
    return XDOp(new, op.filter_shape, op.m, weight=op.weight,
                output_view=op.output_view)


def pad_depth(op: XDOp, depth: Tuple[int, int, int]) -> XDOp:
    """Raise the declared depth triple by composing identity factor pairs;
    the forward map is unchanged, the architecture group gains capacity."""
    p = op.params
    new_kron = []
    for Ks, target in zip((p.K, p.L, p.M), depth):
        axes = []
        for ax in Ks.axes:
            if target < ax.depth:
                raise ValueError(f"target depth {target} below current {ax.depth}")
            if target > ax.depth:
                ax = kal.kmatrix_compose(kal.init_identity(ax.n, target - ax.depth),
                                         ax)
            else:
                ax = ax.copy()
            axes.append(ax)
        new_kron.append(KroneckerK(axes))
    params = XDParams(new_kron[0], new_kron[1], new_kron[2], p.b, p.C,
                      p.b_frozen, p.C_frozen)
    return XDOp(params, op.filter_shape, op.m, weight=op.weight,
                output_view=op.output_view)


def circulant_kmatrix(first_column: np.ndarray) -> KMatrix:
    """Exact K-matrix of the circulant matrix with the given first column:
    C = F^-1 diag(F c) F (depth 2)."""
    c = np.asarray(first_column, dtype=np.complex128)
    n = c.size
    spec = _dense_dft(n) @ c
    scaled_dft = kal.init_dft(n)
    scaled_dft.factors[0][0].scale_output(spec)
    return kal.kmatrix_compose(kal.init_idft(n), scaled_dft)


def graph_kmatrix(adjacency: np.ndarray, kind: str = "normalized") -> KMatrix:
    """Exact K-matrix of the graph operator Ĝ = D̂^-1/2 (A+I) D̂^-1/2 or
    G = D^-1 A for graphs the width-1 butterfly class captures exactly:
    circulant graphs and perfect matchings (plus isolated self-loop nodes)."""
    A = np.asarray(adjacency, dtype=float)
    n = A.shape[0]
    if A.ndim != 2 or A.shape[1] != n:
        raise ValueError("adjacency must be square")
    if not np.array_equal(A, A.T):
        raise ValueError("adjacency must be symmetric")
    deg = A.sum(axis=1)
    if kind == "normalized":
        dh = deg + 1.0
        G = ((A + np.eye(n)) / np.sqrt(dh)[:, None]) / np.sqrt(dh)[None, :]
    elif kind == "diffusion":
        if np.any(deg == 0):
            raise ValueError("diffusion graph operator: isolated node (zero degree)")
        G = A / deg[:, None]
    else:
        raise ValueError(f"unknown graph kind {kind!r}")
    # circulant case: every row is a rotation of the first
    if all(np.allclose(np.roll(G[0], r), G[r]) for r in range(n)):
        return circulant_kmatrix(G[:, 0])
    # matching case: each node has at most one neighbor
    if np.max(deg) <= 1.0 and np.all(np.isin(A, (0.0, 1.0))):
        pairs = [(u, v) for u in range(n) for v in range(u + 1, n) if A[u, v] == 1.0]
        order = [w for p in pairs for w in p]
        order += [u for u in range(n) if deg[u] == 0]
        q = np.asarray(order, dtype=np.intp)
        stages = [kal.ButterflyStage.identity(n, 2 ** (i + 1))
                  for i in range(n.bit_length() - 1)]
        s2 = stages[0]
        for t, _ in enumerate(pairs):
            if kind == "normalized":
                s2.a.data[t, 0] = s2.b.data[t, 0] = 0.5
                s2.c.data[t, 0] = s2.d.data[t, 0] = 0.5
            else:  # diffusion on a matching: swap the pair
                s2.a.data[t, 0] = s2.d.data[t, 0] = 0.0
                s2.b.data[t, 0] = s2.c.data[t, 0] = 1.0
        S = kal.KMatrix(n, [(kal.ButterflyMatrix(n, stages),
                             kal.ButterflyMatrix.identity(n))])
        Q = kal.init_permutation(n, q)
        Qinv = kal.init_permutation(n, kal._invert_perm(q))
        return kal.kmatrix_compose(Qinv, kal.kmatrix_compose(S, Q))
    raise ValueError("graph operator is not exactly representable at butterfly "
                     "width 1; use a circulant or matching adjacency")


def parameter_groups(op: XDOp) -> Tuple[List[Tensor], List[Tensor]]:
    """Disjoint (architecture parameters, model weights) of one op."""
    arch = op.params.K.parameters() + op.params.L.parameters() + op.params.M.parameters()
    if not op.params.b_frozen:
        arch.append(op.params.b)
    if not op.params.C_frozen:
        arch.append(op.params.C)
    return arch, [op.weight]


def xd_madds(op: XDOp, ) -> int:
    """Complex multiply-adds of one un-batched forward pass."""
    c_out, c_in = op.filter_shape[:2]
    nvol = int(np.prod(op.n))
    def kron_madds(Ks: KroneckerK) -> int:
        total = 0
        for K in Ks.axes:
            total += (nvol // K.n) * kal.kmatrix_madds(K)
        return total
    total = c_in * kron_madds(op.params.M) + c_out * kron_madds(op.params.K)
    total += c_out * c_in * kron_madds(op.params.L)
    total += c_out * c_in * nvol * 2  # gate scaling + diagonal product
    return total
