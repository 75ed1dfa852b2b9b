"""Butterfly factorizations and Kaleidoscope (K-) matrices.

Representation
--------------
A butterfly *stage* of block length k on dimension n is block-diagonal with
n/k butterfly factors: 2x2-block matrices whose four k/2 x k/2 blocks are
diagonal.  A ``ButterflyMatrix`` is an ordered product of log2(n) stages, one
per block length in {2, 4, ..., n}, together with a fixed routing permutation
applied after the stages (outermost).  The routing permutation is structural
(it carries no trainable values, only indices); the learnable content of a
butterfly is exactly its stage diagonals.

The routing slot is how bit-reversal is absorbed into B_right for the DFT
construction: a bit-reversal permutation is an involution but is *not* a
product of width-1 butterfly stages, so it rides along as explicit routing.

A ``KMatrix`` of depth d is a product of d pairs (B_left, B_right), each pair
representing B_left @ B_right^T; ``KroneckerK`` holds one KMatrix per tensor
axis and represents their Kronecker product.

Stage lists are stored in application order: ``stages[0]`` touches the input
first.  Materializations are ordinary matrix products with the first-applied
stage rightmost.
"""

from __future__ import annotations

import dataclasses
import math
import os
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

__all__ = [
    "ButterflyFactor",
    "ButterflyStage",
    "ButterflyMatrix",
    "KMatrix",
    "KroneckerK",
    "MaterializationCapError",
    "butterfly_apply",
    "butterfly_apply_transpose",
    "kmatrix_apply",
    "kmatrix_materialize",
    "kron_apply",
    "kmatrix_compose",
    "kmatrix_transpose",
    "kmatrix_parameters",
    "butterfly_madds",
    "kmatrix_madds",
    "init_identity",
    "init_dft",
    "init_idft",
    "init_permutation",
    "init_sparse",
    "bit_reversal_indices",
    "MATERIALIZE_CAP",
]

MATERIALIZE_CAP = 1024

ArrayLike = Union[np.ndarray, Tensor]


class MaterializationCapError(RuntimeError):
    pass


def _check_pow2(n: int) -> int:
    if n < 2 or n & (n - 1):
        raise ValueError(f"dimension must be a power of two >= 2, got {n}")
    return int(round(math.log2(n)))


@dataclasses.dataclass
class ButterflyFactor:
    """One butterfly factor: four diagonal blocks of a 2x2-block matrix."""

    size: int
    d1: np.ndarray
    d2: np.ndarray
    d3: np.ndarray
    d4: np.ndarray

    def __post_init__(self):
        _check_pow2(self.size)
        half = self.size // 2
        for name in ("d1", "d2", "d3", "d4"):
            v = np.asarray(getattr(self, name), dtype=np.complex128)
            if v.shape != (half,):
                raise ValueError(f"{name} must have length {half}, got {v.shape}")
            setattr(self, name, v)

    def dense(self) -> np.ndarray:
        half = self.size // 2
        out = np.zeros((self.size, self.size), dtype=np.complex128)
        idx = np.arange(half)
        out[idx, idx] = self.d1
        out[idx, idx + half] = self.d2
        out[idx + half, idx] = self.d3
        out[idx + half, idx + half] = self.d4
        return out


class ButterflyStage:
    """A block-diagonal stage of butterfly factors of one block length.

    The four diagonals are stored stacked over blocks as trainable Tensors of
    shape (n/block, block/2).
    """

    __slots__ = ("n", "block", "a", "b", "c", "d")

    def __init__(self, n: int, block: int, a, b, c, d):
        _check_pow2(n)
        _check_pow2(block)
        if n % block:
            raise ValueError(f"block {block} does not tile dimension {n}")
        nb, half = n // block, block // 2
        self.n, self.block = n, block

        def as_param(v):
            t = v if isinstance(v, Tensor) else Tensor(np.asarray(v), dtype=np.complex128)
            if t.shape != (nb, half):
                raise ValueError(f"stage diagonal shape {t.shape} != {(nb, half)}")
            return t

        self.a, self.b, self.c, self.d = (as_param(v) for v in (a, b, c, d))

    @classmethod
    def identity(cls, n: int, block: int) -> "ButterflyStage":
        nb, half = n // block, block // 2
        one = np.ones((nb, half), dtype=np.complex128)
        zero = np.zeros((nb, half), dtype=np.complex128)
        return cls(n, block, one, zero, zero, one.copy())

    def factors(self) -> List[ButterflyFactor]:
        return [
            ButterflyFactor(self.block, self.a.data[i], self.b.data[i],
                            self.c.data[i], self.d.data[i])
            for i in range(self.n // self.block)
        ]

    def transposed_views(self) -> Tuple[Tensor, Tensor, Tensor, Tensor]:
        """Diagonals of the transposed stage (swap the off-diagonal blocks)."""
        return self.a, self.c, self.b, self.d

    def scale_rows(self, w: np.ndarray) -> None:
        """In-place left-multiplication of this stage by diag(w)."""
        w = np.asarray(w, dtype=np.complex128).reshape(self.n // self.block, 2, self.block // 2)
        self.a.data = self.a.data * w[:, 0]
        self.b.data = self.b.data * w[:, 0]
        self.c.data = self.c.data * w[:, 1]
        self.d.data = self.d.data * w[:, 1]

    def copy(self) -> "ButterflyStage":
        return ButterflyStage(self.n, self.block, self.a.data.copy(), self.b.data.copy(),
                              self.c.data.copy(), self.d.data.copy())


class ButterflyMatrix:
    """Product of log2(n) butterfly stages plus an optional routing permutation.

    ``materialize(B) = P_perm @ stages[-1] @ ... @ stages[0]`` where ``P_perm``
    is the gather matrix ``y = x[perm]``.
    """

    __slots__ = ("n", "stages", "perm")

    def __init__(self, n: int, stages: Sequence[ButterflyStage],
                 perm: Optional[np.ndarray] = None):
        m = _check_pow2(n)
        stages = list(stages)
        if len(stages) != m:
            raise ValueError(f"expected {m} stages for n={n}, got {len(stages)}")
        blocks = sorted(s.block for s in stages)
        if blocks != [2 ** (i + 1) for i in range(m)]:
            raise ValueError(f"stage block lengths {blocks} must cover 2..n exactly once")
        for s in stages:
            if s.n != n:
                raise ValueError("stage dimension mismatch")
        self.n = n
        self.stages = stages
        if perm is not None:
            perm = np.asarray(perm, dtype=np.intp)
            if sorted(perm.tolist()) != list(range(n)):
                raise ValueError("routing perm must be a bijection on [n]")
        self.perm = perm

    @classmethod
    def identity(cls, n: int) -> "ButterflyMatrix":
        m = _check_pow2(n)
        return cls(n, [ButterflyStage.identity(n, 2 ** (i + 1)) for i in range(m)])

    def copy(self) -> "ButterflyMatrix":
        return ButterflyMatrix(self.n, [s.copy() for s in self.stages],
                               None if self.perm is None else self.perm.copy())

    def parameters(self) -> List[Tensor]:
        out: List[Tensor] = []
        for s in self.stages:
            out.extend((s.a, s.b, s.c, s.d))
        return out

    def scale_output(self, w: np.ndarray) -> None:
        """In-place: materialization becomes diag(w) @ old materialization."""
        if self.perm is not None:
            wp = np.empty(self.n, dtype=np.complex128)
            wp[self.perm] = np.asarray(w, dtype=np.complex128)
        else:
            wp = np.asarray(w, dtype=np.complex128)
        self.stages[-1].scale_rows(wp)


def _invert_perm(p: np.ndarray) -> np.ndarray:
    inv = np.empty_like(p)
    inv[p] = np.arange(p.size, dtype=p.dtype)
    return inv


def _wrap(x: ArrayLike) -> Tuple[Tensor, bool]:
    if isinstance(x, Tensor):
        return x, True
    return Tensor(np.asarray(x)), False


def butterfly_apply(B: ButterflyMatrix, x: ArrayLike, axis: int = 0) -> ArrayLike:
    """Apply B along ``axis`` of ``x`` in O(n log n) multiply-adds per fiber."""
    xt, was_tensor = _wrap(x)
    if xt.shape[axis] != B.n:
        raise ValueError(f"axis size {xt.shape[axis]} != butterfly dimension {B.n}")
    for s in B.stages:
        xt = ad.butterfly_stage(xt, s.a, s.b, s.c, s.d, axis=axis, block=s.block)
    if B.perm is not None:
        xt = ad.gather(xt, B.perm, axis=axis)
    return xt if was_tensor else xt.data


def butterfly_apply_transpose(B: ButterflyMatrix, x: ArrayLike, axis: int = 0) -> ArrayLike:
    """Apply B^T (not conjugated) along ``axis``."""
    xt, was_tensor = _wrap(x)
    if xt.shape[axis] != B.n:
        raise ValueError(f"axis size {xt.shape[axis]} != butterfly dimension {B.n}")
    if B.perm is not None:
        xt = ad.gather(xt, _invert_perm(B.perm), axis=axis)
    for s in reversed(B.stages):
        a, b, c, d = s.transposed_views()
        xt = ad.butterfly_stage(xt, a, b, c, d, axis=axis, block=s.block)
    return xt if was_tensor else xt.data


class KMatrix:
    """Depth-d product of (B_left, B_right) butterfly pairs."""

    __slots__ = ("n", "factors")

    def __init__(self, n: int, factors: Sequence[Tuple[ButterflyMatrix, ButterflyMatrix]]):
        _check_pow2(n)
        factors = [tuple(p) for p in factors]
        if not factors:
            raise ValueError("KMatrix needs at least one factor pair")
        for bl, br in factors:
            if bl.n != n or br.n != n:
                raise ValueError("factor dimension mismatch")
        self.n = n
        self.factors = factors

    @property
    def depth(self) -> int:
        return len(self.factors)

    def copy(self) -> "KMatrix":
        return KMatrix(self.n, [(bl.copy(), br.copy()) for bl, br in self.factors])

    def parameters(self) -> List[Tensor]:
        out: List[Tensor] = []
        for bl, br in self.factors:
            out.extend(bl.parameters())
            out.extend(br.parameters())
        return out


class KroneckerK:
    """One KMatrix per tensor axis; represents their Kronecker product."""

    __slots__ = ("axes",)

    def __init__(self, axes: Sequence[KMatrix]):
        axes = list(axes)
        if not axes:
            raise ValueError("KroneckerK needs at least one axis")
        self.axes = axes

    @property
    def dims(self) -> Tuple[int, ...]:
        return tuple(K.n for K in self.axes)

    def copy(self) -> "KroneckerK":
        return KroneckerK([K.copy() for K in self.axes])

    def parameters(self) -> List[Tensor]:
        out: List[Tensor] = []
        for K in self.axes:
            out.extend(K.parameters())
        return out


def kmatrix_apply(K: KMatrix, x: ArrayLike, axis: int = 0) -> ArrayLike:
    """Replace every 1-d fiber of ``x`` along ``axis`` by K times the fiber."""
    xt, was_tensor = _wrap(x)
    if axis >= xt.data.ndim or axis < -xt.data.ndim:
        raise ValueError(f"axis {axis} out of range for rank {xt.data.ndim}")
    if xt.shape[axis] != K.n:
        raise ValueError(f"axis size {xt.shape[axis]} != K dimension {K.n}")
    for bl, br in reversed(K.factors):
        xt = butterfly_apply_transpose(br, xt, axis=axis)
        xt = butterfly_apply(bl, xt, axis=axis)
    return xt if was_tensor else xt.data


def kmatrix_materialize(K: KMatrix, cap: int = None) -> np.ndarray:
    """Dense n x n form of K (test/export surface; capped by default)."""
    cap = MATERIALIZE_CAP if cap is None else cap
    if K.n > cap:
        raise MaterializationCapError(
            f"materialization of n={K.n} exceeds cap {cap}")
    eye = np.eye(K.n, dtype=np.complex128)
    return np.asarray(kmatrix_apply(K, eye, axis=0))


def kron_apply(Ks: KroneckerK, x: ArrayLike, spatial_axes: Sequence[int]) -> ArrayLike:
    """Apply the Kronecker product along the given spatial axes of ``x``."""
    if len(spatial_axes) != len(Ks.axes):
        raise ValueError("one spatial axis required per Kronecker factor")
    out = x
    for K, axis in zip(Ks.axes, spatial_axes):
        out = kmatrix_apply(K, out, axis=axis)
    return out


def kmatrix_compose(K1: KMatrix, K2: KMatrix) -> KMatrix:
    """K-matrix whose materialization is materialize(K1) @ materialize(K2)."""
    if K1.n != K2.n:
        raise ValueError(f"dimension mismatch: {K1.n} vs {K2.n}")
    return KMatrix(K1.n, list(K1.factors) + list(K2.factors))


def kmatrix_transpose(K: KMatrix) -> KMatrix:
    """Transpose: reverse pair order and swap the roles within each pair."""
    return KMatrix(K.n, [(br, bl) for bl, br in reversed(K.factors)])


def kmatrix_parameters(K) -> List[Tensor]:
    return K.parameters()


def butterfly_madds(n: int) -> int:
    """Complex multiply-adds of one butterfly apply: 2n log2(n) exactly."""
    return 2 * n * _check_pow2(n)


def kmatrix_madds(K: KMatrix) -> int:
    return 2 * K.depth * butterfly_madds(K.n)


# ---------------------------------------------------------------------------
# Constructions
# ---------------------------------------------------------------------------

def bit_reversal_indices(n: int) -> np.ndarray:
    m = _check_pow2(n)
    idx = np.arange(n)
    rev = np.zeros_like(idx)
    for _ in range(m):
        rev = (rev << 1) | (idx & 1)
        idx >>= 1
    return rev.astype(np.intp)


def _identity_pair(n: int) -> Tuple[ButterflyMatrix, ButterflyMatrix]:
    return ButterflyMatrix.identity(n), ButterflyMatrix.identity(n)


def init_identity(n: int, depth: int) -> KMatrix:
    if depth < 1:
        raise ValueError("depth must be >= 1")
    _check_pow2(n)
    return KMatrix(n, [_identity_pair(n) for _ in range(depth)])


def _dft_twiddle_stages(n: int, conj: bool = False) -> List[ButterflyStage]:
    """Decimation-in-time twiddle stages in application order (block 2 first)."""
    m = _check_pow2(n)
    corrupt = os.environ.get("XDOPS_CORRUPT_TWIDDLE", "") not in ("", "0")
    stages = []
    for i in range(m):
        k = 2 ** (i + 1)
        nb, half = n // k, k // 2
        omega = np.exp((2j if conj else -2j) * np.pi * np.arange(half) / k)
        if corrupt and k == n:
            omega = omega.copy()
            omega[-1] = -omega[-1]  # hidden test hook: flipped twiddle sign
        ones = np.ones((nb, half), dtype=np.complex128)
        tw = np.tile(omega, (nb, 1))
        stages.append(ButterflyStage(n, k, ones, tw, ones.copy(), -tw))
    return stages


def _bitrev_butterfly(n: int) -> ButterflyMatrix:
    """Identity stages with bit-reversal routing; symmetric, so B = B^T."""
    m = _check_pow2(n)
    stages = [ButterflyStage.identity(n, 2 ** (i + 1)) for i in range(m)]
    return ButterflyMatrix(n, stages, perm=bit_reversal_indices(n))


def init_dft(n: int) -> KMatrix:
    """Depth-1 K-matrix equal to the unnormalized DFT F[j,k] = exp(-2πi jk/n)."""
    if n == 1:
        raise ValueError("n must be >= 2")
    b_left = ButterflyMatrix(n, _dft_twiddle_stages(n))
    return KMatrix(n, [(b_left, _bitrev_butterfly(n))])


def init_idft(n: int) -> KMatrix:
    """Depth-1 K-matrix equal to the exact inverse DFT (1/n) conj(F)."""
    if n == 1:
        raise ValueError("n must be >= 2")
    stages = _dft_twiddle_stages(n, conj=True)
    stages[0].scale_rows(np.full(n, 1.0 / n))
    b_left = ButterflyMatrix(n, stages)
    return KMatrix(n, [(b_left, _bitrev_butterfly(n))])


def init_permutation(n: int, perm: Sequence[int]) -> KMatrix:
    """Depth-2 K-matrix materializing exactly to the gather y = x[perm]."""
    _check_pow2(n)
    perm = np.asarray(perm, dtype=np.intp)
    if sorted(perm.tolist()) != list(range(n)):
        raise ValueError("perm must be a bijection on [n]")
    m = _check_pow2(n)
    stages = [ButterflyStage.identity(n, 2 ** (i + 1)) for i in range(m)]
    b_left = ButterflyMatrix(n, stages, perm=perm.copy())
    return KMatrix(n, [(b_left, ButterflyMatrix.identity(n)), _identity_pair(n)])


# -- sparse construction ----------------------------------------------------
#
# An n-sparse matrix S factors as S = H^T @ G where G has one (scaled) nonzero
# per row with nondecreasing column indices and H has one unit nonzero per row
# with nondecreasing rows after a sort.  Each such "monotone gather" fits in a
# single (B_left, B_right) pair: B_right is pure routing (identity stages plus
# an input permutation placing source k at slot k) and B_left is a descending
# broadcast butterfly configured by interval splitting, the classic copy-
# network argument: source k must reach the contiguous slot interval of its
# run, intervals are disjoint, ordered, and cover [0, n), and a cell whose
# interval crosses a block midpoint is copied to both halves.  Concentrated
# inputs with monotone target intervals never collide on a switch output.
# Scaling (and zeroing of filler slots) folds into the last stage.

def _broadcast_stages(n: int, starts: Sequence[int]) -> List[ButterflyStage]:
    """Descending-stage butterfly replicating slot t onto interval t.

    ``starts`` lists the first output slot of each interval; intervals are
    contiguous, in order, and cover [0, n).  Returns stages in application
    order (block n first); unused switch outputs are exact-zero rows.
    """
    m = _check_pow2(n)
    starts = list(starts)
    if not starts or starts[0] != 0 or any(b <= a for a, b in zip(starts, starts[1:])):
        raise ValueError("interval starts must be strictly increasing from 0")
    ends = [s - 1 for s in starts[1:]] + [n - 1]
    cells: List[Optional[Tuple[int, int]]] = [None] * n
    for t, (lo, hi) in enumerate(zip(starts, ends)):
        cells[t] = (lo, hi)

    stages: List[ButterflyStage] = []
    for lvl in range(m - 1, -1, -1):
        k = 2 ** (lvl + 1)
        nb, half = n // k, k // 2
        a = np.zeros((nb, half), dtype=np.complex128)
        b = np.zeros((nb, half), dtype=np.complex128)
        c = np.zeros((nb, half), dtype=np.complex128)
        d = np.zeros((nb, half), dtype=np.complex128)
        nxt: List[Optional[Tuple[int, int]]] = [None] * n
        for blk in range(nb):
            mid = blk * k + half
            for j in range(half):
                top, bot = blk * k + j, blk * k + j + half
                for sel, cell in (("top", cells[top]), ("bot", cells[bot])):
                    if cell is None:
                        continue
                    lo, hi = cell
                    if lo < mid:  # low copy -> top output (clipped)
                        if nxt[top] is not None:
                            raise RuntimeError("broadcast routing conflict")
                        nxt[top] = (lo, min(hi, mid - 1))
                        if sel == "top":
                            a[blk, j] = 1.0
                        else:
                            b[blk, j] = 1.0
                    if hi >= mid:  # high copy -> bottom output (clipped)
                        if nxt[bot] is not None:
                            raise RuntimeError("broadcast routing conflict")
                        nxt[bot] = (max(lo, mid), hi)
                        if sel == "top":
                            c[blk, j] = 1.0
                        else:
                            d[blk, j] = 1.0
        cells = nxt
        stages.append(ButterflyStage(n, k, a, b, c, d))
    assert all(cells[q] == (q, q) for q in range(n))
    return stages


def _monotone_gather_pair(n: int, src: np.ndarray, values: np.ndarray,
                          out_perm: Optional[np.ndarray] = None
                          ) -> Tuple[ButterflyMatrix, ButterflyMatrix]:
    """Pair materializing M with M[i, src[i]] = values[i] (src nondecreasing)."""
    kcnt = len(src)
    if np.any(np.diff(src) < 0):
        raise ValueError("sources must be nondecreasing")
    starts, sources = [], []
    for i in range(kcnt):
        if i == 0 or src[i] != src[i - 1]:
            starts.append(i)
            sources.append(int(src[i]))
    if not starts:  # no entries: one dummy interval, zeroed by the diagonal
        starts, sources = [0], [0]
    # Concentrate the distinct sources at slots 0..T-1; remaining inputs fill
    # the leftover slots (their columns end up exactly zero).
    in_gather = np.full(n, -1, dtype=np.intp)
    in_gather[: len(sources)] = sources
    free = iter(sorted(set(range(n)) - set(sources)))
    for q in range(n):
        if in_gather[q] < 0:
            in_gather[q] = next(free)
    b_right = ButterflyMatrix.identity(n)
    b_right.perm = _invert_perm(in_gather)

    b_left = ButterflyMatrix(n, _broadcast_stages(n, starts),
                             perm=None if out_perm is None else np.asarray(out_perm, dtype=np.intp))
    out_diag = np.zeros(n, dtype=np.complex128)
    out_diag[:kcnt] = values  # filler slots (>= kcnt) are zeroed
    if out_perm is not None:
        out_diag = out_diag[np.asarray(out_perm, dtype=np.intp)]
    b_left.scale_output(out_diag)
    return b_left, b_right


def init_sparse(n: int, entries: Iterable[Tuple[int, int, complex]]) -> KMatrix:
    """Depth-4 K-matrix materializing an n-sparse matrix (<= n nonzeros)."""
    _check_pow2(n)
    entries = [(int(r), int(c), complex(v)) for r, c, v in entries]
    if len(entries) > n:
        raise ValueError(f"unsupported: more than n={n} nonzero entries")
    seen = set()
    for r, c, _ in entries:
        if not (0 <= r < n and 0 <= c < n):
            raise ValueError(f"entry ({r},{c}) out of range for n={n}")
        if (r, c) in seen:
            raise ValueError(f"duplicate entry at ({r},{c})")
        seen.add((r, c))
    if not entries:
        zero = ButterflyMatrix.identity(n)
        zstage = zero.stages[0]
        for t in (zstage.a, zstage.b, zstage.c, zstage.d):
            t.data = np.zeros_like(t.data)
        factors = [(zero, ButterflyMatrix.identity(n))]
        factors += [_identity_pair(n) for _ in range(3)]
        return KMatrix(n, factors)

    entries.sort(key=lambda e: (e[1], e[0]))
    rows = np.array([e[0] for e in entries], dtype=np.intp)
    cols = np.array([e[1] for e in entries], dtype=np.intp)
    vals = np.array([e[2] for e in entries], dtype=np.complex128)

    # G: slot s holds vals[s] * x[cols[s]]  (cols nondecreasing by the sort);
    # its output is additionally routed by sigma so that H^T @ G sums slots
    # into their target rows.
    sigma = np.argsort(rows, kind="stable").astype(np.intp)
    sigma_full = np.concatenate([sigma, np.arange(len(entries), n, dtype=np.intp)])
    pair_g = _monotone_gather_pair(n, cols, vals, out_perm=sigma_full)
    # H: monotone unit gather onto sorted rows; S = H^T @ P_sigma @ G.
    pair_h = _monotone_gather_pair(n, rows[sigma], np.ones(len(entries)))
    bl_h, br_h = pair_h
    factors = [(br_h, bl_h), pair_g]  # (H)^T pair = swapped roles
    factors += [_identity_pair(n) for _ in range(2)]
    return KMatrix(n, factors)
