"""Minimal reverse-mode automatic differentiation over real and complex tensors.

The engine covers exactly the primitive set needed by XD supernets: elementwise
arithmetic, complex packing/unpacking, padding/slicing/gathers, reductions,
butterfly-stage application, dense linear maps, and the three losses
(mean-squared error, relative-L2, softmax cross-entropy).

Complex differentiation uses the real-pair convention: for a real scalar loss
``L`` and a complex quantity ``z``, the gradient reported for ``z`` is the
complex number ``dL/dRe(z) + 1j * dL/dIm(z)``.  This is equivalent to treating
every complex tensor as two real tensors and avoids Wirtinger calculus
entirely; all losses are real so nothing is lost.

Tapes are eager, append-only and single-use: every primitive that touches a
tracked tensor while a tape is active appends one node (inputs, output, saved
values, VJP); ``Tape.backward`` walks the node list once in reverse.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Callable, Dict, Iterable, List, Mapping, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "GradReport",
    "GradCheckError",
    "tensor",
    "add",
    "sub",
    "neg",
    "mul",
    "scale",
    "matmul",
    "reshape",
    "moveaxis",
    "gather",
    "zero_pad",
    "sum_",
    "mean_",
    "real",
    "imag",
    "to_complex",
    "sqrt",
    "reciprocal",
    "relu",
    "butterfly_stage",
    "mse",
    "rel_l2",
    "softmax_cross_entropy",
    "grad_check",
]

_REAL_DTYPES = (np.float32, np.float64)
_COMPLEX_DTYPES = (np.complex64, np.complex128)


class Tensor:
    """Dense N-d array with an optional reverse-mode tape hook.

    ``requires_grad`` marks leaves; intermediate results produced while a tape
    is active are tracked automatically.  ``grad`` is populated by
    ``Tape.backward`` for leaves.
    """

    __slots__ = ("data", "requires_grad", "grad", "_tracked", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str = ""):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype)
        elif arr.dtype not in _REAL_DTYPES + _COMPLEX_DTYPES:
            arr = arr.astype(np.complex128 if np.iscomplexobj(arr) else np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._tracked = False
        self.name = name

    # -- convenience views ---------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    @property
    def is_complex(self) -> bool:
        return np.iscomplexobj(self.data)

    def item(self):
        return self.data.item()

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):  # pragma: no cover - debugging aid
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    # -- operator sugar ------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)


def tensor(data, requires_grad: bool = False, dtype=None, name: str = "") -> Tensor:
    """Create a leaf tensor."""
    return Tensor(data, requires_grad=requires_grad, dtype=dtype, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

_TAPE_STACK: List["Tape"] = []


@dataclasses.dataclass
class _Node:
    inputs: tuple
    output: Tensor
    vjp: Callable


class Tape:
    """Append-only recording of primitive applications; single-use backward."""

    def __init__(self):
        self.nodes: List[_Node] = []
        self._used = False

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def backward(self, loss: Tensor) -> Dict[Tensor, np.ndarray]:
        """Accumulate gradients of a real scalar loss into every recorded leaf.

        Returns a map from leaf Tensor to gradient array (also mirrored onto
        ``leaf.grad``).  A tape may be walked only once.
        """
        if self._used:
            raise RuntimeError("tape already consumed; re-record before calling backward again")
        self._used = True
        if not isinstance(loss, Tensor):
            raise TypeError("backward expects a Tensor loss")
        if loss.size != 1:
            raise ValueError(f"loss must be scalar, got shape {loss.shape}")
        if np.iscomplexobj(loss.data):
            raise ValueError("cannot differentiate a complex-valued loss; take real() first")
        if not (loss._tracked or loss.requires_grad):
            raise ValueError("loss is not recorded on this tape")

        grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        keep: Dict[int, Tensor] = {id(loss): loss}
        for node in reversed(self.nodes):
            g_out = grads.get(id(node.output))
            if g_out is None:
                continue
            contribs = node.vjp(g_out)
            for t, g in zip(node.inputs, contribs):
                if g is None or not isinstance(t, Tensor):
                    continue
                if not (t.requires_grad or t._tracked):
                    continue
                g = _coerce_grad(g, t)
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
                    keep[key] = t
        out: Dict[Tensor, np.ndarray] = {}
        for key, t in keep.items():
            if t.requires_grad:
                t.grad = grads[key]
                out[t] = grads[key]
        return out


def _active_tape() -> "Tape | None":
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _coerce_grad(g: np.ndarray, t: Tensor) -> np.ndarray:
    """Match a cotangent to the dtype of its tensor.

    A real tensor feeding a complex computation has no imaginary degree of
    freedom, so only the real part of the complex cotangent survives.
    """
    g = np.asarray(g)
    if not np.iscomplexobj(t.data) and np.iscomplexobj(g):
        g = g.real
    if g.shape != t.data.shape:
        g = np.broadcast_to(g, t.data.shape).copy()
    return np.ascontiguousarray(g)


def _record(inputs: Sequence, out: Tensor, vjp: Callable) -> Tensor:
    tape = _active_tape()
    if tape is None:
        return out
    if any(isinstance(t, Tensor) and (t.requires_grad or t._tracked) for t in inputs):
        out._tracked = True
        tape.nodes.append(_Node(tuple(inputs), out, vjp))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a cotangent over axes introduced or stretched by broadcasting."""
    g = np.asarray(g)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, dim in enumerate(shape):
        if dim == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data + b.data)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record((a, b), out, vjp)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data - b.data)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record((a, b), out, vjp)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(-a.data)
    return _record((a,), out, lambda g: (-g,))


def mul(a, b) -> Tensor:
    """Broadcasting elementwise product; complex-bilinear VJP uses conjugates."""
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data * b.data)

    def vjp(g):
        return (
            _unbroadcast(np.conj(b.data) * g, a.shape),
            _unbroadcast(np.conj(a.data) * g, b.shape),
        )

    return _record((a, b), out, vjp)


def scale(a, s) -> Tensor:
    """Multiply by a constant python/numpy scalar."""
    a = _as_tensor(a)
    out = Tensor(a.data * s)
    return _record((a,), out, lambda g: (np.conj(s) * g,))


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data @ b.data)

    def vjp(g):
        ga = g @ np.conj(b.data).T if b.data.ndim == 2 else np.outer(g, np.conj(b.data))
        gb = np.conj(a.data).T @ g
        return ga, gb

    return _record((a, b), out, vjp)


# ---------------------------------------------------------------------------
# Shape / indexing
# ---------------------------------------------------------------------------

def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(x.data.reshape(shape))
    return _record((x,), out, lambda g: (np.asarray(g).reshape(x.shape),))


def moveaxis(x, src: int, dst: int) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(np.moveaxis(x.data, src, dst))
    return _record((x,), out, lambda g: (np.moveaxis(np.asarray(g), dst, src),))


def gather(x, idx, axis: int = 0) -> Tensor:
    """Take ``x[..., idx, ...]`` along ``axis``; duplicate indices allowed."""
    x = _as_tensor(x)
    idx = np.asarray(idx, dtype=np.intp)
    if idx.ndim != 1:
        raise ValueError("gather index must be 1-d")
    n = x.shape[axis]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"gather index out of range for axis size {n}")
    out = Tensor(np.take(x.data, idx, axis=axis))

    def vjp(g):
        gm = np.moveaxis(np.asarray(g), axis, 0)
        gx = np.zeros((n,) + gm.shape[1:], dtype=g.dtype)
        np.add.at(gx, idx, gm)
        return (np.moveaxis(gx, 0, axis),)

    return _record((x,), out, vjp)


def zero_pad(x, axis: int, before: int, after: int) -> Tensor:
    x = _as_tensor(x)
    if before < 0 or after < 0:
        raise ValueError("padding must be nonnegative")
    widths = [(0, 0)] * x.data.ndim
    widths[axis] = (before, after)
    out = Tensor(np.pad(x.data, widths))

    def vjp(g):
        sl = [slice(None)] * x.data.ndim
        sl[axis] = slice(before, before + x.shape[axis])
        return (np.asarray(g)[tuple(sl)],)

    return _record((x,), out, vjp)


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(np.sum(x.data, axis=axis, keepdims=keepdims))

    def vjp(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            axes = (axis,) if np.isscalar(axis) else tuple(axis)
            for ax in sorted(a % x.data.ndim for a in axes):
                g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, x.shape),)

    return _record((x,), out, vjp)


def mean_(x, axis=None) -> Tensor:
    x = _as_tensor(x)
    count = x.size if axis is None else x.shape[axis]
    return scale(sum_(x, axis=axis), 1.0 / count)


# ---------------------------------------------------------------------------
# Complex packing
# ---------------------------------------------------------------------------

def real(x) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(np.ascontiguousarray(x.data.real))

    def vjp(g):
        # dL/dRe(x) = g, dL/dIm(x) = 0 -> packed complex gradient is g + 0j.
        return (np.asarray(g).astype(np.result_type(g.dtype, np.complex128)),)

    return _record((x,), out, vjp)


def imag(x) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(np.ascontiguousarray(x.data.imag))

    def vjp(g):
        return (1j * np.asarray(g),)

    return _record((x,), out, vjp)


def to_complex(re, im=None) -> Tensor:
    """Build ``re + 1j*im`` from real tensors (``im`` defaults to zero)."""
    re = _as_tensor(re)
    if im is None:
        out = Tensor(re.data.astype(np.complex128))
        return _record((re,), out, lambda g: (np.asarray(g).real,))
    im = _as_tensor(im)
    out = Tensor(re.data + 1j * im.data)

    def vjp(g):
        g = np.asarray(g)
        return g.real, g.imag

    return _record((re, im), out, vjp)


# ---------------------------------------------------------------------------
# Nonlinearities / losses
# ---------------------------------------------------------------------------

def sqrt(x) -> Tensor:
    x = _as_tensor(x)
    if np.iscomplexobj(x.data):
        raise TypeError("sqrt is defined for real tensors only")
    out = Tensor(np.sqrt(x.data))

    def vjp(g):
        return (np.asarray(g) * 0.5 / np.maximum(out.data, 1e-300),)

    return _record((x,), out, vjp)


def reciprocal(x) -> Tensor:
    x = _as_tensor(x)
    if np.iscomplexobj(x.data):
        raise TypeError("reciprocal is defined for real tensors only")
    out = Tensor(1.0 / x.data)

    def vjp(g):
        return (-np.asarray(g) * out.data * out.data,)

    return _record((x,), out, vjp)


def relu(x) -> Tensor:
    x = _as_tensor(x)
    if np.iscomplexobj(x.data):
        raise TypeError("relu is defined for real tensors only")
    out = Tensor(np.maximum(x.data, 0.0))
    mask = (x.data > 0).astype(x.data.dtype)  # subgradient at 0 is 0
    return _record((x,), out, lambda g: (np.asarray(g) * mask,))


def mse(pred, target) -> Tensor:
    pred, target = _as_tensor(pred), _as_tensor(target)
    if np.iscomplexobj(pred.data) or np.iscomplexobj(target.data):
        raise TypeError("mse expects real tensors")
    diff = pred.data - target.data
    out = Tensor(np.mean(diff * diff))
    n = diff.size

    def vjp(g):
        gd = (2.0 / n) * diff * np.asarray(g)
        return gd, -gd

    return _record((pred, target), out, vjp)


def rel_l2(pred, target, batch_axis: int = 0) -> Tensor:
    """Mean over the batch of ||pred_i - target_i||_2 / ||target_i||_2."""
    pred, target = _as_tensor(pred), _as_tensor(target)
    if np.iscomplexobj(pred.data) or np.iscomplexobj(target.data):
        raise TypeError("rel_l2 expects real tensors")
    p = np.moveaxis(pred.data, batch_axis, 0).reshape(pred.shape[batch_axis], -1)
    t = np.moveaxis(target.data, batch_axis, 0).reshape(pred.shape[batch_axis], -1)
    d = p - t
    num = np.sqrt(np.sum(d * d, axis=1))
    den = np.sqrt(np.sum(t * t, axis=1))
    if np.any(den == 0):
        raise ValueError("rel_l2 target has a zero-norm sample")
    b = p.shape[0]
    out = Tensor(np.mean(num / den))

    def vjp(g):
        safe = np.maximum(num, 1e-300)
        gp = (np.asarray(g) / b) * d / (safe * den)[:, None]
        gp = np.moveaxis(gp.reshape(np.moveaxis(pred.data, batch_axis, 0).shape), 0, batch_axis)
        return gp, None

    return _record((pred, target), out, vjp)


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean cross-entropy of ``logits`` (B, C) against integer ``labels`` (B,)."""
    logits = _as_tensor(logits)
    labels = np.asarray(labels.data if isinstance(labels, Tensor) else labels, dtype=np.intp)
    if np.iscomplexobj(logits.data):
        raise TypeError("softmax_cross_entropy expects real logits")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    probs = ez / ez.sum(axis=1, keepdims=True)
    bsz = z.shape[0]
    nll = -(z - zmax - np.log(ez.sum(axis=1, keepdims=True)))[np.arange(bsz), labels]
    out = Tensor(np.mean(nll))

    def vjp(g):
        gz = probs.copy()
        gz[np.arange(bsz), labels] -= 1.0
        return (gz * (np.asarray(g) / bsz), None)

    return _record((logits, labels if isinstance(labels, Tensor) else None), out, vjp)


# ---------------------------------------------------------------------------
# Butterfly stage (the structured-kernel primitive)
# ---------------------------------------------------------------------------

def butterfly_stage(x, a, b, c, d, axis: int, block: int) -> Tensor:
    """Apply one butterfly stage of block length ``block`` along ``axis``.

    The fiber of length n is viewed as n/block contiguous blocks; within each
    block the first half ("top") and second half ("bottom") are combined as
    ``top' = a*top + b*bot`` and ``bot' = c*top + d*bot`` with the four
    diagonals ``a..d`` of shape (n/block, block/2).
    """
    x = _as_tensor(x)
    a, b, c, d = (_as_tensor(t) for t in (a, b, c, d))
    n = x.shape[axis]
    if block < 2 or n % block:
        raise ValueError(f"block {block} incompatible with fiber length {n}")
    nb, half = n // block, block // 2
    for t in (a, b, c, d):
        if t.shape != (nb, half):
            raise ValueError(f"diagonal shape {t.shape} != {(nb, half)}")

    xm = np.moveaxis(x.data, axis, -1)
    lead = xm.shape[:-1]
    xr = xm.reshape(lead + (nb, 2, half))
    top, bot = xr[..., 0, :], xr[..., 1, :]
    out_r = np.empty(
        lead + (nb, 2, half),
        dtype=np.result_type(xr.dtype, a.dtype, b.dtype, c.dtype, d.dtype),
    )
    out_r[..., 0, :] = a.data * top + b.data * bot
    out_r[..., 1, :] = c.data * top + d.data * bot
    out = Tensor(np.moveaxis(out_r.reshape(lead + (n,)), -1, axis))

    def vjp(g):
        gm = np.moveaxis(np.asarray(g), axis, -1).reshape(lead + (nb, 2, half))
        g_top, g_bot = gm[..., 0, :], gm[..., 1, :]
        gi = np.empty_like(gm)
        gi[..., 0, :] = np.conj(a.data) * g_top + np.conj(c.data) * g_bot
        gi[..., 1, :] = np.conj(b.data) * g_top + np.conj(d.data) * g_bot
        gx = np.moveaxis(gi.reshape(lead + (n,)), -1, axis)
        batch_axes = tuple(range(len(lead)))
        ga = np.sum(np.conj(top) * g_top, axis=batch_axes)
        gb = np.sum(np.conj(bot) * g_top, axis=batch_axes)
        gc = np.sum(np.conj(top) * g_bot, axis=batch_axes)
        gd = np.sum(np.conj(bot) * g_bot, axis=batch_axes)
        return gx, ga, gb, gc, gd

    return _record((x, a, b, c, d), out, vjp)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

class GradCheckError(RuntimeError):
    pass


@dataclasses.dataclass
class GradReport:
    """Max relative error per parameter between analytic and FD gradients."""

    per_parameter: Dict[str, float]
    h: float

    def __post_init__(self):
        for name, err in self.per_parameter.items():
            if not np.isfinite(err) or err < 0:
                raise GradCheckError(f"non-finite gradient-check error for parameter {name!r}")

    @property
    def max_error(self) -> float:
        return max(self.per_parameter.values()) if self.per_parameter else 0.0


def grad_check(fn: Callable[[Mapping[str, Tensor]], Tensor],
               point: Mapping[str, Tensor], h: float = 1e-5) -> GradReport:
    """Compare reverse-mode gradients of ``fn`` against central differences.

    ``fn`` maps a dict of named parameter tensors to a real scalar Tensor; the
    analytic gradient is taken at ``point`` and each parameter entry (real and
    imaginary parts separately for complex tensors) is perturbed by ±h.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    params = {k: Tensor(np.array(v.data, copy=True), requires_grad=True, name=k)
              for k, v in point.items()}
    with Tape() as tape:
        loss = fn(params)
    grads = tape.backward(loss)

    def eval_at() -> float:
        val = fn({k: Tensor(v.data) for k, v in params.items()}).item()
        if not np.isfinite(val):
            raise GradCheckError("non-finite loss value during finite differencing")
        return float(val)

    report: Dict[str, float] = {}
    for name, p in params.items():
        analytic = grads.get(p)
        if analytic is None:
            analytic = np.zeros_like(p.data)
        fd = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        fd_flat = fd.reshape(-1)
        steps = (1.0, 1j) if np.iscomplexobj(p.data) else (1.0,)
        for i in range(flat.size):
            orig = flat[i]
            acc = 0.0 + 0.0j if np.iscomplexobj(p.data) else 0.0
            for step in steps:
                flat[i] = orig + h * step
                f_plus = eval_at()
                flat[i] = orig - h * step
                f_minus = eval_at()
                flat[i] = orig
                acc = acc + step * (f_plus - f_minus) / (2 * h)
            fd_flat[i] = acc
        num = np.max(np.abs(analytic - fd)) if fd.size else 0.0
        den = max(np.max(np.abs(fd)) if fd.size else 0.0, 1e-12)
        err = float(num / den)
        if not np.isfinite(err):
            raise GradCheckError(f"non-finite gradient for parameter {name!r}")
        report[name] = err
    return GradReport(per_parameter=report, h=h)
