"""Backbone DAGs, supernet substitution, and the joint training loop.

A backbone is a labeled DAG: edges carry operation labels (conv, avgpool,
skip, zero, fno — searchable; maxpool, dense, relu, norm — fixed), nodes
aggregate incoming edges by summation or channel concatenation.
``substitute_backbone`` replaces every searchable edge by a warm-started
XD-operation so the supernet's forward initially equals the backbone's.

``train`` runs single-level joint optimization: model weights follow the
backbone's optimizer every step; architecture parameters follow their own
optimizer, start after the warmup epochs, and share the weight schedule's
shape.  ``arch_divergence`` measures how far each edge's architecture
parameters have moved from their warm-start values.
"""

from __future__ import annotations

import dataclasses
import time
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from . import kaleidoscope as kal
from . import optim
from . import oracles
from . import tasks
from . import xd
from .autodiff import Tape, Tensor

__all__ = [
    "Edge",
    "BackboneSpec",
    "SupernetState",
    "TrainConfig",
    "substitute_backbone",
    "backbone_forward",
    "supernet_forward",
    "train",
    "evaluate",
    "arch_divergence",
]

_SEARCHABLE = ("conv", "avgpool", "skip", "zero", "fno")
_FIXED = ("maxpool", "dense", "relu", "norm")


@dataclasses.dataclass
class Edge:
    """One backbone edge: (u, v, label) plus channel/spatial metadata."""

    u: str
    v: str
    kind: str
    c_in: int
    c_out: int
    n: Tuple[int, ...]
    params: Dict[str, object] = dataclasses.field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in _SEARCHABLE + _FIXED:
            raise ValueError(f"unknown edge label {self.kind!r}")
        self.n = (self.n,) if np.isscalar(self.n) else tuple(int(v) for v in self.n)
        if self.kind in ("skip", "zero", "avgpool", "maxpool", "relu", "norm",
                         "dense") and self.c_in != self.c_out:
            raise ValueError(f"{self.kind} edge cannot change channel count")


class BackboneSpec:
    """Labeled DAG with a single source and a single sink."""

    def __init__(self, nodes: Sequence[str], edges: Sequence[Edge],
                 input_node: str, output_node: str,
                 aggregation: Optional[Dict[str, str]] = None,
                 head: str = "none"):
        self.nodes = list(nodes)
        self.edges = list(edges)
        self.input_node = input_node
        self.output_node = output_node
        self.aggregation = dict(aggregation or {})
        if head not in ("none", "global_avg_logits"):
            raise ValueError(f"unknown head {head!r}")
        self.head = head
        for v in self.aggregation.values():
            if v not in ("sum", "concat"):
                raise ValueError(f"aggregation must be sum|concat, got {v!r}")
        self._validate()
        self.order = self._toposort()

    def _validate(self):
        names = set(self.nodes)
        if len(names) != len(self.nodes):
            raise ValueError("duplicate node names")
        for e in self.edges:
            if e.u not in names or e.v not in names:
                raise ValueError(f"edge {e.u}->{e.v} references unknown node")
        if self.input_node not in names or self.output_node not in names:
            raise ValueError("input/output node missing")
        heads = {e.v for e in self.edges}
        tails = {e.u for e in self.edges}
        sources = [v for v in self.nodes if v not in heads]
        sinks = [v for v in self.nodes if v not in tails]
        if sources != [self.input_node] or sinks != [self.output_node]:
            raise ValueError("backbone must have a single source and single sink "
                             "matching the declared input/output nodes")

    def _toposort(self) -> List[str]:
        indeg = {v: 0 for v in self.nodes}
        for e in self.edges:
            indeg[e.v] += 1
        ready = [v for v in self.nodes if indeg[v] == 0]
        order: List[str] = []
        while ready:
            v = ready.pop(0)
            order.append(v)
            for e in self.edges:
                if e.u == v:
                    indeg[e.v] -= 1
                    if indeg[e.v] == 0:
                        ready.append(e.v)
        if len(order) != len(self.nodes):
            raise ValueError("backbone graph has a cycle")
        return order

    def node_agg(self, node: str) -> str:
        return self.aggregation.get(node, "sum")

    def init_weights(self, seed: int = 0) -> Dict[int, np.ndarray]:
        """Backbone weight initialization routine (seeded, per conv/fno edge)."""
        rng = np.random.default_rng(seed)
        out: Dict[int, np.ndarray] = {}
        for idx, e in enumerate(self.edges):
            if e.kind == "conv":
                k = _as_axes(e.params.get("k", 3), len(e.n))
                fan = e.c_in * int(np.prod(k))
                out[idx] = rng.standard_normal((e.c_out, e.c_in) + k) / np.sqrt(fan)
            elif e.kind == "fno":
                modes = _as_axes(e.params.get("modes", 4), len(e.n))
                k = tuple(2 * m for m in modes)
                fan = e.c_in * int(np.prod(k))
                out[idx] = rng.standard_normal((e.c_out, e.c_in) + k) / np.sqrt(fan)
        return out


def _as_axes(v, ndim: int) -> Tuple[int, ...]:
    return (int(v),) * ndim if np.isscalar(v) else tuple(int(u) for u in v)


def make_backbone(name: str, n: int, channels: int = 4, k: int = 3) -> BackboneSpec:
    """Shipped circular-conv backbones.

    - ``cnn3_1d``: 3-layer 1-d CNN (conv-relu-conv-relu-conv, 1->c->c->1).
    - ``cnn4_2d_skip``: 4-layer 2-d CNN with skip edges around the two
      middle blocks (ResNet-style summation nodes).
    - ``cnn2d_classifier``: 2-layer 2-d CNN with a global-average logit head
      (2 classes).
    """
    c = int(channels)
    if name == "cnn3_1d":
        return BackboneSpec(
            nodes=["in", "h1", "h1r", "h2", "h2r", "out"],
            edges=[Edge("in", "h1", "conv", 1, c, n, {"k": k}),
                   Edge("h1", "h1r", "relu", c, c, n),
                   Edge("h1r", "h2", "conv", c, c, n, {"k": k}),
                   Edge("h2", "h2r", "relu", c, c, n),
                   Edge("h2r", "out", "conv", c, 1, n, {"k": k})],
            input_node="in", output_node="out")
    if name == "cnn4_2d_skip":
        nn = (n, n)
        return BackboneSpec(
            nodes=["in", "h1", "h1r", "h2", "h2r", "h3", "h3r", "out"],
            edges=[Edge("in", "h1", "conv", 1, c, nn, {"k": k}),
                   Edge("h1", "h1r", "relu", c, c, nn),
                   Edge("h1r", "h2", "conv", c, c, nn, {"k": k}),
                   Edge("h1r", "h2", "skip", c, c, nn),
                   Edge("h2", "h2r", "relu", c, c, nn),
                   Edge("h2r", "h3", "conv", c, c, nn, {"k": k}),
                   Edge("h2r", "h3", "skip", c, c, nn),
                   Edge("h3", "h3r", "relu", c, c, nn),
                   Edge("h3r", "out", "conv", c, 1, nn, {"k": k})],
            input_node="in", output_node="out")
    if name == "cnn2d_classifier":
        nn = (n, n)
        return BackboneSpec(
            nodes=["in", "h1", "h1r", "out"],
            edges=[Edge("in", "h1", "conv", 1, c, nn, {"k": k}),
                   Edge("h1", "h1r", "relu", c, c, nn),
                   Edge("h1r", "out", "conv", c, 2, nn, {"k": k})],
            input_node="in", output_node="out", head="global_avg_logits")
    raise ValueError(f"unknown backbone {name!r}")


# ---------------------------------------------------------------------------
# Reference (numpy) backbone forward — the warm-start oracle
# ---------------------------------------------------------------------------

def _fixed_dense_matrix(e: Edge, seed: int = 0) -> np.ndarray:
    if "matrix" in e.params:
        return np.asarray(e.params["matrix"], dtype=float)
    rng = np.random.default_rng(seed + 17)
    n = int(np.prod(e.n))
    return rng.standard_normal((n, n)) / np.sqrt(n)


def _edge_forward_numpy(e: Edge, w: Optional[np.ndarray], x: np.ndarray) -> np.ndarray:
    """Single-sample reference forward of one edge; x is (c_in, *n)."""
    nd = len(e.n)
    if e.kind == "conv":
        return oracles.naive_conv(w, x, e.n, e.params.get("stride", 1),
                                  e.params.get("dilation", 1), e.params.get("groups"))
    if e.kind == "avgpool":
        return oracles.naive_avgpool(x, e.n, e.params.get("k", 2),
                                     e.params.get("stride", 1),
                                     e.params.get("dilation", 1))
    if e.kind == "skip":
        return oracles.naive_skip(x, e.n)
    if e.kind == "zero":
        return oracles.naive_zero(x, e.n)
    if e.kind == "fno":
        return oracles.naive_fno(w, x, e.n, e.params.get("modes", 4))
    if e.kind == "relu":
        return np.maximum(x, 0.0)
    if e.kind == "norm":
        rms = np.sqrt(np.mean(x * x) + 1e-6)
        return x / rms
    if e.kind == "maxpool":
        k = int(e.params.get("k", 2))
        out = x.copy()
        for j in range(1, k):
            out = np.maximum(out, np.roll(x, -j, axis=tuple(range(1, 1 + nd))))
        return out
    if e.kind == "dense":
        A = _fixed_dense_matrix(e)
        flat = x.reshape(x.shape[0], -1)
        return (flat @ A.T).reshape(x.shape)
    raise ValueError(f"unknown edge label {e.kind!r}")


def backbone_forward(spec: BackboneSpec, weights: Dict[int, np.ndarray],
                     x: np.ndarray) -> np.ndarray:
    """Reference forward of the backbone on a batch (batch, c, *n) — numpy,
    built on the dense oracles, independent of the structured fast path."""
    batch = x.shape[0]
    values: Dict[str, np.ndarray] = {spec.input_node: x}
    for node in spec.order:
        incoming = [(i, e) for i, e in enumerate(spec.edges) if e.v == node]
        if not incoming:
            continue
        outs = []
        for i, e in incoming:
            src = values[e.u]
            outs.append(np.stack([_edge_forward_numpy(e, weights.get(i), src[b])
                                  for b in range(batch)]))
        if spec.node_agg(node) == "concat":
            values[node] = np.concatenate(outs, axis=1)
        else:
            values[node] = sum(outs[1:], outs[0])
    y = values[spec.output_node]
    if spec.head == "global_avg_logits":
        return y.mean(axis=tuple(range(2, y.ndim)))
    return y


# ---------------------------------------------------------------------------
# Supernet
# ---------------------------------------------------------------------------

class SupernetState:
    """The backbone with every searchable edge replaced by an XDOp."""

    def __init__(self, spec: BackboneSpec, edge_ops: Dict[int, xd.XDOp],
                 seed: int = 0):
        self.spec = spec
        self.edge_ops = edge_ops
        self.seed = seed
        self.step_count = 0
        self.epoch_count = 0
        # divergence baselines: copies of the initial architecture parameters
        self.baselines: Dict[int, List[np.ndarray]] = {
            i: [p.data.copy() for p in xd.parameter_groups(op)[0]]
            for i, op in edge_ops.items()
        }

    def parameter_groups(self) -> Tuple[List[Tensor], List[Tensor]]:
        arch: List[Tensor] = []
        weights: List[Tensor] = []
        for i in sorted(self.edge_ops):
            a, w = xd.parameter_groups(self.edge_ops[i])
            arch.extend(a)
            weights.extend(w)
        return arch, weights


def substitute_backbone(spec: BackboneSpec, seed: int = 0,
                        depth: Optional[Tuple[int, int, int]] = None,
                        freeze_bias_gates: bool = False) -> SupernetState:
    """Warm-start an XDOp on every searchable edge from the backbone weights."""
    weights = spec.init_weights(seed)
    edge_ops: Dict[int, xd.XDOp] = {}
    for i, e in enumerate(spec.edges):
        nd = len(e.n)
        if e.kind == "conv":
            op = xd.init_from_conv(e.n, e.params.get("k", 3),
                                   stride=e.params.get("stride", 1),
                                   dilation=e.params.get("dilation", 1),
                                   groups=e.params.get("groups"),
                                   channels=(e.c_out, e.c_in), ndim=nd)
            op.weight = Tensor(weights[i].copy(), requires_grad=True, name="w")
        elif e.kind == "avgpool":
            op = xd.init_avgpool(e.n, e.params.get("k", 2),
                                 stride=e.params.get("stride", 1),
                                 dilation=e.params.get("dilation", 1),
                                 channels=e.c_in, ndim=nd)
        elif e.kind == "skip":
            op = xd.init_skip(e.n, channels=e.c_in, ndim=nd)
        elif e.kind == "zero":
            op = xd.init_zero(e.n, channels=e.c_in, ndim=nd)
        elif e.kind == "fno":
            op = xd.init_fno(e.n, e.params.get("modes", 4),
                             channels=(e.c_out, e.c_in), ndim=nd)
            op.weight = Tensor(weights[i].copy(), requires_grad=True, name="w")
        elif e.kind in _FIXED:
            continue
        else:
            raise ValueError(f"unknown edge label {e.kind!r}")
        if depth is not None:
            op = xd.pad_depth(op, depth)
        if freeze_bias_gates:
            op.params.b_frozen = True
            op.params.C_frozen = True
        edge_ops[i] = op
    return SupernetState(spec, edge_ops, seed=seed)


def _fixed_edge_tensor(e: Edge, x: Tensor) -> Tensor:
    nd = len(e.n)
    spatial = tuple(range(2, 2 + nd))
    if e.kind == "relu":
        return ad.relu(x)
    if e.kind == "norm":
        feat_axes = tuple(range(1, x.data.ndim))
        count = float(np.prod(x.shape[1:]))
        ms = ad.scale(ad.sum_(ad.mul(x, x), axis=feat_axes, keepdims=True),
                      1.0 / count)
        scale = ad.reciprocal(ad.sqrt(ad.add(ms, Tensor(np.asarray(1e-6)))))
        return ad.mul(x, scale)
    if e.kind == "maxpool":
        k = int(e.params.get("k", 2))
        out = x
        for j in range(1, k):
            rolled = x
            for ax in spatial:
                idx = np.roll(np.arange(rolled.shape[ax]), -j)
                rolled = ad.gather(rolled, idx, axis=ax)
            # max(a, b) = a + relu(b - a)
            out = ad.add(out, ad.relu(ad.sub(rolled, out)))
        return out
    if e.kind == "dense":
        flat = ad.reshape(x, (x.shape[0], x.shape[1], int(np.prod(x.shape[2:]))))
        y = ad.matmul(flat, Tensor(_fixed_dense_matrix(e).T))
        return ad.reshape(y, tuple(x.shape))
    raise ValueError(f"unknown fixed edge {e.kind!r}")


def supernet_forward(state: SupernetState, x) -> Tensor:
    """Differentiable forward of the supernet on a batch (batch, c, *n)."""
    xt = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=float))
    spec = state.spec
    values: Dict[str, Tensor] = {spec.input_node: xt}
    for node in spec.order:
        incoming = [(i, e) for i, e in enumerate(spec.edges) if e.v == node]
        if not incoming:
            continue
        outs: List[Tensor] = []
        for i, e in incoming:
            src = values[e.u]
            if i in state.edge_ops:
                outs.append(xd.xd_forward(state.edge_ops[i], None, src))
            else:
                outs.append(_fixed_edge_tensor(e, src))
        if spec.node_agg(node) == "concat":
            total = sum(o.shape[1] for o in outs)
            padded = []
            before = 0
            for o in outs:
                padded.append(ad.zero_pad(o, 1, before, total - before - o.shape[1]))
                before += o.shape[1]
            acc = padded[0]
            for o in padded[1:]:
                acc = ad.add(acc, o)
        else:
            acc = outs[0]
            for o in outs[1:]:
                acc = ad.add(acc, o)
        values[node] = acc
    y = values[spec.output_node]
    if spec.head == "global_avg_logits":
        nd = y.data.ndim - 2
        return ad.scale(ad.sum_(y, axis=tuple(range(2, 2 + nd))),
                        1.0 / float(np.prod(y.shape[2:])))
    return y


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclasses.dataclass
class TrainConfig:
    weight_opt: Dict[str, object] = dataclasses.field(
        default_factory=lambda: {"algo": "adam", "lr": 1e-2})
    weight_schedule: object = "constant"
    arch_opt: Dict[str, object] = dataclasses.field(
        default_factory=lambda: {"algo": "adam", "lr": 1e-3})
    warmup_epochs: int = 0
    epochs: int = 10
    batch_size: int = 32
    seed: int = 0
    precision: str = "f64"

    def __post_init__(self):
        if not (0 <= self.warmup_epochs <= self.epochs):
            raise ValueError("warmup_epochs must lie in [0, epochs]")
        if self.precision not in ("f64",):
            raise ValueError("only f64 precision is supported")


class TrainAborted(RuntimeError):
    """Raised when training hits a non-finite loss; carries last-good state."""

    def __init__(self, epoch: int, history: List[Dict[str, object]],
                 checkpoint_blob: Optional[bytes]):
        super().__init__(f"non-finite loss at epoch {epoch}; last-good checkpoint retained")
        self.epoch = epoch
        self.history = history
        self.checkpoint_blob = checkpoint_blob


def _task_loss(kind: str, pred: Tensor, targets: np.ndarray) -> Tensor:
    if kind == "operator":
        return ad.rel_l2(pred, Tensor(targets))
    return ad.softmax_cross_entropy(pred, targets[:, 0].astype(np.intp))


def evaluate(state: SupernetState, split: tasks.Dataset,
             batch_size: int = 64) -> Dict[str, float]:
    """Deterministic metrics on a split; no parameter mutation."""
    losses: List[float] = []
    metrics: List[float] = []
    for lo in range(0, split.n_samples, batch_size):
        xb = split.inputs[lo:lo + batch_size]
        yb = split.targets[lo:lo + batch_size]
        pred = supernet_forward(state, xb).data
        if split.task_kind == "operator":
            p = pred.reshape(pred.shape[0], -1)
            t = yb.reshape(yb.shape[0], -1)
            den = np.linalg.norm(t, axis=1)
            num = np.linalg.norm(p - t, axis=1)
            rel = np.where(den > 0, num / np.maximum(den, 1e-300), num)
            losses.extend(rel.tolist())
            metrics.extend(rel.tolist())
        else:
            labels = yb[:, 0].astype(np.intp)
            zmax = pred.max(axis=1, keepdims=True)
            lse = zmax[:, 0] + np.log(np.exp(pred - zmax).sum(axis=1))
            nll = lse - pred[np.arange(len(labels)), labels]
            losses.extend(nll.tolist())
            metrics.extend((pred.argmax(axis=1) == labels).astype(float).tolist())
    return {"loss": float(np.mean(losses)) if losses else 0.0,
            "metric": float(np.mean(metrics)) if metrics else 0.0}


def arch_divergence(state: SupernetState) -> Dict[str, object]:
    """Relative Euclidean distance of each edge's architecture parameters
    from their warm-start values; absolute distance for zero-norm baselines."""
    per_edge: Dict[int, float] = {}
    for i, op in state.edge_ops.items():
        current = [p.data for p in xd.parameter_groups(op)[0]]
        base = state.baselines[i]
        diff = np.sqrt(sum(float(np.sum(np.abs(c - b) ** 2))
                           for c, b in zip(current, base)))
        norm = np.sqrt(sum(float(np.sum(np.abs(b) ** 2)) for b in base))
        per_edge[i] = diff / norm if norm > 0 else diff
    mean = float(np.mean(list(per_edge.values()))) if per_edge else 0.0
    return {"per_edge": per_edge, "mean": mean}


def train(state: SupernetState, task_splits, cfg: TrainConfig,
          checkpoint_path=None) -> List[Dict[str, object]]:
    """Single-level joint training; returns the per-epoch history.

    ``task_splits`` is (train, valid) or (train, valid, test) Datasets.
    Model weights update every step; architecture parameters update every
    step once ``epoch >= warmup_epochs``, with the arch step size following
    the weight schedule's shape.  A non-finite loss aborts with the last
    good checkpoint retained (TrainAborted).
    """
    from . import checkpoint as ckpt

    train_split, valid_split = task_splits[0], task_splits[1]
    arch_params, weight_params = state.parameter_groups()
    w_opt = optim.make_optimizer(dict(cfg.weight_opt), weight_params)
    a_opt = optim.make_optimizer(dict(cfg.arch_opt), arch_params)
    schedule = optim.make_schedule(cfg.weight_schedule)
    rng = np.random.default_rng(cfg.seed)
    history: List[Dict[str, object]] = []
    last_good: Optional[bytes] = ckpt.dumps_state(state, cfg, history)
    best_valid = np.inf
    arch_lr = float(dict(cfg.arch_opt).get("lr", 0.0))

    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        factor = schedule(epoch, cfg.epochs)
        w_opt.set_lr_factor(factor)
        a_opt.set_lr_factor(factor)
        order = rng.permutation(train_split.n_samples)
        epoch_losses: List[float] = []
        for lo in range(0, train_split.n_samples, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            xb = train_split.inputs[idx]
            yb = train_split.targets[idx]
            with Tape() as tape:
                pred = supernet_forward(state, xb)
                loss = _task_loss(train_split.task_kind, pred, yb)
            loss_val = float(loss.data)
            if not np.isfinite(loss_val):
                raise TrainAborted(epoch, history, last_good)
            grads = tape.backward(loss)
            w_opt.step(grads)
            if epoch >= cfg.warmup_epochs and arch_lr > 0.0:
                a_opt.step(grads)
            state.step_count += 1
            epoch_losses.append(loss_val)
        state.epoch_count += 1
        valid = evaluate(state, valid_split, batch_size=cfg.batch_size)
        record = {
            "epoch": epoch,
            "train_loss": float(np.mean(epoch_losses)) if epoch_losses else 0.0,
            "valid_loss": valid["loss"],
            "metric": valid["metric"],
            "divergence_mean": arch_divergence(state)["mean"],
            "wallclock_s": time.perf_counter() - t0,
        }
        history.append(record)
        last_good = ckpt.dumps_state(state, cfg, history)
        if checkpoint_path is not None:
            ckpt.save_state(state, cfg, history, checkpoint_path)
            score = valid["loss"] if train_split.task_kind == "operator" else -valid["metric"]
            if score < best_valid:
                best_valid = score
                ckpt.save_state(state, cfg, history,
                                str(checkpoint_path) + ".best")
    if checkpoint_path is not None and cfg.epochs == 0:
        # zero-epoch runs still leave a loadable warm-start checkpoint
        ckpt.save_state(state, cfg, history, checkpoint_path)
    return history
