"""Single-file checkpoint container (XDCK).

Layout: magic ``XDCK`` (4 bytes), format version (little-endian u32), JSON
header length (little-endian u64), JSON header, then raw little-endian array
payloads back to back.  The header carries all structural metadata (backbone
spec, per-edge XDOp shape/depth/flags, train config, history) plus a section
table mapping array names to (offset, dtype, shape) within the payload.
Arrays round-trip bit-for-bit (float64 / complex128 raw bytes).
"""

from __future__ import annotations

import dataclasses
import json
import pathlib
import struct
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import kaleidoscope as kal
from . import xd
from .autodiff import Tensor

__all__ = ["CheckpointError", "dumps_state", "loads_state", "save_state",
           "load_state"]

MAGIC = b"XDCK"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return {"__array__": v.tolist()}
    if isinstance(v, dict):
        return {k: _jsonable(u) for k, u in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(u) for u in v]
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating,)):
        return float(v)
    return v


def _unjsonable(v):
    if isinstance(v, dict):
        if "__array__" in v:
            return np.asarray(v["__array__"])
        return {k: _unjsonable(u) for k, u in v.items()}
    if isinstance(v, list):
        return [_unjsonable(u) for u in v]
    return v


class _Writer:
    def __init__(self):
        self.table: List[Dict[str, object]] = []
        self.chunks: List[bytes] = []
        self.offset = 0

    def add(self, name: str, arr: np.ndarray) -> None:
        arr = np.ascontiguousarray(arr)
        if arr.dtype == np.float64:
            code = "f8"
        elif arr.dtype == np.complex128:
            code = "c16"
        elif arr.dtype == np.intp or np.issubdtype(arr.dtype, np.integer):
            arr = arr.astype("<i8")
            code = "i8"
        else:
            arr = arr.astype(np.float64)
            code = "f8"
        raw = arr.astype("<" + code).tobytes()
        self.table.append({"name": name, "offset": self.offset,
                           "dtype": code, "shape": list(arr.shape)})
        self.chunks.append(raw)
        self.offset += len(raw)


class _Reader:
    def __init__(self, table, payload: bytes):
        self.entries = {e["name"]: e for e in table}
        self.payload = payload

    def get(self, name: str) -> np.ndarray:
        if name not in self.entries:
            raise CheckpointError(f"missing checkpoint section {name!r}")
        e = self.entries[name]
        dt = np.dtype("<" + e["dtype"])
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        start = e["offset"]
        arr = np.frombuffer(self.payload, dtype=dt, count=count, offset=start)
        out = arr.reshape(e["shape"]).copy()
        if e["dtype"] == "i8":
            return out.astype(np.intp)
        return out


def _butterfly_meta(tag: str, B: kal.ButterflyMatrix, w: _Writer) -> Dict[str, object]:
    meta = {"n": B.n, "has_perm": B.perm is not None}
    if B.perm is not None:
        w.add(f"{tag}.perm", np.asarray(B.perm))
    for s_idx, s in enumerate(B.stages):
        for dname in ("a", "b", "c", "d"):
            w.add(f"{tag}.s{s_idx}.{dname}", getattr(s, dname).data)
    meta["blocks"] = [s.block for s in B.stages]
    return meta


def _butterfly_load(tag: str, meta: Dict[str, object], r: _Reader) -> kal.ButterflyMatrix:
    n = int(meta["n"])
    stages = []
    for s_idx, block in enumerate(meta["blocks"]):
        diags = [r.get(f"{tag}.s{s_idx}.{d}") for d in ("a", "b", "c", "d")]
        stages.append(kal.ButterflyStage(n, int(block), *diags))
    perm = r.get(f"{tag}.perm") if meta["has_perm"] else None
    return kal.ButterflyMatrix(n, stages, perm=perm)


def _kmatrix_meta(tag: str, K: kal.KMatrix, w: _Writer) -> Dict[str, object]:
    factors = []
    for f_idx, (bl, br) in enumerate(K.factors):
        factors.append({
            "left": _butterfly_meta(f"{tag}.f{f_idx}.l", bl, w),
            "right": _butterfly_meta(f"{tag}.f{f_idx}.r", br, w),
        })
    return {"n": K.n, "factors": factors}


def _kmatrix_load(tag: str, meta: Dict[str, object], r: _Reader) -> kal.KMatrix:
    factors = []
    for f_idx, fm in enumerate(meta["factors"]):
        bl = _butterfly_load(f"{tag}.f{f_idx}.l", fm["left"], r)
        br = _butterfly_load(f"{tag}.f{f_idx}.r", fm["right"], r)
        factors.append((bl, br))
    return kal.KMatrix(int(meta["n"]), factors)


def _op_meta(tag: str, op: xd.XDOp, w: _Writer) -> Dict[str, object]:
    p = op.params
    meta = {
        "filter_shape": list(op.filter_shape),
        "m": list(op.m),
        "depth": list(op.depth),
        "b_frozen": p.b_frozen,
        "C_frozen": p.C_frozen,
        "has_view": op.output_view is not None,
    }
    for mat, name in ((p.K, "K"), (p.L, "L"), (p.M, "M")):
        meta[name] = [_kmatrix_meta(f"{tag}.{name}{a}", ax, w)
                      for a, ax in enumerate(mat.axes)]
    w.add(f"{tag}.b", p.b.data)
    w.add(f"{tag}.C", p.C.data)
    w.add(f"{tag}.w", op.weight.data)
    if op.output_view is not None:
        meta["view_axes"] = [v is not None for v in op.output_view]
        for a, v in enumerate(op.output_view):
            if v is not None:
                w.add(f"{tag}.view{a}", np.asarray(v))
    return meta


def _op_load(tag: str, meta: Dict[str, object], r: _Reader) -> xd.XDOp:
    mats = {}
    for name in ("K", "L", "M"):
        mats[name] = kal.KroneckerK([
            _kmatrix_load(f"{tag}.{name}{a}", am, r)
            for a, am in enumerate(meta[name])])
    b = Tensor(r.get(f"{tag}.b"), requires_grad=True, name="b")
    C = Tensor(r.get(f"{tag}.C"), requires_grad=True, name="C")
    params = xd.XDParams(mats["K"], mats["L"], mats["M"], b, C,
                         bool(meta["b_frozen"]), bool(meta["C_frozen"]))
    weight = Tensor(r.get(f"{tag}.w"), requires_grad=True, name="w")
    view = None
    if meta["has_view"]:
        view = []
        for a, present in enumerate(meta["view_axes"]):
            view.append(r.get(f"{tag}.view{a}") if present else None)
    op = xd.XDOp(params, tuple(meta["filter_shape"]), tuple(meta["m"]),
                 weight=weight, output_view=view)
    if tuple(meta["depth"]) != op.depth:
        raise CheckpointError("depth triple mismatch after load")
    return op


def _spec_meta(spec) -> Dict[str, object]:
    return {
        "nodes": spec.nodes,
        "input_node": spec.input_node,
        "output_node": spec.output_node,
        "aggregation": spec.aggregation,
        "head": spec.head,
        "edges": [{"u": e.u, "v": e.v, "kind": e.kind, "c_in": e.c_in,
                   "c_out": e.c_out, "n": list(e.n),
                   "params": _jsonable(e.params)} for e in spec.edges],
    }


def _spec_load(meta: Dict[str, object]):
    from . import backbone as bb
    edges = [bb.Edge(e["u"], e["v"], e["kind"], int(e["c_in"]), int(e["c_out"]),
                     tuple(e["n"]), _unjsonable(e["params"]))
             for e in meta["edges"]]
    return bb.BackboneSpec(meta["nodes"], edges, meta["input_node"],
                           meta["output_node"], meta["aggregation"], meta["head"])


def dumps_state(state, cfg=None, history=None) -> bytes:
    """Serialize a SupernetState (+ config/history) to the XDCK container."""
    w = _Writer()
    edge_meta = {}
    for i in sorted(state.edge_ops):
        edge_meta[str(i)] = _op_meta(f"e{i}", state.edge_ops[i], w)
        for b_idx, base in enumerate(state.baselines[i]):
            w.add(f"e{i}.base{b_idx}", np.asarray(base))
    header = {
        "spec": _spec_meta(state.spec),
        "edges": edge_meta,
        "baseline_counts": {str(i): len(state.baselines[i])
                            for i in sorted(state.edge_ops)},
        "seed": state.seed,
        "step_count": state.step_count,
        "epoch_count": state.epoch_count,
        "config": _jsonable(dataclasses.asdict(cfg)) if cfg is not None else None,
        "history": _jsonable(history) if history is not None else [],
        "sections": w.table,
    }
    hdr = json.dumps(header, sort_keys=True).encode()
    return (MAGIC + struct.pack("<I", VERSION) + struct.pack("<Q", len(hdr))
            + hdr + b"".join(w.chunks))


def loads_state(blob: bytes):
    """Inverse of dumps_state; returns (state, config_dict, history)."""
    from . import backbone as bb

    if blob[:4] != MAGIC:
        raise CheckpointError("bad magic: not an XDCK checkpoint")
    version, = struct.unpack("<I", blob[4:8])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    hlen, = struct.unpack("<Q", blob[8:16])
    header = json.loads(blob[16:16 + hlen].decode())
    payload = blob[16 + hlen:]
    r = _Reader(header["sections"], payload)
    spec = _spec_load(header["spec"])
    edge_ops = {int(i): _op_load(f"e{i}", m, r)
                for i, m in header["edges"].items()}
    state = bb.SupernetState(spec, edge_ops, seed=int(header["seed"]))
    state.step_count = int(header["step_count"])
    state.epoch_count = int(header["epoch_count"])
    for i in state.edge_ops:
        count = int(header["baseline_counts"][str(i)])
        state.baselines[i] = [r.get(f"e{i}.base{b}") for b in range(count)]
    return state, _unjsonable(header.get("config")), _unjsonable(header.get("history", []))


def save_state(state, cfg, history, path) -> None:
    pathlib.Path(path).write_bytes(dumps_state(state, cfg, history))


def load_state(path):
    return loads_state(pathlib.Path(path).read_bytes())
