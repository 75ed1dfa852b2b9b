"""Command-line interface: ``xdops verify|gen|train|eval|bench|export``.

Exit codes: 0 success, 1 validation failure (bad flags, bad config, bad
shapes), 2 runtime/numeric failure.  The environment variable XDOPS_THREADS
caps kernel parallelism (exported to the BLAS/OpenMP thread settings before
numerics start; default is the machine's cores).
"""

from __future__ import annotations

import argparse
import json
import os
import pathlib
import sys
from typing import Dict, List, Optional

import numpy as np

__all__ = ["main", "console_main"]

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2


class ConfigError(ValueError):
    pass


def _apply_thread_cap() -> None:
    cap = os.environ.get("XDOPS_THREADS")
    if cap:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
            os.environ.setdefault(var, cap)


# ---------------------------------------------------------------------------
# RunConfig
# ---------------------------------------------------------------------------

_CONFIG_SCHEMA: Dict[str, Dict[str, object]] = {
    "backbone": {"name": "cnn3_1d", "n": 64, "channels": 2, "k": 3},
    "xd": {"depth": [1, 1, 1], "freeze_bias_gates": False, "max_kernel": 0},
    "optimizer": {"weight": {"algo": "adam", "lr": 1e-2},
                  "arch": {"algo": "adam", "lr": 1e-3},
                  "schedule": "cosine", "warmup_epochs": 0, "epochs": 60,
                  "batch_size": 64},
    "task": {"data": "", "train": 0, "valid": 0},
    "seed": 0,
    "precision": "f64",
    "output_dir": "runs/out",
}


def _check_keys(doc: Dict[str, object], schema: Dict[str, object],
                prefix: str = "") -> None:
    for key in doc:
        if key not in schema:
            raise ConfigError(f"unknown config key {prefix + key!r}")
        if isinstance(schema[key], dict) and isinstance(doc[key], dict) \
                and key != "weight" and key != "arch":
            _check_keys(doc[key], schema[key], prefix + key + ".")


def load_config(path) -> Dict[str, object]:
    """Parse and validate a RunConfig JSON document; fill defaults."""
    try:
        doc = json.loads(pathlib.Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    _check_keys(doc, _CONFIG_SCHEMA)
    cfg: Dict[str, object] = {}
    for key, default in _CONFIG_SCHEMA.items():
        if isinstance(default, dict):
            sub = dict(default)
            sub.update(doc.get(key, {}))
            cfg[key] = sub
        else:
            cfg[key] = doc.get(key, default)
    return cfg


# ---------------------------------------------------------------------------
# verify
# ---------------------------------------------------------------------------

def cmd_verify(args) -> int:
    from . import autodiff as ad
    from . import kaleidoscope as kal
    from . import oracles
    from .autodiff import Tensor

    sizes = [int(s) for s in args.sizes.split(",")]
    max_n = max(sizes)
    rng = np.random.default_rng(args.seed)
    lines: List[str] = []
    ok = True

    # Expressivity claims (oracles module suite)
    for name, op, spec in oracles.standard_claims():
        if max(op.n) > max_n:
            continue
        rep = oracles.equivalence_report(op, spec, trials=3, seed=args.seed,
                                         name=name)
        lines.extend(rep.lines())
        ok = ok and rep.passed

    # DFT exactness
    for n in [v for v in (2, 4, 8, 16, 32, 64) if v <= max_n]:
        j = np.arange(n)
        F = np.exp(-2j * np.pi * np.outer(j, j) / n)
        err = float(np.max(np.abs(kal.kmatrix_materialize(kal.init_dft(n)) - F)))
        inv = float(np.max(np.abs(
            kal.kmatrix_materialize(kal.init_idft(n)) @ F - np.eye(n))))
        passed = err <= 1e-10 and inv <= 1e-12
        lines.append(f"claim\tdft n={n}\terror\t{err:.3e}\tinverse\t{inv:.3e}"
                     f"\t{'PASS' if passed else 'FAIL'}")
        ok = ok and passed

    # Permutation exactness
    for n in [v for v in sizes if v >= 2]:
        p = rng.permutation(n)
        M = kal.kmatrix_materialize(kal.init_permutation(n, p))
        passed = bool(np.array_equal(M, np.eye(n)[p].astype(complex)))
        lines.append(f"claim\tpermutation n={n}\t{'PASS' if passed else 'FAIL'}")
        ok = ok and passed

    # Gradient check through a DFT-initialized pipeline
    n = min(8, max_n)
    x = Tensor(rng.standard_normal(n))
    tgt = Tensor(rng.standard_normal(n))
    K = kal.init_dft(n)

    def fn(point):
        y = kal.kmatrix_apply(K, point["x"], axis=0)
        return ad.mse(ad.real(y), tgt)

    grad_rep = ad.grad_check(fn, {"x": x}, h=1e-5)
    passed = grad_rep.max_error < 1e-6
    lines.append(f"claim\tgradient pipeline n={n}\terror\t{grad_rep.max_error:.3e}"
                 f"\t{'PASS' if passed else 'FAIL'}")
    ok = ok and passed

    lines.append(f"suite\t{'PASS' if ok else 'FAIL'}")
    report = "\n".join(lines) + "\n"
    if args.report:
        pathlib.Path(args.report).write_text(report)
    sys.stdout.write(report)
    return EXIT_OK if ok else EXIT_RUNTIME


# ---------------------------------------------------------------------------
# gen
# ---------------------------------------------------------------------------

def cmd_gen(args) -> int:
    from . import tasks

    ds = tasks.generate(args.task, args.n, args.samples, args.seed)
    tasks.save_dataset(ds, args.out)
    print(f"wrote {ds.n_samples} samples to {args.out} (+ sidecar)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train / eval
# ---------------------------------------------------------------------------

def _build_state(cfg: Dict[str, object]):
    from . import backbone as bb

    bcfg = cfg["backbone"]
    spec = bb.make_backbone(bcfg["name"], int(bcfg["n"]),
                            channels=int(bcfg["channels"]), k=int(bcfg["k"]))
    xcfg = cfg["xd"]
    depth = tuple(int(d) for d in xcfg["depth"])
    if len(depth) != 3 or any(d < 1 for d in depth):
        raise ConfigError("xd.depth must be a triple of positive integers")
    return bb.substitute_backbone(spec, seed=int(cfg["seed"]),
                                  depth=None if depth == (1, 1, 1) else depth,
                                  freeze_bias_gates=bool(xcfg["freeze_bias_gates"]))


def cmd_train(args) -> int:
    from . import backbone as bb
    from . import tasks

    cfg = load_config(args.config)
    tcfg = cfg["task"]
    if not tcfg["data"]:
        raise ConfigError("task.data must point to a dataset blob")
    ds = tasks.load_dataset(tcfg["data"])
    ntr = int(tcfg["train"]) or int(ds.n_samples * 0.8)
    nva = int(tcfg["valid"]) or (ds.n_samples - ntr)
    tr, va, te = tasks.split_dataset(ds, ntr, nva)
    state = _build_state(cfg)
    ocfg = cfg["optimizer"]
    train_cfg = bb.TrainConfig(
        weight_opt=dict(ocfg["weight"]), weight_schedule=ocfg["schedule"],
        arch_opt=dict(ocfg["arch"]), warmup_epochs=int(ocfg["warmup_epochs"]),
        epochs=int(ocfg["epochs"]), batch_size=int(ocfg["batch_size"]),
        seed=int(cfg["seed"]), precision=str(cfg["precision"]))
    out_dir = pathlib.Path(cfg["output_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = out_dir / "checkpoint.xdck"
    try:
        history = bb.train(state, (tr, va), train_cfg, checkpoint_path=ckpt_path)
    except bb.TrainAborted as exc:
        if exc.checkpoint_blob is not None:
            ckpt_path.write_bytes(exc.checkpoint_blob)
        (out_dir / "history.jsonl").write_text(
            "".join(json.dumps(h, sort_keys=True) + "\n" for h in exc.history))
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    (out_dir / "history.jsonl").write_text(
        "".join(json.dumps(h, sort_keys=True) + "\n" for h in history))
    final = bb.evaluate(state, va, batch_size=train_cfg.batch_size)
    print(json.dumps({"final_valid": final,
                      "divergence_mean": bb.arch_divergence(state)["mean"]},
                     sort_keys=True))
    return EXIT_OK


def cmd_eval(args) -> int:
    from . import backbone as bb
    from . import checkpoint as ckpt
    from . import tasks

    state, cfg, _history = ckpt.load_state(args.checkpoint)
    ds = tasks.load_dataset(args.data)
    first = next(iter(state.edge_ops.values()))
    expect = (first.filter_shape[1],) + first.m
    if tuple(ds.inputs.shape[1:]) != expect:
        raise ConfigError(f"dataset input shape {ds.inputs.shape[1:]} does not "
                          f"match checkpoint input shape {expect}")
    metrics = bb.evaluate(state, ds)
    print(json.dumps(metrics, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------------------
# bench / export
# ---------------------------------------------------------------------------

def cmd_bench(args) -> int:
    from . import bench

    sizes = [int(s) for s in args.sizes.split(",")]
    depths = [int(d) for d in args.depths.split(",")]
    rows = bench.run_bench(sizes, depths, repeats=args.repeats)
    if args.csv:
        bench.write_csv(rows, args.csv)
    for r in rows:
        print(f"{r['op']}\tn={r['n']}\tc={r['c']}\tdepth={r['depth']}"
              f"\tmean_us={r['mean_us']:.1f}\tstddev_us={r['stddev_us']:.1f}"
              f"\tmadds={r['madds']}")
    return EXIT_OK


def cmd_export(args) -> int:
    from . import checkpoint as ckpt
    from . import kaleidoscope as kal
    from . import xd

    state, _cfg, _history = ckpt.load_state(args.checkpoint)
    if args.edge not in state.edge_ops:
        raise ConfigError(f"edge {args.edge} not searchable; available: "
                          f"{sorted(state.edge_ops)}")
    op = state.edge_ops[args.edge]
    nvol = int(np.prod(op.n))
    if nvol > kal.MATERIALIZE_CAP:
        raise kal.MaterializationCapError(
            f"edge spatial volume {nvol} exceeds materialization cap "
            f"{kal.MATERIALIZE_CAP}")
    arrays: Dict[str, np.ndarray] = {}
    for name, mat in (("K", op.params.K), ("L", op.params.L), ("M", op.params.M)):
        for a, ax in enumerate(mat.axes):
            arrays[f"{name}{a}"] = kal.kmatrix_materialize(ax)
    dense_K = _kron_dense([arrays[f"K{a}"] for a in range(len(op.params.K.axes))])
    dense_L = _kron_dense([arrays[f"L{a}"] for a in range(len(op.params.L.axes))])
    dense_M = _kron_dense([arrays[f"M{a}"] for a in range(len(op.params.M.axes))])
    arrays["K"], arrays["L"], arrays["M"] = dense_K, dense_L, dense_M
    c_out, c_in = op.filter_shape[:2]
    w = op.weight.data
    bias = op.params.b.data.ravel()
    for i in range(c_out):
        for j in range(c_in):
            wp = np.zeros(op.n, dtype=complex)
            wp[tuple(slice(0, kk) for kk in op.filter_shape[2:])] = w[i, j]
            s = dense_L @ wp.ravel() + bias
            arrays[f"map_{i}_{j}"] = (op.params.C.data[i, j]
                                      * dense_K @ np.diag(s) @ dense_M)
    np.savez(args.dense, **arrays)
    print(f"wrote {len(arrays)} arrays to {args.dense}")
    return EXIT_OK


def _kron_dense(mats: List[np.ndarray]) -> np.ndarray:
    out = mats[0]
    for m in mats[1:]:
        out = np.kron(out, m)
    return out


# ---------------------------------------------------------------------------
# Entry points
# ---------------------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="xdops",
        description="Expressive diagonalization operations: verification, "
                    "synthetic tasks, search training, benchmarks, export.")
    sub = p.add_subparsers(dest="verb", required=True)

    v = sub.add_parser("verify", help="run the expressivity/DFT/gradient suite")
    v.add_argument("--sizes", default="8,16,32",
                   help="comma-separated spatial sizes (default 8,16,32)")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--report", default=None, help="write the report to this path")
    v.set_defaults(fn=cmd_verify)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--task", required=True,
                   choices=["dilated", "fourier", "permuted", "unpermuted"])
    g.add_argument("--n", type=int, required=True, help="spatial size (power of two)")
    g.add_argument("--samples", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True, help="output blob path")
    g.set_defaults(fn=cmd_gen)

    t = sub.add_parser("train", help="train a supernet from a config")
    t.add_argument("--config", required=True)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.set_defaults(fn=cmd_eval)

    b = sub.add_parser("bench", help="time dense/FFT/XD kernels")
    b.add_argument("--sizes", default="64,128,256,512")
    b.add_argument("--depths", default="1,3")
    b.add_argument("--repeats", type=int, default=5)
    b.add_argument("--csv", default=None)
    b.set_defaults(fn=cmd_bench)

    x = sub.add_parser("export", help="materialize one edge's dense maps")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--edge", type=int, required=True)
    x.add_argument("--dense", required=True, help="output .npz path")
    x.set_defaults(fn=cmd_export)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    _apply_thread_cap()
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on bad flags; map to the validation exit code,
        # keep 0 for --help
        return EXIT_OK if exc.code == 0 else EXIT_VALIDATION
    try:
        return args.fn(args)
    except (ConfigError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # runtime/numeric failures
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def console_main() -> None:
    sys.exit(main())
