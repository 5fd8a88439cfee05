"""Command-line entry point: split, canonicalize, align, transport,
merge, eval, sweep, infer.

Exit codes: 0 ok, 2 validation failure, 3 numerical failure, 4 missing
input. Every artifact embeds the RunConfig that produced it.
"""

from __future__ import annotations

import argparse
import json
import logging
import struct
import sys
from pathlib import Path

import numpy as np

from .alignment import compute_plan, node_subsample
from .errors import HgramaError, MissingInputError, ValidationError
from .eval_harness import retention, speedup, summarize_csv, sweep
from .graph_store import (
    build_specialist_split,
    default_class_group,
    load_bundle,
    load_split,
    save_split,
)
from .model_zoo import forward as parent_forward, load_checkpoint
from .pipeline import RunConfig, run_merge_pipeline
from .transport import build_layout, pad_depth, transport_model
from .umpm import (
    UmpmModel,
    canonicalize,
    save_umpm_checkpoint,
    umpm_forward,
    verify_equivalence,
)

logger = logging.getLogger(__name__)


def _parse_groups(spec: str, num_classes: int) -> np.ndarray:
    """'default' or comma-separated group ids, one per class (e.g. 1,1,2,2)."""
    if spec == "default":
        return default_class_group(num_classes)
    ids = [int(tok) for tok in spec.split(",")]
    if len(ids) != num_classes:
        raise ValidationError(
            f"group spec names {len(ids)} classes, bundle has {num_classes}"
        )
    return np.asarray(ids, dtype=np.int64)


def _load_model(path: str):
    p = Path(path)
    if not p.exists():
        raise MissingInputError(f"model directory {p} does not exist")
    return load_checkpoint(p)


def _config_from_args(args) -> RunConfig:
    base: dict = {}
    if getattr(args, "config", None):
        base = json.loads(Path(args.config).read_text())
    cfg = RunConfig.from_dict(base)
    mapping = {
        "gamma": "gamma",
        "ridge_lambda": "lambda_",
        "alpha_mode": "alpha_mode",
        "fixed_alpha": "alpha",
        "lfnorm_layers": "lfnorm_layers",
        "lfnorm_granularity": "lfnorm_granularity",
        "lfnorm_eps": "lfnorm_eps",
        "seed": "seed",
        "top_k": "top_k",
    }
    for field, arg in mapping.items():
        val = getattr(args, arg, None)
        if val is not None:
            setattr(cfg, field, val)
    if getattr(args, "no_gate_regress", False):
        cfg.gate_regress = False
    if getattr(args, "no_transport", False):
        cfg.transport = False
    if getattr(args, "no_lfnorm", False):
        cfg.lfnorm_layers = "none"
    if getattr(args, "swap_canonical", False):
        cfg.swap_canonical = True
    if cfg.fixed_alpha is not None and cfg.alpha_mode == "conf_risk" and (
        getattr(args, "alpha_mode", None) is None
    ):
        cfg.alpha_mode = "fixed"
    return cfg


# -- commands -----------------------------------------------------------------

def cmd_split(args) -> int:
    bundle = load_bundle(args.bundle)
    groups = _parse_groups(args.groups, bundle.num_classes)
    split = build_specialist_split(bundle, groups, ratio=args.ratio, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    config = {"bundle": str(args.bundle), "groups": groups.tolist(),
              "ratio": args.ratio, "seed": args.seed}
    save_split(split, out / "split.json", config=config)
    print(f"wrote {out / 'split.json'}: |A_train|={int(split.mask_a_train.sum())} "
          f"|B_train|={int(split.mask_b_train.sum())}")
    return 0


def cmd_canonicalize(args) -> int:
    bundle = load_bundle(args.bundle)
    model = _load_model(args.model)
    canon = canonicalize(model)
    dev = verify_equivalence(model, canon, bundle, eps=args.eps)
    if dev > args.eps:
        raise ValidationError(f"canonical form deviates by {dev:.3g} > {args.eps}")
    save_umpm_checkpoint(canon, args.out, config={"source": str(args.model),
                                                  "verify_eps": args.eps,
                                                  "deviation": dev})
    print(f"canonicalized {args.model} -> {args.out} (max deviation {dev:.3g})")
    return 0


def _trace_of(model, bundle):
    if isinstance(model, UmpmModel):
        return umpm_forward(model, bundle)
    return parent_forward(model, bundle)


def cmd_align(args) -> int:
    bundle = load_bundle(args.bundle)
    ma, mb = _load_model(args.parent_a), _load_model(args.parent_b)
    ta, tb = _trace_of(ma, bundle), _trace_of(mb, bundle)
    sub = node_subsample(bundle.num_nodes, seed=args.seed)
    plan = compute_plan(ta, tb, gamma=args.gamma, subsample=sub)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    from .io_bin import TensorWriter

    tw = TensorWriter()
    for (i, j), tm in plan.maps.items():
        tw.add(f"map.{i}.{j}", tm.R.astype(np.float32))
    blob = out.with_suffix(".tensors.bin")
    tw.dump(blob)
    doc = {
        "cka": plan.S.tolist(),
        "matches": [list(m) for m in plan.matches],
        "gamma": args.gamma,
        "tensors_file": blob.name,
        "tensors": tw.entries,
        "config": {"gamma": args.gamma, "seed": args.seed},
    }
    out.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    print(f"wrote {out} with {len(plan.matches)} matched pairs")
    return 0


def cmd_transport(args) -> int:
    bundle = load_bundle(args.bundle)
    ma, mb = _load_model(args.parent_a), _load_model(args.parent_b)
    ca = ma if isinstance(ma, UmpmModel) else canonicalize(ma)
    cb = mb if isinstance(mb, UmpmModel) else canonicalize(mb)
    ta, tb = _trace_of(ma, bundle), _trace_of(mb, bundle)
    sub = node_subsample(bundle.num_nodes, seed=args.seed)
    plan = compute_plan(ta, tb, gamma=args.gamma, subsample=sub)
    layout = build_layout(plan, ta, tb, sub)
    tm = transport_model(ca, cb, layout, ta, tb, sub)
    a_model, b_model = pad_depth(tm, cb, plan.matches)
    out = Path(args.out)
    cfg = {"gamma": args.gamma, "seed": args.seed,
           "a_padding": tm.padding_positions}
    save_umpm_checkpoint(a_model, out / "a_transported", config=cfg)
    save_umpm_checkpoint(b_model, out / "b_padded", config=cfg)
    print(f"wrote {out}/a_transported and {out}/b_padded (depth {a_model.depth})")
    return 0


def cmd_merge(args) -> int:
    bundle = load_bundle(args.bundle)
    ma, mb = _load_model(args.parent_a), _load_model(args.parent_b)
    cfg = _config_from_args(args)
    result = run_merge_pipeline(ma, mb, bundle, cfg)
    out = Path(args.out)
    save_umpm_checkpoint(result.child, out, config=cfg.to_dict())
    result.report["inputs"] = {
        "parent_a": str(args.parent_a),
        "parent_b": str(args.parent_b),
        "bundle": str(args.bundle),
    }
    (out / "merge_report.json").write_text(
        json.dumps(result.report, indent=2, sort_keys=True) + "\n")
    if args.dump_lfnorm_stats and result.calibrations:
        _dump_lfnorm_stats(out, result, cfg)
    audit = result.report["label_audit"]
    print(f"merged child at {out} (depth {result.child.depth}); "
          f"label reads {audit['label_reads']}, "
          f"train-mask reads {audit['train_mask_reads']}")
    return 0


def _dump_lfnorm_stats(out: Path, result, cfg) -> None:
    """Calibration geometry export: per-layer affine params and targets."""
    from .io_bin import TensorWriter

    tw = TensorWriter()
    rows = []
    for layer, tag, params in result.calibrations:
        prefix = f"layer{layer}.{tag}"
        tw.add(f"{prefix}.a", params.a)
        tw.add(f"{prefix}.b", params.b)
        if params.mu_target is not None:
            tw.add(f"{prefix}.mu_target", params.mu_target.astype(np.float32))
            tw.add(f"{prefix}.sigma_target", params.sigma_target.astype(np.float32))
        rows.append({
            "layer": layer,
            "branch": tag,
            "granularity": params.granularity,
            "eps": params.eps,
            "units": int(params.a.shape[0]),
        })
    tw.dump(out / "lfnorm_stats.tensors.bin")
    doc = {
        "layers": rows,
        "tensors_file": "lfnorm_stats.tensors.bin",
        "tensors": tw.entries,
        "config": cfg.to_dict(),
    }
    (out / "lfnorm_stats.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def cmd_eval(args) -> int:
    bundle = load_bundle(args.bundle)
    child = _load_model(args.child)
    parent_a_path, parent_b_path = args.parents.split(",")
    pa, pb = _load_model(parent_a_path), _load_model(parent_b_path)
    split = load_split(args.split, bundle.num_nodes)
    rep = retention(child, pa, pb, bundle, split,
                    config={"child": str(args.child), "parents": args.parents})
    doc = rep.to_dict()
    if args.timing:
        doc["speedup"] = speedup(child, pa, pb, bundle,
                                 repeats=args.repeats).to_dict()
    Path(args.out).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    print(f"retention: A={rep.ret_a} B={rep.ret_b} min={rep.min_ret}")
    return 0


def cmd_sweep(args) -> int:
    grid = json.loads(Path(args.grid).read_text())
    bundle = load_bundle(grid["bundle"])
    split = load_split(grid["split"], bundle.num_nodes)
    ckpt_root = Path(grid["checkpoints"])
    base_cfg = RunConfig.from_dict(grid.get("config", {}))

    def run_cell(cell):
        arch_a, arch_b = cell["pair"].split("-")
        path_a = ckpt_root / (
            f"{arch_a}_A_d{cell['depth_a']}_w{cell['width_a']}_s{cell['seed']}")
        path_b = ckpt_root / (
            f"{arch_b}_B_d{cell['depth_b']}_w{cell['width_b']}_s{cell['seed']}")
        if not path_a.exists() or not path_b.exists():
            raise FileNotFoundError(f"{path_a} or {path_b}")
        pa, pb = load_checkpoint(path_a), load_checkpoint(path_b)
        result = run_merge_pipeline(pa, pb, bundle, base_cfg)
        rep = retention(result.child, pa, pb, bundle, split)
        row = {"ret_a": rep.ret_a, "ret_b": rep.ret_b, "min_ret": rep.min_ret,
               "speedup": ""}
        if grid.get("timing"):
            row["speedup"] = speedup(result.child, pa, pb, bundle,
                                     repeats=grid.get("repeats", 30)).speedup
        return row

    rows = sweep(grid, args.out, run_cell)
    print(f"sweep complete: {len(rows)} rows in {args.out}")
    summary = summarize_csv(args.out)
    for key, stats in summary.items():
        print(f"  {key}: min_ret {stats['mean']:.3f} ± {stats['std']:.3f} (n={stats['n']})")
    return 0


def cmd_infer(args) -> int:
    bundle = load_bundle(args.bundle)
    model = _load_model(args.model)
    trace = _trace_of(model, bundle)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "wb") as fh:
        fh.write(struct.pack("<I", len(trace.U)))
        for U in trace.U:
            fh.write(struct.pack("<II", U.shape[0], U.shape[1]))
            fh.write(np.ascontiguousarray(U, dtype="<f4").tobytes())
    print(f"wrote trace with {len(trace.U)} matrices to {out}")
    return 0


def read_trace(path: str | Path) -> list[np.ndarray]:
    """Reader for the `infer` output: u32 count, then (rows, cols, f32 data)."""
    raw = Path(path).read_bytes()
    count = struct.unpack_from("<I", raw)[0]
    off = 4
    out = []
    for _ in range(count):
        rows, cols = struct.unpack_from("<II", raw, off)
        off += 8
        n = rows * cols
        out.append(np.frombuffer(raw, dtype="<f4", count=n, offset=off)
                   .reshape(rows, cols).copy())
        off += 4 * n
    return out


# -- parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hgrama",
                                description="training-free GNN specialist merging")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("split", help="build specialist train/eval masks")
    sp.add_argument("--bundle", required=True)
    sp.add_argument("--groups", default="default")
    sp.add_argument("--ratio", type=float, default=0.8)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_split)

    sp = sub.add_parser("canonicalize", help="express a parent in the operator basis")
    sp.add_argument("--model", required=True)
    sp.add_argument("--bundle", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--eps", type=float, default=1e-5)
    sp.set_defaults(fn=cmd_canonicalize)

    sp = sub.add_parser("align", help="CKA + monotone matching + transport maps")
    sp.add_argument("--parent-a", required=True)
    sp.add_argument("--parent-b", required=True)
    sp.add_argument("--bundle", required=True)
    sp.add_argument("--gamma", type=float, default=0.5)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_align)

    sp = sub.add_parser("transport", help="move parent A into B's coordinates")
    sp.add_argument("--parent-a", required=True)
    sp.add_argument("--parent-b", required=True)
    sp.add_argument("--bundle", required=True)
    sp.add_argument("--gamma", type=float, default=0.5)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_transport)

    sp = sub.add_parser("merge", help="full five-phase merge")
    sp.add_argument("--parent-a", required=True)
    sp.add_argument("--parent-b", required=True)
    sp.add_argument("--bundle", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--alpha-mode", choices=["conf_risk", "recon", "fixed"],
                    default=None)
    sp.add_argument("--alpha", type=float, default=None)
    sp.add_argument("--lambda", dest="lambda_", type=float, default=None)
    sp.add_argument("--gamma", type=float, default=None)
    sp.add_argument("--top-k", type=int, default=None)
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--no-gate-regress", action="store_true")
    sp.add_argument("--no-transport", action="store_true")
    sp.add_argument("--no-lfnorm", action="store_true")
    sp.add_argument("--swap-canonical", action="store_true")
    sp.add_argument("--lfnorm-layers", choices=["all", "last", "none"], default=None)
    sp.add_argument("--lfnorm-granularity", default=None,
                    help="per_node | bucket:K | global")
    sp.add_argument("--lfnorm-eps", type=float, default=None)
    sp.add_argument("--dump-lfnorm-stats", action="store_true",
                    help="also write lfnorm_stats.json + moment tensors")
    sp.add_argument("--config", default=None, help="JSON RunConfig file")
    sp.set_defaults(fn=cmd_merge)

    sp = sub.add_parser("eval", help="retention (and optional timing) report")
    sp.add_argument("--child", required=True)
    sp.add_argument("--parents", required=True, help="A_DIR,B_DIR")
    sp.add_argument("--bundle", required=True)
    sp.add_argument("--split", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--timing", action="store_true")
    sp.add_argument("--repeats", type=int, default=30)
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("sweep", help="grid of merges -> CSV")
    sp.add_argument("--grid", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_sweep)

    sp = sub.add_parser("infer", help="full-graph forward; dump the trace")
    sp.add_argument("--model", required=True)
    sp.add_argument("--bundle", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_infer)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except HgramaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
