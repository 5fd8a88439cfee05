"""Specialist retention, inference speedup, and grid sweeps."""

from __future__ import annotations

import csv
import logging
import os
import time
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .graph_store import GraphBundle, SpecialistSplit
from .model_zoo import ParentModel, forward as parent_forward
from .umpm import UmpmModel, umpm_forward

logger = logging.getLogger(__name__)

CSV_COLUMNS = ["pair", "depth_a", "depth_b", "width_a", "width_b", "seed",
               "ret_a", "ret_b", "min_ret", "speedup"]


def model_logits(model, bundle) -> np.ndarray:
    if isinstance(model, UmpmModel):
        return umpm_forward(model, bundle).logits
    return parent_forward(model, bundle).logits


def accuracy(logits: np.ndarray, labels: np.ndarray, mask: np.ndarray) -> float:
    if not np.any(mask):
        raise ValidationError("empty evaluation mask")
    pred = logits[mask].argmax(axis=1)
    return float((pred == labels[mask]).mean())


@dataclass
class RetentionReport:
    acc_parent_a: float
    acc_parent_b: float
    acc_child_on_a_eval: float
    acc_child_on_b_eval: float
    ret_a: float | None
    ret_b: float | None
    min_ret: float | None
    seed: int
    config: dict

    def to_dict(self) -> dict:
        return asdict(self)


def retention(child, parent_a, parent_b, bundle: GraphBundle,
              split: SpecialistSplit, config: dict | None = None) -> RetentionReport:
    """Child accuracy on each parent's held-out subset, normalized by that
    parent's own accuracy there; min-retention is the headline number."""
    logits_child = model_logits(child, bundle)
    logits_a = model_logits(parent_a, bundle)
    logits_b = model_logits(parent_b, bundle)
    acc_a = accuracy(logits_a, bundle.labels, split.mask_a_eval)
    acc_b = accuracy(logits_b, bundle.labels, split.mask_b_eval)
    acc_ca = accuracy(logits_child, bundle.labels, split.mask_a_eval)
    acc_cb = accuracy(logits_child, bundle.labels, split.mask_b_eval)
    ret_a = acc_ca / acc_a if acc_a > 0 else None
    ret_b = acc_cb / acc_b if acc_b > 0 else None
    if ret_a is None or ret_b is None:
        warnings.warn("a parent scored 0 on its own eval subset; retention undefined")
        min_ret = None
    else:
        min_ret = min(ret_a, ret_b)
    return RetentionReport(
        acc_parent_a=acc_a, acc_parent_b=acc_b,
        acc_child_on_a_eval=acc_ca, acc_child_on_b_eval=acc_cb,
        ret_a=ret_a, ret_b=ret_b, min_ret=min_ret,
        seed=split.seed, config=config or {},
    )


@dataclass
class SpeedupReport:
    child_ms: float
    ensemble_ms: float
    speedup: float
    repeats: int
    warmup: int

    def to_dict(self) -> dict:
        return asdict(self)


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    p = np.exp(z)
    return p / p.sum(axis=1, keepdims=True)


def speedup(child, parent_a, parent_b, bundle, repeats: int = 30,
            warmup: int = 5) -> SpeedupReport:
    """Median wall-time of the child vs the two-parent ensemble.

    The ensemble runs both parents and averages softmax probabilities
    (the probability-mean rule is this harness's choice of ensemble).
    Samples interleave the two pipelines so background load drift hits
    both sides equally.
    """
    if repeats < 3:
        raise ValidationError("need at least 3 timing repeats")

    def run_child():
        return model_logits(child, bundle)

    def run_ensemble():
        pa = _softmax(model_logits(parent_a, bundle))
        pb = _softmax(model_logits(parent_b, bundle))
        return 0.5 * (pa + pb)

    for _ in range(warmup):
        run_child()
        run_ensemble()
    child_times, ensemble_times = [], []
    for _ in range(repeats):
        t0 = time.perf_counter()
        run_child()
        child_times.append((time.perf_counter() - t0) * 1000.0)
        t0 = time.perf_counter()
        run_ensemble()
        ensemble_times.append((time.perf_counter() - t0) * 1000.0)
    child_ms = float(np.median(child_times))
    ensemble_ms = float(np.median(ensemble_times))
    return SpeedupReport(
        child_ms=child_ms, ensemble_ms=ensemble_ms,
        speedup=ensemble_ms / child_ms, repeats=repeats, warmup=warmup,
    )


# ---------------------------------------------------------------------------
# Grid sweeps
# ---------------------------------------------------------------------------

def _cell_key(cell: dict) -> tuple:
    return (cell["pair"], int(cell["depth_a"]), int(cell["depth_b"]),
            int(cell["width_a"]), int(cell["width_b"]), int(cell["seed"]))


def _existing_rows(out_csv: Path) -> dict:
    rows = {}
    if out_csv.exists():
        with open(out_csv) as fh:
            for row in csv.DictReader(fh):
                rows[(row["pair"], int(row["depth_a"]), int(row["depth_b"]),
                      int(row["width_a"]), int(row["width_b"]), int(row["seed"]))] = row
    return rows


def worker_count() -> int:
    cap = os.environ.get("HGRAMA_THREADS")
    if cap:
        return max(1, int(cap))
    return max(1, min(4, os.cpu_count() or 1))


def sweep(grid: dict, out_csv: str | Path, run_cell) -> list[dict]:
    """Run merge+retention per grid cell, appending one CSV row each.

    `run_cell(cell) -> dict` supplies the metric columns. Pending cells
    run in a thread pool (HGRAMA_THREADS caps the width) and rows are
    written back in grid order; completed cells in an existing CSV are
    skipped, so re-running resumes. Cells whose checkpoints are missing
    produce empty metrics and the sweep continues.
    """
    from concurrent.futures import ThreadPoolExecutor

    out_csv = Path(out_csv)
    done = _existing_rows(out_csv)
    cells = grid["cells"]
    pending = [c for c in cells if _cell_key(c) not in done]

    def guarded(cell):
        try:
            return run_cell(cell)
        except FileNotFoundError as exc:
            logger.warning("cell %s missing inputs (%s); marked absent",
                           _cell_key(cell), exc)
            return {"ret_a": "", "ret_b": "", "min_ret": "", "speedup": ""}

    if pending:
        with ThreadPoolExecutor(max_workers=worker_count()) as pool:
            metrics_list = list(pool.map(guarded, pending))
    else:
        metrics_list = []
    results = list(done.values())
    write_header = not out_csv.exists()
    with open(out_csv, "a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        if write_header:
            writer.writeheader()
        for cell, metrics in zip(pending, metrics_list):
            row = {
                "pair": cell["pair"],
                "depth_a": cell["depth_a"], "depth_b": cell["depth_b"],
                "width_a": cell["width_a"], "width_b": cell["width_b"],
                "seed": cell["seed"],
                **{k: metrics.get(k, "") for k in
                   ("ret_a", "ret_b", "min_ret", "speedup")},
            }
            writer.writerow(row)
            fh.flush()
            results.append(row)
    return results


def summarize_csv(path: str | Path) -> dict:
    """Mean and std of min-retention per (pair, depth, width) over seeds."""
    groups: dict[tuple, list[float]] = {}
    with open(path) as fh:
        for row in csv.DictReader(fh):
            if row["min_ret"] in ("", None):
                continue
            key = (row["pair"], row["depth_a"], row["depth_b"],
                   row["width_a"], row["width_b"])
            groups.setdefault(key, []).append(float(row["min_ret"]))
    return {
        "/".join(k): {"mean": float(np.mean(v)), "std": float(np.std(v)), "n": len(v)}
        for k, v in groups.items()
    }
