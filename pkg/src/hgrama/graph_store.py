"""On-disk graph bundles, specialist splits, and degree bucketing.

A bundle directory holds ``manifest.json`` plus binary payloads:
``edges.bin`` (little-endian u32 src,dst pairs), ``features.bin`` (f32),
``labels.bin`` (u16) and ``masks.bin`` (u8), the latter three with an
8-byte dims header. Adjacency is kept as incoming CSR — for each
destination v the sorted list of source ids — because every aggregation
downstream is destination-conditioned.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import MissingInputError, ValidationError

MASK_NAMES = ("train", "val", "test")


@dataclass(frozen=True)
class GraphBundle:
    """Immutable single-graph world: CSR incoming adjacency + node data."""

    num_nodes: int
    num_classes: int
    indptr: np.ndarray      # (N+1,) int64, CSR offsets per destination
    sources: np.ndarray     # (E,) int64, ascending source ids per destination
    features: np.ndarray    # (N, d0) float32
    labels: np.ndarray      # (N,) int64, class ids in [0, K)
    masks: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        n = self.num_nodes
        if self.indptr.shape != (n + 1,) or self.indptr[0] != 0:
            raise ValidationError("CSR indptr must have shape (N+1,) and start at 0")
        if np.any(np.diff(self.indptr) < 0):
            raise ValidationError("CSR offsets must be monotone nondecreasing")
        if self.indptr[-1] != len(self.sources):
            raise ValidationError("CSR indptr tail does not match edge count")
        if len(self.sources) and (self.sources.min() < 0 or self.sources.max() >= n):
            raise ValidationError("edge endpoint outside [0, num_nodes)")
        if self.features.shape[0] != n:
            raise ValidationError(
                f"features have {self.features.shape[0]} rows, manifest says {n}"
            )
        if not np.all(np.isfinite(self.features)):
            raise ValidationError("feature matrix contains NaN/Inf")
        if self.labels.shape != (n,):
            raise ValidationError("labels must be one class id per node")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValidationError("label outside [0, num_classes)")
        for name, m in self.masks.items():
            if m.shape != (n,) or m.dtype != np.bool_:
                raise ValidationError(f"mask {name!r} must be a boolean vector of length N")
        if "train" in self.masks and "test" in self.masks:
            if np.any(self.masks["train"] & self.masks["test"]):
                raise ValidationError("train and test masks overlap")

    @property
    def num_edges(self) -> int:
        return int(self.indptr[-1])

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def in_degrees(self) -> np.ndarray:
        return np.diff(self.indptr).astype(np.int64)

    def neighbors(self, v: int) -> np.ndarray:
        return self.sources[self.indptr[v]:self.indptr[v + 1]]

    def label_free_view(self) -> "LabelFreeView":
        return LabelFreeView(self)


class LabelFreeView:
    """Bundle facade for merge-time code; counts label/train-mask reads.

    The merge path must stay label-free, so it receives this view instead
    of the raw bundle. Reads still succeed (auditing, not policing) but
    are tallied so a pipeline run can assert the count stayed at zero.
    """

    def __init__(self, bundle: GraphBundle):
        self._bundle = bundle
        self.label_reads = 0
        self.train_mask_reads = 0

    @property
    def num_nodes(self) -> int:
        return self._bundle.num_nodes

    @property
    def num_classes(self) -> int:
        return self._bundle.num_classes

    @property
    def num_edges(self) -> int:
        return self._bundle.num_edges

    @property
    def feature_dim(self) -> int:
        return self._bundle.feature_dim

    @property
    def indptr(self) -> np.ndarray:
        return self._bundle.indptr

    @property
    def sources(self) -> np.ndarray:
        return self._bundle.sources

    @property
    def features(self) -> np.ndarray:
        return self._bundle.features

    @property
    def in_degrees(self) -> np.ndarray:
        return self._bundle.in_degrees

    @property
    def labels(self) -> np.ndarray:
        self.label_reads += 1
        return self._bundle.labels

    def mask(self, name: str) -> np.ndarray:
        if name == "train":
            self.train_mask_reads += 1
        return self._bundle.masks[name]

    @property
    def total_restricted_reads(self) -> int:
        return self.label_reads + self.train_mask_reads


# ---------------------------------------------------------------------------
# Bundle I/O
# ---------------------------------------------------------------------------

def _canonical_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def load_bundle(path: str | Path) -> GraphBundle:
    """Load and validate a bundle directory."""
    from .io_bin import read_dims_array

    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise MissingInputError(f"no manifest.json under {root}")
    manifest = json.loads(manifest_path.read_text())
    for key in ("num_nodes", "num_classes", "feature_dim", "files"):
        if key not in manifest:
            raise ValidationError(f"manifest missing {key!r}")
    n = int(manifest["num_nodes"])
    files = manifest["files"]
    for name in ("edges", "features", "labels", "masks"):
        if name not in files or not (root / files[name]).exists():
            raise MissingInputError(f"bundle file for {name!r} missing under {root}")

    raw = (root / files["edges"]).read_bytes()
    if len(raw) % 8:
        raise ValidationError("edges.bin length is not a multiple of 8")
    pairs = np.frombuffer(raw, dtype="<u4").reshape(-1, 2).astype(np.int64)
    if len(pairs) and pairs.max() >= n:
        raise ValidationError("dangling edge endpoint in edges.bin")

    features = read_dims_array(root / files["features"], "float32")
    if features.shape != (n, int(manifest["feature_dim"])):
        raise ValidationError(
            f"features shaped {features.shape}, manifest says "
            f"({n}, {manifest['feature_dim']})"
        )
    labels = read_dims_array(root / files["labels"], "uint16").reshape(-1).astype(np.int64)
    if labels.shape[0] != n:
        raise ValidationError("label count does not match num_nodes")
    mask_mat = read_dims_array(root / files["masks"], "uint8")
    mask_names = manifest.get("mask_names", list(MASK_NAMES))
    if mask_mat.shape != (n, len(mask_names)):
        raise ValidationError("masks.bin dims do not match manifest")
    masks = {name: mask_mat[:, i].astype(bool) for i, name in enumerate(mask_names)}

    # Sort edges by (dst, src) so per-destination source lists are ascending.
    order = np.lexsort((pairs[:, 0], pairs[:, 1]))
    pairs = pairs[order]
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.add.at(indptr, pairs[:, 1] + 1, 1)
    indptr = np.cumsum(indptr)
    return GraphBundle(
        num_nodes=n,
        num_classes=int(manifest["num_classes"]),
        indptr=indptr,
        sources=pairs[:, 0].copy(),
        features=features,
        labels=labels,
        masks=masks,
    )


def save_bundle(bundle: GraphBundle, path: str | Path) -> None:
    """Write a bundle in canonical form (edges sorted by dst, then src)."""
    from .io_bin import write_dims_array

    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    dst = np.repeat(np.arange(bundle.num_nodes), np.diff(bundle.indptr))
    pairs = np.stack([bundle.sources, dst], axis=1).astype("<u4")
    (root / "edges.bin").write_bytes(pairs.tobytes())
    write_dims_array(root / "features.bin", bundle.features, "float32")
    write_dims_array(root / "labels.bin", bundle.labels.reshape(-1, 1), "uint16")
    mask_names = list(bundle.masks)
    mask_mat = np.stack([bundle.masks[m] for m in mask_names], axis=1).astype(np.uint8)
    write_dims_array(root / "masks.bin", mask_mat, "uint8")
    manifest = {
        "num_nodes": bundle.num_nodes,
        "num_classes": bundle.num_classes,
        "feature_dim": bundle.feature_dim,
        "mask_names": mask_names,
        "files": {
            "edges": "edges.bin",
            "features": "features.bin",
            "labels": "labels.bin",
            "masks": "masks.bin",
        },
    }
    (root / "manifest.json").write_text(_canonical_json(manifest))


# ---------------------------------------------------------------------------
# Specialist splits
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SpecialistSplit:
    """Disjoint train/eval node allocation for the two specialist parents."""

    mask_a_train: np.ndarray
    mask_b_train: np.ndarray
    mask_a_eval: np.ndarray
    mask_b_eval: np.ndarray
    class_group: np.ndarray   # (K,) group id in {1, 2} per class
    ratio: float
    seed: int


def _allocate(nodes: np.ndarray, take: int, rng: np.random.Generator):
    """Seeded shuffle, then split off the first `take` nodes."""
    perm = rng.permutation(len(nodes))
    shuffled = nodes[perm]
    return shuffled[:take], shuffled[take:]


def build_specialist_split(
    bundle: GraphBundle,
    class_group: np.ndarray | list[int],
    ratio: float = 0.8,
    seed: int = 0,
) -> SpecialistSplit:
    """Partition train and test nodes into the two specialist subsets.

    Classes in group 1 send floor(ratio * n_c) of their train nodes to
    side A (seeded shuffle) and the remainder to B; group-2 classes use
    the complementary allocation. Eval masks apply the same rule to the
    test mask. Deterministic given (bundle, class_group, ratio, seed).
    """
    class_group = np.asarray(class_group, dtype=np.int64)
    if class_group.shape != (bundle.num_classes,):
        raise ValidationError("class_group must assign every class")
    if not np.all(np.isin(class_group, (1, 2))):
        raise ValidationError("group ids must be 1 or 2")
    if not (0.0 < ratio < 1.0):
        raise ValidationError("ratio must lie in (0, 1)")

    n = bundle.num_nodes
    out = {k: np.zeros(n, dtype=bool) for k in ("a_train", "b_train", "a_eval", "b_eval")}
    for base_mask, a_key, b_key in (
        (bundle.masks["train"], "a_train", "b_train"),
        (bundle.masks["test"], "a_eval", "b_eval"),
    ):
        for c in range(bundle.num_classes):
            nodes = np.flatnonzero(base_mask & (bundle.labels == c))
            if len(nodes) == 0:
                if base_mask is bundle.masks["train"]:
                    warnings.warn(f"class {c} has no train nodes; nothing to allocate")
                continue
            rng = np.random.default_rng([seed, c, 0 if a_key == "a_train" else 1])
            take = int(np.floor(ratio * len(nodes)))
            majority, minority = _allocate(nodes, take, rng)
            if class_group[c] == 1:
                out[a_key][majority] = True
                out[b_key][minority] = True
            else:
                out[b_key][majority] = True
                out[a_key][minority] = True

    return SpecialistSplit(
        mask_a_train=out["a_train"],
        mask_b_train=out["b_train"],
        mask_a_eval=out["a_eval"],
        mask_b_eval=out["b_eval"],
        class_group=class_group,
        ratio=float(ratio),
        seed=int(seed),
    )


def default_class_group(num_classes: int) -> np.ndarray:
    """Lower half of class ids -> group 1, upper half -> group 2."""
    g = np.ones(num_classes, dtype=np.int64)
    g[num_classes // 2:] = 2
    return g


def save_split(split: SpecialistSplit, path: str | Path, config: dict | None = None) -> None:
    doc = {
        "class_group": split.class_group.tolist(),
        "ratio": split.ratio,
        "seed": split.seed,
        "masks": {
            "a_train": np.flatnonzero(split.mask_a_train).tolist(),
            "b_train": np.flatnonzero(split.mask_b_train).tolist(),
            "a_eval": np.flatnonzero(split.mask_a_eval).tolist(),
            "b_eval": np.flatnonzero(split.mask_b_eval).tolist(),
        },
        "config": config or {},
    }
    Path(path).write_text(_canonical_json(doc))


def load_split(path: str | Path, num_nodes: int) -> SpecialistSplit:
    p = Path(path)
    if not p.exists():
        raise MissingInputError(f"split file {p} does not exist")
    doc = json.loads(p.read_text())
    masks = {}
    for key in ("a_train", "b_train", "a_eval", "b_eval"):
        m = np.zeros(num_nodes, dtype=bool)
        m[np.asarray(doc["masks"][key], dtype=np.int64)] = True
        masks[key] = m
    return SpecialistSplit(
        mask_a_train=masks["a_train"],
        mask_b_train=masks["b_train"],
        mask_a_eval=masks["a_eval"],
        mask_b_eval=masks["b_eval"],
        class_group=np.asarray(doc["class_group"], dtype=np.int64),
        ratio=float(doc["ratio"]),
        seed=int(doc["seed"]),
    )


# ---------------------------------------------------------------------------
# Degree bucketing
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BucketAssignment:
    """Quantile degree buckets; nodes with equal in-degree share a bucket."""

    num_buckets: int
    bucket_of: np.ndarray   # (N,) int64 in [0, num_buckets)
    boundaries: np.ndarray  # (num_buckets - 1,) float64 thresholds


def degree_buckets(bundle_or_degrees, num_buckets: int = 32) -> BucketAssignment:
    """Assign nodes to quantile-based in-degree buckets.

    Bucket membership is a pure function of the degree value, so equal
    degrees can never straddle a boundary. Degenerate degree
    distributions simply leave some buckets empty.
    """
    if num_buckets < 1:
        raise ValidationError("num_buckets must be >= 1")
    if isinstance(bundle_or_degrees, np.ndarray):
        degrees = bundle_or_degrees.astype(np.float64)
    else:
        degrees = bundle_or_degrees.in_degrees.astype(np.float64)
    if num_buckets == 1 or len(degrees) == 0:
        boundaries = np.empty(0, dtype=np.float64)
    else:
        qs = np.arange(1, num_buckets) / num_buckets
        boundaries = np.quantile(degrees, qs)
    bucket_of = np.searchsorted(boundaries, degrees, side="left").astype(np.int64)
    return BucketAssignment(
        num_buckets=int(num_buckets), bucket_of=bucket_of, boundaries=boundaries
    )
