"""Open-vocabulary inference, base/novel partitions and segmentation metrics."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .errors import ParameterError

SCANNET20 = [
    "wall", "floor", "cabinet", "bed", "chair", "sofa", "table", "door", "window", "bookshelf",
    "picture", "counter", "desk", "curtain", "refrigerator", "shower curtain", "toilet", "sink",
    "bathtub", "otherfurniture",
]  # fmt: skip
S3DIS13 = [
    "ceiling", "floor", "wall", "beam", "column", "window", "door", "table", "chair", "sofa",
    "bookcase", "board", "clutter",
]  # fmt: skip
NUSCENES16 = [
    "barrier", "bicycle", "bus", "car", "construction_vehicle", "motorcycle", "pedestrian",
    "traffic_cone", "trailer", "truck", "driveable_surface", "otherflat", "sidewalk", "terrain",
    "manmade", "vegetation",
]  # fmt: skip
# Names are placeholders; only the 200-class id space matters for partitioning.
SCANNET200 = [f"scannet200_{i:03d}" for i in range(200)]

DATASETS = {
    "scannet": (SCANNET20, ["otherfurniture"], ["B15/N4", "B12/N7", "B10/N9"]),
    "scannet-inst": (SCANNET20, ["wall", "floor", "otherfurniture"], ["B13/N4", "B10/N7", "B8/N9"]),
    "s3dis": (S3DIS13, ["clutter"], ["B8/N4", "B6/N6"]),
    "scannet200": (SCANNET200, [], ["B170/N30", "B150/N50"]),
    "nuscenes": (NUSCENES16, ["otherflat"], ["B12/N3", "B10/N5"]),
}


@dataclass
class CategoryPartition:
    base_ids: frozenset
    novel_ids: frozenset
    dropped_ids: frozenset = frozenset()
    name: str = "custom"
    label_names: dict = field(default_factory=dict)

    def __post_init__(self):
        self.base_ids = frozenset(int(i) for i in self.base_ids)
        self.novel_ids = frozenset(int(i) for i in self.novel_ids)
        self.dropped_ids = frozenset(int(i) for i in self.dropped_ids)
        if self.base_ids & self.novel_ids:
            raise ParameterError("base and novel categories overlap")
        if self.dropped_ids & (self.base_ids | self.novel_ids):
            raise ParameterError("dropped categories overlap base/novel")

    @property
    def all_ids(self):
        return self.base_ids | self.novel_ids | self.dropped_ids

    def to_text(self) -> str:
        def fmt(s):
            return ",".join(str(i) for i in sorted(s))

        return f"name={self.name}\nbase={fmt(self.base_ids)}\nnovel={fmt(self.novel_ids)}\ndropped={fmt(self.dropped_ids)}\n"

    @classmethod
    def from_text(cls, text: str) -> "CategoryPartition":
        kv = {}
        for line in text.splitlines():
            if "=" in line:
                k, v = line.split("=", 1)
                kv[k.strip()] = v.strip()

        def ids(key):
            return [int(v) for v in kv.get(key, "").split(",") if v.strip()]

        return cls(ids("base"), ids("novel"), ids("dropped"), kv.get("name", "custom"))


def make_partition(dataset: str, split: str, seed: int = 0) -> CategoryPartition:
    """Seeded random base/novel split of a preset label space."""
    if dataset not in DATASETS:
        raise ParameterError(f"unknown dataset {dataset!r}")
    names, dropped, splits = DATASETS[dataset]
    if split not in splits:
        raise ParameterError(f"unknown split {split!r} for {dataset}; expected one of {splits}")
    n_base, n_novel = (int(p[1:]) for p in split.split("/"))
    dropped_ids = [names.index(n) for n in dropped]
    rest = np.array([i for i in range(len(names)) if i not in dropped_ids])
    assert n_base + n_novel == len(rest)
    perm = np.random.default_rng(seed).permutation(rest)
    return CategoryPartition(
        perm[:n_base], perm[n_base:], dropped_ids, f"{dataset}-{split}", dict(enumerate(names))
    )


def parse_partition(spec: str) -> CategoryPartition:
    """``dataset:split[:seed]`` preset, or a path to a partition file."""
    if Path(spec).is_file():
        return CategoryPartition.from_text(Path(spec).read_text())
    parts = spec.split(":")
    if len(parts) in (2, 3):
        return make_partition(parts[0], parts[1], int(parts[2]) if len(parts) == 3 else 0)
    raise ParameterError(f"cannot interpret partition {spec!r}")


# ---------------------------------------------------------------------------
# inference


def classify_points(point_feats, query_embeds, query_ids) -> np.ndarray:
    """Per point, the query id of highest cosine similarity; ties go to the lowest id."""
    q = np.asarray(query_embeds, dtype=np.float64)
    ids = np.asarray(query_ids)
    if q.ndim != 2 or len(q) == 0:
        raise ParameterError("need at least one query embedding")
    if len(ids) != len(q):
        raise ParameterError("query ids and embeddings differ in length")
    order = np.argsort(ids, kind="stable")
    q = q[order] / np.linalg.norm(q[order], axis=1, keepdims=True)
    p = np.asarray(point_feats, dtype=np.float64)
    p = p / np.maximum(np.linalg.norm(p, axis=1, keepdims=True), 1e-12)
    return ids[order][np.argmax(p @ q.T, axis=1)]


# ---------------------------------------------------------------------------
# metrics


def harmonic_mean(a, b):
    if a is None or b is None:
        return None
    if a <= 0 or b <= 0:
        return 0.0
    return 2 * a * b / (a + b)


@dataclass
class SegmentationMetrics:
    per_class_iou: dict
    miou_base: float | None
    miou_novel: float | None
    hiou: float | None

    def as_dict(self):
        return {"miou_base": self.miou_base, "miou_novel": self.miou_novel, "hiou": self.hiou}


def semantic_metrics(pred, gt, partition: CategoryPartition) -> SegmentationMetrics:
    pred = np.asarray(pred, dtype=np.int64)
    gt = np.asarray(gt, dtype=np.int64)
    if pred.shape != gt.shape:
        raise ParameterError("prediction and ground truth differ in length")
    keep = (gt >= 0) & ~np.isin(gt, list(partition.dropped_ids))
    pred, gt = pred[keep], gt[keep]
    if gt.size == 0:
        return SegmentationMetrics({}, None, None, None)
    present = np.unique(gt)
    # one confusion row per present class, columns over predicted labels
    labels, pred_code = np.unique(np.concatenate([present, pred]), return_inverse=True)
    pred_code = pred_code[len(present):]
    gt_code = np.searchsorted(labels, gt)
    conf = np.bincount(gt_code * len(labels) + pred_code, minlength=len(labels) ** 2).reshape(len(labels), -1)
    tp = np.diag(conf)
    fn = conf.sum(axis=1) - tp
    fp = conf.sum(axis=0) - tp
    per_class = {}
    for c in present:
        k = np.searchsorted(labels, c)
        per_class[int(c)] = tp[k] / (tp[k] + fp[k] + fn[k])

    def group_mean(ids):
        vals = [per_class[c] for c in sorted(ids) if c in per_class]
        return float(np.mean(vals)) if vals else None

    mb = group_mean(partition.base_ids)
    mn = group_mean(partition.novel_ids)
    return SegmentationMetrics(per_class, mb, mn, harmonic_mean(mb, mn))


@dataclass
class InstancePrediction:
    point_indices: np.ndarray
    class_id: int
    score: float

    def __post_init__(self):
        self.point_indices = np.unique(np.asarray(self.point_indices, dtype=np.int64))
        if self.point_indices.size == 0:
            raise ParameterError("instance prediction covers no points")
        if not (0 <= self.score <= 1):
            raise ParameterError("instance score must lie in [0, 1]")


def mask_iou(a, b) -> float:
    inter = np.intersect1d(a, b, assume_unique=True).size
    return inter / (a.size + b.size - inter)


def average_precision(is_tp, n_gt) -> float:
    """All-point interpolated area under the precision/recall curve."""
    if n_gt == 0:
        raise ParameterError("AP undefined without ground truth")
    if len(is_tp) == 0:
        return 0.0
    tp = np.cumsum(is_tp)
    fp = np.cumsum(~np.asarray(is_tp))
    recall = np.concatenate([[0.0], tp / n_gt, [1.0]])
    precision = np.concatenate([[1.0], tp / (tp + fp), [0.0]])
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    steps = np.flatnonzero(recall[1:] != recall[:-1])
    return float(np.sum((recall[steps + 1] - recall[steps]) * precision[steps + 1]))


def class_ap(preds, gts, threshold=0.5) -> float:
    """Greedy matching by descending score to the best unmatched gt of the same class."""
    preds = sorted(preds, key=lambda p: -p.score)
    matched = np.zeros(len(gts), dtype=bool)
    is_tp = []
    for p in preds:
        best, best_iou = -1, 0.0
        for k, g in enumerate(gts):
            if not matched[k]:
                iou = mask_iou(p.point_indices, g)
                if iou > best_iou:
                    best, best_iou = k, iou
        hit = best >= 0 and best_iou > threshold
        if hit:
            matched[best] = True
        is_tp.append(hit)
    return average_precision(np.array(is_tp, dtype=bool), len(gts))


def instance_metrics(preds, gt_instances, partition: CategoryPartition, threshold: float = 0.5):
    """Returns (hAP50, mAP50_base, mAP50_novel, per-class AP); absent groups are None."""
    gt_by_class = {}
    for idx, cid in gt_instances:
        gt_by_class.setdefault(int(cid), []).append(np.unique(np.asarray(idx, dtype=np.int64)))
    pred_by_class = {}
    for p in preds:
        pred_by_class.setdefault(int(p.class_id), []).append(p)
    per_class = {
        c: class_ap(pred_by_class.get(c, []), g, threshold)
        for c, g in gt_by_class.items()
        if c not in partition.dropped_ids and g
    }

    def group_mean(ids):
        vals = [per_class[c] for c in sorted(ids) if c in per_class]
        return float(np.mean(vals)) if vals else None

    mb = group_mean(partition.base_ids)
    mn = group_mean(partition.novel_ids)
    return harmonic_mean(mb, mn), mb, mn, per_class


def toy_instance_head(pred_sem, cloud, radius: float):
    """Single-linkage clusters within each predicted class; score = cluster share of its class."""
    if radius <= 0:
        raise ParameterError("radius must be positive")
    pred_sem = np.asarray(pred_sem, dtype=np.int64)
    positions = cloud.positions if hasattr(cloud, "positions") else np.asarray(cloud)
    out = []
    for c in np.unique(pred_sem):
        if c < 0:
            continue
        idx = np.flatnonzero(pred_sem == c)
        pairs = cKDTree(positions[idx]).query_pairs(radius, output_type="ndarray")
        graph = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(len(idx), len(idx)))
        n_comp, comp = connected_components(graph, directed=False)
        for k in range(n_comp):
            members = idx[comp == k]
            out.append(InstancePrediction(members, int(c), members.size / idx.size))
    return out


def gt_instances_from_cloud(cloud):
    """(indices, class id) per ground-truth instance id >= 0."""
    out = []
    for inst in np.unique(cloud.inst_labels):
        if inst < 0:
            continue
        idx = np.flatnonzero(cloud.inst_labels == inst)
        cls = np.bincount(cloud.sem_labels[idx][cloud.sem_labels[idx] >= 0]).argmax() if (cloud.sem_labels[idx] >= 0).any() else -1
        if cls >= 0:
            out.append((idx, int(cls)))
    return out


# ---------------------------------------------------------------------------
# dumps


def write_predictions(pred, path) -> None:
    pred = np.asarray(pred, dtype=np.int64)
    Path(path).write_text(f"UNIMOV-PRED v1 {len(pred)}\n" + "".join(f"{int(v)}\n" for v in pred))


def read_predictions(path) -> np.ndarray:
    lines = Path(path).read_text().split()
    if lines[:2] != ["UNIMOV-PRED", "v1"]:
        raise ParameterError(f"{path}: missing 'UNIMOV-PRED v1 N' header")
    n = int(lines[2])
    vals = np.array([int(v) for v in lines[3:]], dtype=np.int64)
    if len(vals) != n:
        raise ParameterError(f"{path}: header says {n} rows, found {len(vals)}")
    return vals


def write_instances(preds, path) -> None:
    lines = [f"{p.class_id} {p.score!r} " + ",".join(str(int(i)) for i in p.point_indices) for p in preds]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_instances(path) -> list[InstancePrediction]:
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            c, s, idx = line.split()
            out.append(InstancePrediction([int(v) for v in idx.split(",")], int(c), float(s)))
    return out
