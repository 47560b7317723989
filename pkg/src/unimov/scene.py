"""Scene data model, scene files, synthetic scenes and angular sector partitioning."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import GeometryError, ParameterError, SceneFormatError

SCENE_MAGIC = "UNIMOV-SCENE"
SCENE_VERSION = "v1"

# Well-separated RGB anchors for the synthetic generator; ids past the table are hashed.
PALETTE = np.array(
    [
        [220, 60, 50],
        [50, 170, 70],
        [60, 90, 220],
        [230, 200, 40],
        [170, 60, 200],
        [40, 200, 210],
        [240, 130, 30],
        [150, 150, 150],
    ],
    dtype=np.int64,
)


def class_color(class_id: int) -> np.ndarray:
    if 0 <= class_id < len(PALETTE):
        return PALETTE[class_id].copy()
    digest = hashlib.sha256(f"color:{class_id}".encode()).digest()
    return 40 + np.frombuffer(digest[:3], dtype=np.uint8).astype(np.int64) % 200


@dataclass
class PointCloud:
    positions: np.ndarray
    colors: np.ndarray
    sem_labels: np.ndarray
    inst_labels: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.colors = np.asarray(self.colors, dtype=np.int64).reshape(-1, 3)
        self.sem_labels = np.asarray(self.sem_labels, dtype=np.int64).reshape(-1)
        self.inst_labels = np.asarray(self.inst_labels, dtype=np.int64).reshape(-1)
        n = len(self.positions)
        if n < 1:
            raise ParameterError("a point cloud needs at least one point")
        if not (len(self.colors) == len(self.sem_labels) == len(self.inst_labels) == n):
            raise ParameterError("positions, colors and labels must share leading dimension")
        if not np.all(np.isfinite(self.positions)):
            raise ParameterError("non-finite point positions")
        if self.colors.min() < 0 or self.colors.max() > 255:
            raise ParameterError("colors must lie in [0, 255]")
        if self.sem_labels.min() < -1 or self.inst_labels.min() < -1:
            raise ParameterError("labels must be -1 or non-negative ids")

    def __len__(self):
        return len(self.positions)

    def subset(self, indices) -> "PointCloud":
        idx = np.asarray(indices, dtype=np.int64)
        return PointCloud(
            self.positions[idx], self.colors[idx], self.sem_labels[idx], self.inst_labels[idx]
        )

    def label_histogram(self) -> dict[int, int]:
        ids, counts = np.unique(self.sem_labels, return_counts=True)
        return {int(i): int(c) for i, c in zip(ids, counts)}


@dataclass
class SceneSample:
    cloud: PointCloud
    image: np.ndarray
    depth: np.ndarray
    captions: list = field(default_factory=list)
    scene_id: str = "scene"
    depth_missing: bool = False
    image_missing: bool = False

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.int64)
        self.depth = np.asarray(self.depth, dtype=np.float64)
        if self.depth.ndim != 2 or self.image.shape != self.depth.shape + (3,):
            raise ParameterError("image must be H x W x 3 and depth H x W with the same H, W")
        if self.image.size and (self.image.min() < 0 or self.image.max() > 255):
            raise ParameterError("image values must lie in [0, 255]")
        if not np.all(np.isfinite(self.depth)) or (self.depth.size and self.depth.min() < 0):
            raise ParameterError("depth must be finite and non-negative")
        n = len(self.cloud)
        for rec in self.captions:
            if rec.scene_id != self.scene_id:
                raise ParameterError(f"caption for scene {rec.scene_id!r} attached to {self.scene_id!r}")
            idx = np.asarray(rec.point_indices)
            if idx.size == 0 or idx.min() < 0 or idx.max() >= n:
                raise ParameterError("caption references points outside the scene")

    @property
    def shape(self):
        return self.depth.shape


@dataclass(frozen=True)
class SectorSpec:
    """Angular partition of the horizontal plane.

    Sectors span ``theta_deg`` and start every ``theta_deg - phi_deg``
    degrees counter-clockwise from +x, so neighbours overlap by ``phi_deg``.
    """

    theta_deg: float
    phi_deg: float = 0.0

    def __post_init__(self):
        if not (0 < self.theta_deg <= 360):
            raise ParameterError(f"theta must lie in (0, 360], got {self.theta_deg}")
        if not (0 <= self.phi_deg < self.theta_deg):
            raise ParameterError(f"phi must lie in [0, theta), got {self.phi_deg}")

    @property
    def step_deg(self) -> float:
        return self.theta_deg - self.phi_deg

    @property
    def sector_count(self) -> int:
        return math.ceil(360.0 / self.step_deg - 1e-9)

    @property
    def view(self) -> str | None:
        if self.theta_deg == 360:
            return "global"
        if 90 < self.theta_deg <= 180:
            return "eye"
        if 0 < self.theta_deg <= 90:
            return "sector"
        return None

    def interval(self, j: int) -> tuple[float, float]:
        """Start and end angle (degrees, end possibly > 360) of sector ``j``."""
        start = j * self.step_deg
        # the last sector stops where sector 0 (shifted by a turn) begins its overlap
        end = min(start + self.theta_deg, 360.0 + self.phi_deg)
        return start, end


@dataclass
class SectorAssignment:
    spec: SectorSpec
    membership: list

    def sizes(self) -> list[int]:
        return [len(m) for m in self.membership]


def polar_angles(positions, center=None) -> np.ndarray:
    pos = np.asarray(positions, dtype=np.float64)
    if center is None:
        center = pos.mean(axis=0)
    c = np.asarray(center, dtype=np.float64)
    ang = np.degrees(np.arctan2(pos[:, 1] - c[1], pos[:, 0] - c[0]))
    # rounding keeps points placed exactly on a boundary from drifting across it
    return np.round(ang, 9) % 360.0


def partition_sectors(cloud: PointCloud, spec: SectorSpec, center=None) -> SectorAssignment:
    """Assign points to angular sectors around ``center`` (default: the centroid)."""
    if not isinstance(spec, SectorSpec):
        spec = SectorSpec(*spec)
    angles = polar_angles(cloud.positions, center)
    membership = []
    for j in range(spec.sector_count):
        start, end = spec.interval(j)
        rel = (angles - start) % 360.0
        membership.append(np.flatnonzero(rel < end - start))
    return SectorAssignment(spec, membership)


def _grid_cells(positions, height, width, bounds):
    if height < 1 or width < 1:
        raise ParameterError("view size must be positive")
    pos = np.asarray(positions, dtype=np.float64)
    if bounds is None:
        xmin, ymin = pos[:, 0].min(), pos[:, 1].min()
        xmax, ymax = pos[:, 0].max(), pos[:, 1].max()
    else:
        xmin, ymin, xmax, ymax = bounds
    if not (xmax > xmin and ymax > ymin):
        raise GeometryError("bounding box has zero area; cannot project")
    col = np.floor((pos[:, 0] - xmin) / (xmax - xmin) * width).astype(np.int64)
    row = np.floor((pos[:, 1] - ymin) / (ymax - ymin) * height).astype(np.int64)
    inside = (col >= 0) & (col <= width) & (row >= 0) & (row <= height)
    return np.clip(row, 0, height - 1), np.clip(col, 0, width - 1), inside


def _topmost(cloud, height, width, bounds):
    """Per occupied cell, the index of the highest point."""
    row, col, inside = _grid_cells(cloud.positions, height, width, bounds)
    idx = np.flatnonzero(inside)
    cell = row[idx] * width + col[idx]
    z = cloud.positions[idx, 2]
    order = np.lexsort((z, cell))
    cell_sorted = cell[order]
    last = np.r_[cell_sorted[1:] != cell_sorted[:-1], True]
    return cell_sorted[last], idx[order[last]]


def render_depth(cloud: PointCloud, view_height: int, view_width: int, bounds=None) -> np.ndarray:
    """Orthographic top-down depth: per cell the height of the highest point, 0 where empty.

    Heights below the ground plane are clipped to 0. ``bounds`` is an optional
    ``(xmin, ymin, xmax, ymax)`` window; by default the cloud's bounding box.
    """
    cells, top = _topmost(cloud, view_height, view_width, bounds)
    depth = np.zeros(view_height * view_width)
    depth[cells] = np.maximum(cloud.positions[top, 2], 0.0)
    return depth.reshape(view_height, view_width)


def render_image(cloud: PointCloud, view_height: int, view_width: int, bounds=None) -> np.ndarray:
    cells, top = _topmost(cloud, view_height, view_width, bounds)
    image = np.zeros((view_height * view_width, 3), dtype=np.int64)
    image[cells] = cloud.colors[top]
    return image.reshape(view_height, view_width, 3)


def make_synthetic_scene(
    seed: int,
    n_points: int,
    class_ids,
    *,
    image_size: int = 32,
    color_noise: float = 20.0,
    extent: float = 4.0,
    blob_sigma: float = 0.25,
    min_separation: float = 1.2,
    scene_id: str | None = None,
) -> SceneSample:
    """Gaussian blobs, one instance per class, with class-correlated colors and heights."""
    class_ids = [int(c) for c in class_ids]
    if not class_ids:
        raise ParameterError("class list is empty")
    if len(set(class_ids)) != len(class_ids):
        raise ParameterError("duplicate class ids")
    k = len(class_ids)
    if n_points < k:
        raise ParameterError(f"need at least {k} points for {k} classes")
    rng = np.random.default_rng(seed)

    centers = []
    for _ in range(k):
        for _attempt in range(1000):
            c = rng.uniform(-extent / 2, extent / 2, size=2)
            if all(np.linalg.norm(c - o) >= min_separation for o in centers):
                break
        centers.append(c)

    counts = np.full(k, n_points // k)
    counts[rng.permutation(k)[: n_points - counts.sum()]] += 1

    pos, col, sem, inst = [], [], [], []
    for i, (cid, c, n) in enumerate(zip(class_ids, centers, counts)):
        z0 = 0.4 + 0.35 * (cid % 4)
        xy = c + rng.normal(0.0, blob_sigma, size=(n, 2))
        z = np.abs(z0 + rng.normal(0.0, 0.15, size=n))
        pos.append(np.column_stack([xy, z]))
        rgb = class_color(cid) + rng.normal(0.0, color_noise, size=(n, 3))
        col.append(np.clip(np.rint(rgb), 0, 255).astype(np.int64))
        sem.append(np.full(n, cid))
        inst.append(np.full(n, i))
    cloud = PointCloud(np.concatenate(pos), np.concatenate(col), np.concatenate(sem), np.concatenate(inst))
    perm = rng.permutation(n_points)
    cloud = cloud.subset(perm)
    depth = render_depth(cloud, image_size, image_size)
    image = render_image(cloud, image_size, image_size)
    return SceneSample(cloud, image, depth, [], scene_id or f"synth_{seed}")


def withhold_labels(sample: SceneSample, keep_ids) -> SceneSample:
    """Copy of ``sample`` with every semantic label outside ``keep_ids`` set to -1."""
    keep = np.isin(sample.cloud.sem_labels, np.asarray(sorted(keep_ids), dtype=np.int64))
    sem = np.where(keep, sample.cloud.sem_labels, -1)
    inst = np.where(keep, sample.cloud.inst_labels, -1)
    cloud = PointCloud(sample.cloud.positions, sample.cloud.colors, sem, inst)
    return replace(sample, cloud=cloud, captions=[])


# ---------------------------------------------------------------------------
# scene files


def _parse_row(tokens, types, lineno, what):
    try:
        return [t(v) for t, v in zip(types, tokens)]
    except ValueError:
        raise SceneFormatError(f"unparseable {what} row: {' '.join(tokens)!r}", lineno) from None


def load_scene(path) -> SceneSample:
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines:
        raise SceneFormatError("empty file", 1)
    head = lines[0].split()
    if len(head) != 5 or head[0] != SCENE_MAGIC or head[1] != SCENE_VERSION:
        raise SceneFormatError(f"expected '{SCENE_MAGIC} {SCENE_VERSION} N H W' header", 1)
    try:
        n, h, w = (int(v) for v in head[2:])
    except ValueError:
        raise SceneFormatError("N, H, W must be integers", 1) from None
    if n < 1 or h < 1 or w < 1:
        raise SceneFormatError("N, H, W must be positive", 1)

    body = [(i + 1, ln.split()) for i, ln in enumerate(lines) if i > 0 and ln.strip()]
    if len(body) < n:
        raise SceneFormatError(f"expected {n} point rows, found {len(body)}", len(lines))
    pos, col, sem, inst = [], [], [], []
    for lineno, tok in body[:n]:
        if len(tok) != 8:
            raise SceneFormatError(f"point row needs 8 values, got {len(tok)}", lineno)
        x, y, z, r, g, b, s, t = _parse_row(tok, [float] * 3 + [int] * 5, lineno, "point")
        if not all(0 <= v <= 255 for v in (r, g, b)):
            raise SceneFormatError(f"color value out of range [0, 255]: {(r, g, b)}", lineno)
        if s < -1 or t < -1:
            raise SceneFormatError("labels must be >= -1", lineno)
        pos.append((x, y, z))
        col.append((r, g, b))
        sem.append(s)
        inst.append(t)
    rest = body[n:]

    depth = np.zeros((h, w))
    depth_missing = True
    if rest and "," not in rest[0][1][0]:
        if len(rest) < h:
            raise SceneFormatError(f"depth block needs {h} rows, found {len(rest)}", rest[-1][0])
        for r_i, (lineno, tok) in enumerate(rest[:h]):
            if len(tok) != w:
                raise SceneFormatError(f"depth row needs {w} values, got {len(tok)}", lineno)
            vals = _parse_row(tok, [float] * w, lineno, "depth")
            if any(not math.isfinite(v) or v < 0 for v in vals):
                raise SceneFormatError("depth values must be finite and non-negative", lineno)
            depth[r_i] = vals
        depth_missing = False
        rest = rest[h:]

    image = np.zeros((h, w, 3), dtype=np.int64)
    image_missing = True
    if rest:
        if len(rest) != h:
            raise SceneFormatError(f"image block needs {h} rows, found {len(rest)}", rest[0][0])
        for r_i, (lineno, tok) in enumerate(rest):
            if len(tok) != w:
                raise SceneFormatError(f"image row needs {w} triples, got {len(tok)}", lineno)
            for c_i, trip in enumerate(tok):
                parts = trip.split(",")
                if len(parts) != 3:
                    raise SceneFormatError(f"bad r,g,b triple {trip!r}", lineno)
                rgb = _parse_row(parts, [int] * 3, lineno, "image")
                if not all(0 <= v <= 255 for v in rgb):
                    raise SceneFormatError(f"color value out of range [0, 255]: {trip}", lineno)
                image[r_i, c_i] = rgb
        image_missing = False

    cloud = PointCloud(np.array(pos), np.array(col), np.array(sem), np.array(inst))
    return SceneSample(cloud, image, depth, [], path.stem, depth_missing, image_missing)


def save_scene(sample: SceneSample, path) -> None:
    c = sample.cloud
    h, w = sample.depth.shape
    out = [f"{SCENE_MAGIC} {SCENE_VERSION} {len(c)} {h} {w}"]
    for p, rgb, s, t in zip(c.positions.tolist(), c.colors.tolist(), c.sem_labels.tolist(), c.inst_labels.tolist()):
        out.append(f"{p[0]!r} {p[1]!r} {p[2]!r} {rgb[0]} {rgb[1]} {rgb[2]} {s} {t}")
    if not sample.depth_missing:
        out.extend(" ".join(repr(float(v)) for v in row) for row in sample.depth)
    if not sample.image_missing:
        out.extend(" ".join(f"{px[0]},{px[1]},{px[2]}" for px in row) for row in sample.image.tolist())
    Path(path).write_text("\n".join(out) + "\n")


def write_partition_manifest(scene_id: str, assignment: SectorAssignment, path) -> None:
    spec = assignment.spec
    lines = []
    for j, members in enumerate(assignment.membership):
        idx = ",".join(str(int(i)) for i in members)
        lines.append(f"{scene_id} {j} {spec.theta_deg:g} {spec.phi_deg:g} {idx}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_partition_manifest(path) -> list[tuple[str, int, float, float, np.ndarray]]:
    rows = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        tok = line.split()
        idx = np.array([int(v) for v in tok[4].split(",")] if len(tok) > 4 else [], dtype=np.int64)
        rows.append((tok[0], int(tok[1]), float(tok[2]), float(tok[3]), idx))
    return rows
