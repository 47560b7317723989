"""Hierarchical point-semantic caption pairs and the caption contrastive losses."""

from __future__ import annotations

import shlex
import warnings
from dataclasses import dataclass
from functools import partial
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .align import LearnableTemperature, _temperature, normalize_rows
from .errors import ParameterError
from .scene import SceneSample, SectorSpec, partition_sectors

VIEWS = ("global", "eye", "sector")
DEFAULT_VIEW_ANGLES = (360, 120, 60)


@dataclass
class CaptionRecord:
    scene_id: str
    view: str
    theta_deg: float
    phi_deg: float
    sector_index: int
    text: str
    point_indices: np.ndarray

    def __post_init__(self):
        self.point_indices = np.asarray(self.point_indices, dtype=np.int64)
        if self.view not in VIEWS:
            raise ParameterError(f"unknown view {self.view!r}")
        if SectorSpec(self.theta_deg, self.phi_deg).view != self.view:
            raise ParameterError(f"view {self.view!r} inconsistent with theta={self.theta_deg}")
        if self.point_indices.size == 0:
            raise ParameterError("caption record covers no points")


@dataclass
class CaptionLossWeights:
    alpha: float = 1.0
    beta: float = 0.8
    gamma: float = 0.8

    def __post_init__(self):
        w = (self.alpha, self.beta, self.gamma)
        if min(w) < 0 or max(w) <= 0:
            raise ParameterError("caption weights must be non-negative with at least one positive")

    def for_view(self, view):
        return {"global": self.alpha, "eye": self.beta, "sector": self.gamma}[view]


# Single shared caption temperature, exponentially parameterized.
Temperature = LearnableTemperature


def default_specs(angles=DEFAULT_VIEW_ANGLES, phi=0.0):
    return [SectorSpec(float(a), 0.0 if a == 360 else float(phi)) for a in angles]


def stub_captioner(region, label_names) -> str:
    """Template caption naming the classes present, most frequent first (ties by id)."""
    labels = np.asarray(region.sem_labels)
    labels = labels[np.isin(labels, list(label_names))] if label_names else labels[:0]
    if labels.size == 0:
        return "an unlabeled region"
    ids, counts = np.unique(labels, return_counts=True)
    order = sorted(zip(-counts, ids))
    return "a region containing " + ", ".join(label_names[int(i)] for _, i in order)


def build_caption_pairs(sample: SceneSample, specs=None, captioner=None, label_names=None, center=None):
    """One record per non-empty (view spec, sector); the global view gives one record."""
    specs = default_specs() if specs is None else [s if isinstance(s, SectorSpec) else SectorSpec(*s) for s in specs]
    if captioner is None:
        if label_names is None:
            raise ParameterError("need a captioner or label names for the stub captioner")
        captioner = partial(stub_captioner, label_names=label_names)
    records = []
    n = len(sample.cloud)
    for spec in specs:
        view = spec.view
        if view is None:
            raise ParameterError(f"theta={spec.theta_deg} is neither a sector, eye nor global view")
        if view == "global":
            regions = [(-1, np.arange(n))]
        else:
            assignment = partition_sectors(sample.cloud, spec, center)
            regions = [(j, m) for j, m in enumerate(assignment.membership) if len(m)]
        for j, idx in regions:
            try:
                text = captioner(sample.cloud.subset(idx))
            except Exception as exc:  # noqa: BLE001 - any captioner failure skips the region
                warnings.warn(f"captioner failed on {sample.scene_id} view={view} sector={j}: {exc}")
                continue
            records.append(CaptionRecord(sample.scene_id, view, spec.theta_deg, spec.phi_deg, j, text, idx))
    return records


def caption_infonce(point_feats, text_feats, tau=0.07) -> torch.Tensor:
    """Point-to-text InfoNCE; row i of each array is a positive pair."""
    if point_feats.shape[0] == 0:
        raise ParameterError("caption loss over zero pairs")
    if point_feats.shape != text_feats.shape:
        raise ParameterError(f"shape mismatch {tuple(point_feats.shape)} vs {tuple(text_feats.shape)}")
    for name, x in (("point", point_feats), ("text", text_feats)):
        norms = x.detach().norm(dim=-1)
        if not torch.allclose(norms, torch.ones_like(norms), atol=1e-4):
            warnings.warn(f"{name} features not unit-normalized; normalizing")
    point_feats = normalize_rows(point_feats)
    text_feats = normalize_rows(text_feats)
    logits = point_feats @ text_feats.T / _temperature(tau, point_feats.dtype)
    return -torch.diagonal(F.log_softmax(logits, dim=1)).mean()


def combined_caption_loss(l_global, l_eye, l_sector, weights: CaptionLossWeights | None = None):
    w = weights or CaptionLossWeights()
    return w.alpha * l_global + w.beta * l_eye + w.gamma * l_sector


def region_feature(per_point_feats, record: CaptionRecord, projector) -> torch.Tensor:
    """Mean of the region's per-point features, projected and normalized."""
    idx = np.asarray(record.point_indices if isinstance(record, CaptionRecord) else record)
    if idx.size == 0:
        raise ParameterError("empty region")
    feats = torch.as_tensor(per_point_feats)
    mean = feats[torch.as_tensor(idx)].mean(dim=0, keepdim=True)
    return projector(mean)[0]


# ---------------------------------------------------------------------------
# manifest


def write_caption_manifest(records, path) -> None:
    lines = []
    for r in records:
        idx = ",".join(str(int(i)) for i in r.point_indices)
        text = '"' + r.text.replace("\\", "\\\\").replace('"', '\\"') + '"'
        lines.append(f"{r.scene_id} {r.view} {r.theta_deg:g} {r.phi_deg:g} {r.sector_index} {text} {idx}")
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_caption_manifest(path) -> list[CaptionRecord]:
    records = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        tok = shlex.split(line)
        if len(tok) != 7:
            raise ParameterError(f"caption manifest line {lineno}: expected 7 fields, got {len(tok)}")
        sid, view, theta, phi, j, text, idx = tok
        records.append(
            CaptionRecord(sid, view, float(theta), float(phi), int(j), text, [int(v) for v in idx.split(",")])
        )
    return records
