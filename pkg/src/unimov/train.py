"""Toy training loop over the overall multimodal objective, and ablation grids."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from functools import partial

import numpy as np
import torch
import torch.nn as nn

from .align import (
    DepthEncoder,
    DepthEncoderConfig,
    LearnableTemperature,
    ProjectionHead,
    get_provider,
    overall_loss,
    symmetric_contrastive,
)
from .captions import CaptionLossWeights, build_caption_pairs, caption_infonce, combined_caption_loss, default_specs
from .config import RunConfig
from .errors import ConfigError
from .evaluate import CategoryPartition, classify_points, semantic_metrics
from .extractor import ExtractorConfig, HierarchicalExtractor, PointwiseExtractor, cloud_inputs
from .scene import class_color, make_synthetic_scene, withhold_labels

log = logging.getLogger(__name__)

COMPONENTS = ("L_PI", "L_PD", "L_DI", "L_capt")
VIEW_COMPONENTS = ("L_capt_global", "L_capt_eye", "L_capt_sector")


class UniModel(nn.Module):
    """Point extractor, projection head, depth encoder and the two temperatures."""

    def __init__(self, cfg: RunConfig):
        super().__init__()
        # each part draws from its own seed so toggling one leaves the others' init unchanged
        torch.manual_seed(cfg.seed)
        if cfg.use_hfe:
            ecfg = ExtractorConfig(
                n_layers=cfg.n_layers,
                embed_dim=cfg.embed_dim,
                n_patches=cfg.n_patches,
                neighbors_per_patch=cfg.neighbors_per_patch,
                mask_ratio=cfg.mask_ratio,
                fusion_mode=cfg.effective_fusion,
            )
            self.extractor = HierarchicalExtractor(ecfg)
        else:
            self.extractor = PointwiseExtractor(cfg.embed_dim)
        torch.manual_seed(cfg.seed + 1)
        self.projection = ProjectionHead(cfg.embed_dim, cfg.joint_dim)
        torch.manual_seed(cfg.seed + 2)
        self.depth_encoder = DepthEncoder(cfg.joint_dim, DepthEncoderConfig(patch_size=cfg.depth_patch_size))
        self.caption_tau = LearnableTemperature(cfg.caption_tau_init)
        self.modal_eps = LearnableTemperature(cfg.modal_eps_init)
        if not cfg.use_depth_modality:
            self.depth_encoder.requires_grad_(False)
        if not cfg.use_pcl:
            self.caption_tau.requires_grad_(False)

    @property
    def min_points(self):
        ex = self.extractor
        if isinstance(ex, HierarchicalExtractor):
            return ex.cfg.n_patches * ex.cfg.neighbors_per_patch
        return 1

    def point_embeddings(self, cloud) -> np.ndarray:
        """Per-point joint-space embeddings (N x d) in eval mode."""
        xyz, feats = cloud_inputs(cloud, self.min_points)
        was = self.training
        self.eval()
        with torch.no_grad():
            per_point, _ = self.extractor(xyz, feats)
            emb = self.projection(per_point[0, : len(cloud)])
        self.train(was)
        return emb.numpy()


@dataclass
class RunReport:
    config: dict
    epochs: list = field(default_factory=list)
    steps: list = field(default_factory=list)
    metrics: dict = field(default_factory=dict)
    per_class_iou: dict = field(default_factory=dict)
    wall_clock: float = 0.0
    label: str = ""

    def to_dict(self, include_timing=True):
        d = {
            "label": self.label,
            "config": self.config,
            "epochs": self.epochs,
            "steps": self.steps,
            "metrics": self.metrics,
            "per_class_iou": {str(k): v for k, v in self.per_class_iou.items()},
        }
        if include_timing:
            d["wall_clock"] = self.wall_clock
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(
            d["config"], d["epochs"], d["steps"], d["metrics"],
            {int(k): v for k, v in d.get("per_class_iou", {}).items()},
            d.get("wall_clock", 0.0), d.get("label", ""),
        )  # fmt: skip


# ---------------------------------------------------------------------------
# data


def toy_partition(cfg: RunConfig) -> CategoryPartition:
    names = dict(enumerate(cfg.class_names))
    return CategoryPartition(cfg.base_ids, cfg.novel_ids, (), "toy", names)


def make_provider(cfg: RunConfig):
    """Frozen stub tower that knows every concept's reference color."""
    concepts = {name: class_color(i) for i, name in enumerate(cfg.class_names)}
    return get_provider(cfg.text_provider, d=cfg.joint_dim, seed=cfg.provider_seed, concepts=concepts)


def make_toy_scenes(cfg: RunConfig, split: str = "train"):
    """Synthetic scenes, each holding a seeded random subset of the classes.

    Per-scene randomness is keyed by (seed, split, index) only.
    """
    count = cfg.n_train_scenes if split == "train" else cfg.n_eval_scenes
    offset = 0 if split == "train" else 100_000
    k = len(cfg.class_names)
    scenes = []
    for i in range(count):
        key = [cfg.seed, offset + i]
        rng = np.random.default_rng(key)
        n_cls = int(rng.integers(min(cfg.min_classes_per_scene, k), k + 1))
        classes = sorted(rng.choice(k, size=n_cls, replace=False).tolist())
        scene_seed = int(np.random.SeedSequence(key).generate_state(1)[0])
        scenes.append(
            make_synthetic_scene(
                scene_seed, cfg.n_points, classes,
                image_size=cfg.image_size, color_noise=cfg.color_noise, scene_id=f"{split}_{i:03d}",
            )
        )  # fmt: skip
    return scenes


def prepare_training_scenes(scenes, cfg: RunConfig, partition: CategoryPartition):
    """Withhold novel labels, then attach base-only captions for the configured views."""
    names = {i: n for i, n in enumerate(cfg.class_names) if i in partition.base_ids}
    specs = default_specs(cfg.view_angles, cfg.phi_deg)
    out = []
    for s in scenes:
        s = withhold_labels(s, partition.base_ids)
        s.captions = build_caption_pairs(s, specs, label_names=names) if specs else []
        out.append(s)
    return out


# ---------------------------------------------------------------------------
# training


def _batch_seed(seed, epoch, step):
    return int(np.random.SeedSequence([seed, epoch, step]).generate_state(1)[0])


def lr_factor(step, cfg: RunConfig, total_steps: int) -> float:
    """Linear warmup over ``warmup_steps``, then constant or cosine decay."""
    if step < cfg.warmup_steps:
        return (step + 1) / cfg.warmup_steps
    if cfg.lr_schedule == "cosine":
        span = max(total_steps - cfg.warmup_steps, 1)
        return 0.5 * (1 + math.cos(math.pi * min(step - cfg.warmup_steps, span) / span))
    return 1.0


def _forward_batch(model, cfg, batch, provider, text_cache, generator):
    per_point_list, pooled_list = [], []
    for s in batch:
        xyz, feats = cloud_inputs(s.cloud, model.min_points)
        per_point, pooled = model.extractor(xyz, feats, generator)
        per_point_list.append(per_point[0, : len(s.cloud)])
        pooled_list.append(per_point[0, : len(s.cloud)].max(dim=0).values)
    f_p = model.projection(torch.stack(pooled_list))
    f_img = torch.stack([text_cache[("image", s.scene_id)] for s in batch])
    zero = torch.zeros((), dtype=f_p.dtype)

    parts = {"L_PI": symmetric_contrastive(f_p, f_img, model.modal_eps)}
    if cfg.use_depth_modality:
        depth = torch.as_tensor(np.stack([s.depth for s in batch]), dtype=f_p.dtype)
        f_d = model.depth_encoder(depth)
        parts["L_PD"] = symmetric_contrastive(f_p, f_d, model.modal_eps)
        parts["L_DI"] = symmetric_contrastive(f_d, f_img, model.modal_eps)
    else:
        parts["L_PD"] = parts["L_DI"] = zero

    weights = CaptionLossWeights(cfg.alpha, cfg.beta, cfg.gamma)
    for view in ("global", "eye", "sector"):
        key = f"L_capt_{view}"
        regions, texts = [], []
        if cfg.use_pcl:
            for pp, s in zip(per_point_list, batch):
                for r in s.captions:
                    if r.view == view:
                        regions.append(pp[torch.as_tensor(r.point_indices)].mean(dim=0))
                        texts.append(text_cache[("text", r.text)])
        if regions:
            f_r = model.projection(torch.stack(regions))
            parts[key] = caption_infonce(f_r, torch.stack(texts), model.caption_tau)
        else:
            parts[key] = zero
    # aggregate in float64 so the logged total equals the logged parts
    p64 = {k: v.double() for k, v in parts.items()}
    p64["L_capt"] = combined_caption_loss(p64["L_capt_global"], p64["L_capt_eye"], p64["L_capt_sector"], weights)
    total = overall_loss(p64["L_PI"], p64["L_PD"], p64["L_DI"], p64["L_capt"])
    return total, p64


def evaluate_model(model, cfg: RunConfig, scenes, provider, partition):
    ids = sorted(partition.base_ids | partition.novel_ids)
    queries = np.stack([provider.concept_embedding(cfg.class_names[i]) for i in ids])
    preds, gts = [], []
    for s in scenes:
        preds.append(classify_points(model.point_embeddings(s.cloud), queries, ids))
        gts.append(s.cloud.sem_labels)
    return semantic_metrics(np.concatenate(preds), np.concatenate(gts), partition)


def train_toy(cfg: RunConfig, scenes, eval_scenes=None, partition=None, provider=None, label=""):
    """Train on ``scenes`` (novel labels already withheld) and evaluate on ``eval_scenes``."""
    t0 = time.perf_counter()
    partition = partition or toy_partition(cfg)
    provider = provider or make_provider(cfg)
    for s in scenes:
        if np.isin(s.cloud.sem_labels, list(partition.novel_ids)).any():
            raise ConfigError(f"training scene {s.scene_id} still carries novel-class labels")
        if cfg.use_pcl and not s.captions:
            raise ConfigError(f"scene {s.scene_id} has no captions but use_pcl is set")

    threads = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        model = UniModel(cfg)
        text_cache = {}
        for s in scenes:
            text_cache[("image", s.scene_id)] = torch.as_tensor(provider.image_encode(s.image), dtype=torch.float32)
            for r in s.captions:
                if ("text", r.text) not in text_cache:
                    text_cache[("text", r.text)] = torch.as_tensor(provider.text_encode(r.text), dtype=torch.float32)
        params = [p for p in model.parameters() if p.requires_grad]
        opt = torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
        total_steps = cfg.epochs * -(-len(scenes) // cfg.batch_size)
        sched = torch.optim.lr_scheduler.LambdaLR(opt, partial(lr_factor, cfg=cfg, total_steps=total_steps))
        report = RunReport(cfg.snapshot(), label=label)
        model.train()
        for epoch in range(cfg.epochs):
            order = np.random.default_rng([cfg.seed, epoch]).permutation(len(scenes))
            sums = dict.fromkeys(COMPONENTS + VIEW_COMPONENTS + ("overall",), 0.0)
            n_steps = 0
            for step, start in enumerate(range(0, len(scenes), cfg.batch_size)):
                batch = [scenes[i] for i in order[start : start + cfg.batch_size]]
                gen = torch.Generator().manual_seed(_batch_seed(cfg.seed, epoch, step))
                total, parts = _forward_batch(model, cfg, batch, provider, text_cache, gen)
                opt.zero_grad()
                total.backward()
                if cfg.grad_clip > 0:
                    nn.utils.clip_grad_norm_(params, cfg.grad_clip)
                opt.step()
                sched.step()
                entry = {"epoch": epoch + 1, "step": step}
                entry.update({k: float(parts[k].detach()) for k in COMPONENTS + VIEW_COMPONENTS})
                entry["overall"] = float(total.detach())
                report.steps.append(entry)
                for k in sums:
                    sums[k] += entry[k]
                n_steps += 1
            report.epochs.append({"epoch": epoch + 1, **{k: v / n_steps for k, v in sums.items()}})
            log.info("epoch %d overall %.4f", epoch + 1, report.epochs[-1]["overall"])
        if eval_scenes:
            m = evaluate_model(model, cfg, eval_scenes, provider, partition)
            report.metrics = m.as_dict()
            report.per_class_iou = {int(k): float(v) for k, v in m.per_class_iou.items()}
    finally:
        torch.set_num_threads(threads)
    report.wall_clock = time.perf_counter() - t0
    return model, report


def run_toy(cfg: RunConfig, label=""):
    """Generate toy data for ``cfg`` and train/evaluate once."""
    partition = toy_partition(cfg)
    train = prepare_training_scenes(make_toy_scenes(cfg, "train"), cfg, partition)
    held_out = make_toy_scenes(cfg, "eval")
    return train_toy(cfg, train, held_out, partition, label=label)


# ---------------------------------------------------------------------------
# ablations


def _check(mark):
    return "x" if mark else "-"


GRIDS = {
    "table4": [
        (f"Uni={_check(u)} HFE={_check(h)} PCL={_check(p)}", {"use_depth_modality": u, "use_hfe": h, "use_pcl": p, "fusion_mode": None})
        for u, h, p in [
            (0, 0, 0), (0, 0, 1), (0, 1, 0), (1, 0, 0),
            (1, 1, 0), (1, 0, 1), (0, 1, 1), (1, 1, 1),
        ]  # fmt: skip
    ],
    "table5": [
        ("Local PB", {"fusion_mode": "local_only"}),
        ("Global PM", {"fusion_mode": "global_only"}),
        ("Local PB + Global PM", {"fusion_mode": "local_global"}),
        ("Local PB + Attn", {"fusion_mode": "local_attn"}),
        ("Global PM + Attn", {"fusion_mode": "global_attn"}),
        ("Local PB + Global PM + Attn", {"fusion_mode": "local_global_attn"}),
    ],
    "table6": [
        ("sector-view 30", {"view_angles": (30,)}),
        ("sector-view 45", {"view_angles": (45,)}),
        ("sector-view 60", {"view_angles": (60,)}),
        ("sector-view 90", {"view_angles": (90,)}),
        ("eye-view 120", {"view_angles": (120,)}),
        ("eye-view 180", {"view_angles": (180,)}),
        ("global-view 360", {"view_angles": (360,)}),
        ("combined-view 360+60", {"view_angles": (360, 60)}),
        ("combined-view 360+120", {"view_angles": (360, 120)}),
        ("combined-view 360+60+120", {"view_angles": (360, 60, 120)}),
    ],
}


def grid_rows(grid):
    if isinstance(grid, str):
        if grid not in GRIDS:
            raise ConfigError(f"unknown grid {grid!r}; known: {sorted(GRIDS)}")
        return GRIDS[grid]
    return list(grid)


def run_ablation(grid, base_config: RunConfig):
    """One report per grid row, in the grid's order."""
    rows = grid_rows(grid)
    configs = []
    for label, overrides in rows:
        changes = {k: (bool(v) if k.startswith("use_") else v) for k, v in overrides.items()}
        try:
            configs.append((label, base_config.replace(**changes)))
        except ConfigError as exc:
            raise ConfigError(f"grid row {label!r}: {exc}") from None
    return [(label, run_toy(cfg, label)[1]) for label, cfg in configs]
