"""Run configuration and its ``key = value`` file format."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError
from .extractor import FUSION_MODES

DEFAULT_CLASS_NAMES = ("chair", "table", "sofa", "lamp")


@dataclass
class RunConfig:
    # optimisation
    optimizer: str = "adamw"
    lr: float = 1e-4
    weight_decay: float = 0.01
    epochs: int = 180
    batch_size: int = 4
    seed: int = 0
    grad_clip: float = 0.0  # max global grad norm; 0 disables
    warmup_steps: int = 0
    lr_schedule: str = "constant"  # or "cosine": decay to 0 over the run after warmup
    # method
    view_angles: tuple = (360, 120, 60)
    phi_deg: float = 0.0
    fusion_mode: str | None = None
    alpha: float = 1.0
    beta: float = 0.8
    gamma: float = 0.8
    use_depth_modality: bool = True
    use_hfe: bool = True
    use_pcl: bool = True
    caption_tau_init: float = 0.07
    modal_eps_init: float = 0.07
    # model sizes
    n_layers: int = 3
    embed_dim: int = 64
    n_patches: int = 16
    neighbors_per_patch: int = 8
    mask_ratio: float = 0.6
    joint_dim: int = 32
    depth_patch_size: int = 32
    text_provider: str = "stub-v1"
    provider_seed: int = 0
    # synthetic data
    n_train_scenes: int = 20
    n_eval_scenes: int = 10
    n_points: int = 256
    class_names: tuple = DEFAULT_CLASS_NAMES
    novel_ids: tuple = (3,)
    color_noise: float = 20.0
    image_size: int = 32
    min_classes_per_scene: int = 2

    def __post_init__(self):
        self.view_angles = tuple(float(a) for a in self.view_angles)
        self.class_names = tuple(self.class_names)
        self.novel_ids = tuple(int(i) for i in self.novel_ids)
        if self.optimizer != "adamw":
            raise ConfigError(f"unsupported optimizer {self.optimizer!r}")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.fusion_mode is not None:
            if not self.use_hfe:
                raise ConfigError("fusion_mode set while use_hfe is false")
            if self.fusion_mode not in FUSION_MODES:
                raise ConfigError(f"unknown fusion mode {self.fusion_mode!r}")
        if not self.view_angles and self.use_pcl:
            raise ConfigError("use_pcl needs at least one view angle")
        if any(i >= len(self.class_names) or i < 0 for i in self.novel_ids):
            raise ConfigError("novel ids outside the class list")

    @property
    def effective_fusion(self) -> str:
        return self.fusion_mode or "local_global_attn"

    @property
    def base_ids(self):
        return tuple(i for i in range(len(self.class_names)) if i not in self.novel_ids)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def snapshot(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out

    def snapshot_hash(self) -> str:
        return hash_snapshot(self.snapshot())


def hash_snapshot(snapshot: dict) -> str:
    blob = json.dumps(snapshot, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


PAPER_PRESET = RunConfig()
# Small enough to train in well under a minute on one CPU core.
TOY_PRESET = RunConfig(
    lr=1e-2,
    grad_clip=1.0,
    warmup_steps=10,
    lr_schedule="cosine",
    epochs=10,
    batch_size=4,
    n_layers=2,
    embed_dim=32,
    joint_dim=32,
    depth_patch_size=8,
)


def _coerce(f, raw: str):
    raw = raw.strip()
    t = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
    if raw.lower() in ("none", "") and "None" in t:
        return None
    if t.startswith("bool"):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{f.name}: not a boolean: {raw!r}")
    if t.startswith("tuple"):
        items = [s.strip() for s in raw.replace("+", ",").split(",") if s.strip()]
        if f.name == "class_names":
            return tuple(items)
        return tuple(float(s) if "." in s else int(s) for s in items)
    try:
        if t.startswith("int"):
            return int(raw)
        if t.startswith("float"):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{f.name}: cannot parse {raw!r}") from None
    return raw


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    by_name = {f.name: f for f in fields(RunConfig)}
    changes = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key == "preset":
            base = {"paper": PAPER_PRESET, "toy": TOY_PRESET}.get(value)
            if base is None:
                raise ConfigError(f"unknown preset {value!r}")
            continue
        if key not in by_name:
            raise ConfigError(f"config line {lineno}: unknown key {key!r}")
        changes[key] = _coerce(by_name[key], value)
    base = base or PAPER_PRESET
    return base.replace(**changes)


def load_config(path, env=None) -> RunConfig:
    cfg = parse_config_text(Path(path).read_text())
    env = os.environ if env is None else env
    if env.get("UNIMOV_SEED"):
        cfg = cfg.replace(seed=int(env["UNIMOV_SEED"]))
    return cfg


def config_to_text(cfg: RunConfig) -> str:
    lines = []
    for k, v in cfg.snapshot().items():
        if isinstance(v, list):
            v = ",".join(str(x) for x in v)
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"
