"""Open-vocabulary 3D scene understanding with unified point/image/depth/text alignment."""

from .align import StubProvider, depth_encode, get_provider, symmetric_contrastive
from .captions import build_caption_pairs, caption_infonce, combined_caption_loss
from .config import PAPER_PRESET, TOY_PRESET, RunConfig, load_config
from .errors import UnimovError
from .evaluate import CategoryPartition, classify_points, instance_metrics, semantic_metrics
from .extractor import ExtractorConfig, HierarchicalExtractor, extract
from .scene import PointCloud, SceneSample, SectorSpec, load_scene, partition_sectors, render_depth
from .train import RunReport, run_ablation, run_toy, train_toy

__version__ = "0.1.0"

__all__ = [
    "CategoryPartition", "ExtractorConfig", "HierarchicalExtractor", "PAPER_PRESET", "PointCloud",
    "RunConfig", "RunReport", "SceneSample", "SectorSpec", "StubProvider", "TOY_PRESET", "UnimovError",
    "build_caption_pairs", "caption_infonce", "classify_points", "combined_caption_loss", "depth_encode",
    "extract", "get_provider", "instance_metrics", "load_config", "load_scene", "partition_sectors",
    "render_depth", "run_ablation", "run_toy", "semantic_metrics", "symmetric_contrastive", "train_toy",
]  # fmt: skip
