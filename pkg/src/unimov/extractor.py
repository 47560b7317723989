"""Hierarchical point-cloud feature extractor.

Input alignment, stacked spatial-aware layers (a patch-token local branch and a
masked encoder/decoder global branch running in parallel), gated residual
linking between adjacent layers, and the bottom-up/top-down attention block.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import GroupingError, NumericError, ParameterError

FUSION_MODES = (
    "local_only",
    "global_only",
    "local_global",
    "local_attn",
    "global_attn",
    "local_global_attn",
)


@dataclass
class ExtractorConfig:
    n_layers: int = 3
    embed_dim: int = 64
    n_patches: int = 16
    neighbors_per_patch: int = 8
    mask_ratio: float = 0.6
    fusion_mode: str = "local_global_attn"
    n_heads: int = 4
    in_features: int = 3  # per-point channels besides xyz (rgb)

    def __post_init__(self):
        if self.n_layers < 1:
            raise ParameterError("n_layers must be >= 1")
        if self.embed_dim < 1 or self.embed_dim % self.n_heads:
            raise ParameterError("embed_dim must be a positive multiple of n_heads")
        if self.n_patches < 1 or self.neighbors_per_patch < 1:
            raise ParameterError("n_patches and neighbors_per_patch must be >= 1")
        if not (0 <= self.mask_ratio < 1):
            raise ParameterError(f"mask_ratio must lie in [0, 1), got {self.mask_ratio}")
        if self.fusion_mode not in FUSION_MODES:
            raise ParameterError(f"unknown fusion mode {self.fusion_mode!r}")

    @property
    def use_local(self):
        return self.fusion_mode.startswith("local")

    @property
    def use_global(self):
        return "global" in self.fusion_mode

    @property
    def use_attn(self):
        return self.fusion_mode.endswith("attn")


# ---------------------------------------------------------------------------
# grouping


@torch.no_grad()
def farthest_point_sample(xyz: torch.Tensor, n_samples: int) -> torch.Tensor:
    """Indices (B, n_samples) of farthest-point samples.

    The first sample is the point farthest from the centroid, which keeps the
    selection independent of input order.
    """
    B, N, _ = xyz.shape
    if n_samples > N:
        raise GroupingError(f"cannot sample {n_samples} patch centers from {N} points")
    centroid = xyz.mean(dim=1, keepdim=True)
    dist = ((xyz - centroid) ** 2).sum(-1)
    idx = torch.empty(B, n_samples, dtype=torch.long)
    farthest = dist.argmax(dim=1)
    min_dist = torch.full((B, N), float("inf"), dtype=xyz.dtype)
    batch = torch.arange(B)
    for s in range(n_samples):
        idx[:, s] = farthest
        d = ((xyz - xyz[batch, farthest].unsqueeze(1)) ** 2).sum(-1)
        min_dist = torch.minimum(min_dist, d)
        farthest = min_dist.argmax(dim=1)
    return idx


@torch.no_grad()
def knn_indices(xyz: torch.Tensor, query: torch.Tensor, k: int) -> torch.Tensor:
    """(B, Q, k) indices of the k nearest points of ``xyz`` to each query."""
    d = torch.cdist(query, xyz)
    return d.topk(k, dim=-1, largest=False).indices


def gather(x: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
    """x: (B, N, C), idx: (B, ...) -> (B, ..., C)."""
    B = x.shape[0]
    flat = idx.reshape(B, -1)
    out = torch.gather(x, 1, flat.unsqueeze(-1).expand(-1, -1, x.shape[-1]))
    return out.reshape(*idx.shape, x.shape[-1])


# ---------------------------------------------------------------------------
# building blocks


class Mlp(nn.Sequential):
    def __init__(self, dims):
        layers = []
        for i in range(len(dims) - 1):
            layers.append(nn.Linear(dims[i], dims[i + 1]))
            if i < len(dims) - 2:
                layers.append(nn.GELU())
        super().__init__(*layers)


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, dim, n_heads, mlp_ratio=2):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, n_heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp([dim, dim * mlp_ratio, dim])

    def forward(self, x):
        h = self.norm1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        return x + self.mlp(self.norm2(x))


class AlignmentNet(nn.Module):
    """Regresses a homogeneous 4x4 affine transform from the cloud.

    The output layer starts at zero so an untrained net yields the identity.
    """

    def __init__(self, width=32, n_heads=4):
        super().__init__()
        self.embed = Mlp([3, width, width])
        self.block = Block(width, n_heads)
        self.head = nn.Linear(width, 12)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, xyz):
        h = self.block(self.embed(xyz)).max(dim=1).values
        delta = self.head(h).view(-1, 3, 4)
        top = torch.eye(3, 4, dtype=xyz.dtype) + delta
        bottom = torch.tensor([0.0, 0.0, 0.0, 1.0], dtype=xyz.dtype).expand(xyz.shape[0], 1, 4)
        transform = torch.cat([top, bottom], dim=1)
        return apply_transform(xyz, transform), transform


def apply_transform(xyz, transform):
    return xyz @ transform[:, :3, :3].transpose(1, 2) + transform[:, :3, 3].unsqueeze(1)


class PatchEncoder(nn.Module):
    """Shared mini-PointNet over each group of neighbours."""

    def __init__(self, in_dim, dim):
        super().__init__()
        self.first = Mlp([in_dim, dim // 2, dim // 2])
        self.second = Mlp([dim, dim, dim])

    def forward(self, groups):  # B, g, k, C
        h = self.first(groups)
        pooled = h.max(dim=2, keepdim=True).values.expand_as(h)
        h = self.second(torch.cat([pooled, h], dim=-1))
        return h.max(dim=2).values


class ResidualUnit(nn.Module):
    """Pre-activation residual unit over a 1-D token grid."""

    def __init__(self, channels):
        super().__init__()
        self.conv1 = nn.Conv1d(channels, channels, 3, padding=1, padding_mode="replicate")
        self.conv2 = nn.Conv1d(channels, channels, 3, padding=1, padding_mode="replicate")

    def forward(self, x):
        return x + self.conv2(F.gelu(self.conv1(F.gelu(x))))


class AttentionBlock(nn.Module):
    """Bottom-up/top-down attention map over the token axis, values in (0, 1)."""

    tiny = 1e-6

    def __init__(self, channels, out_channels=None):
        super().__init__()
        out_channels = out_channels or channels
        self.down1 = ResidualUnit(channels)
        self.down2 = ResidualUnit(channels)
        self.skip = ResidualUnit(channels)
        self.up = ResidualUnit(channels)
        self.out = ResidualUnit(channels)
        self.mix1 = nn.Conv1d(channels, channels, 1)
        self.mix2 = nn.Conv1d(channels, out_channels, 1)

    def forward(self, x):  # B, g, C
        h = x.transpose(1, 2)
        length = h.shape[-1]
        if length >= 2:
            d1 = self.down1(F.max_pool1d(h, 2, ceil_mode=True))
            if d1.shape[-1] >= 2:
                d2 = self.down2(F.max_pool1d(d1, 2, ceil_mode=True))
                u = F.interpolate(d2, size=d1.shape[-1], mode="linear", align_corners=False)
                d1 = self.up(u + self.skip(d1))
            o = F.interpolate(self.out(d1), size=length, mode="linear", align_corners=False)
        else:
            o = self.out(h)
        z = self.mix2(F.gelu(self.mix1(o)))
        a = self.tiny + (1 - 2 * self.tiny) * torch.sigmoid(z)
        return a.transpose(1, 2)


def gated_residual(h, gate, link):
    """h + gate * link, the residual linking between adjacent layers."""
    if link is None:
        return h
    return h + gate * link


class LocalBranch(nn.Module):
    """Patch tokens contextualised by self-attention."""

    def __init__(self, in_dim, dim, n_heads, first):
        super().__init__()
        self.first = first
        self.tokenize = PatchEncoder(in_dim, dim) if first else nn.Linear(in_dim, dim)
        self.pos = Mlp([3, dim, dim])
        self.block = Block(dim, n_heads)

    def encode(self, inputs, centers):
        return self.block(self.tokenize(inputs) + self.pos(centers))

    def forward(self, inputs, centers, prev_local=None, gate=None):
        return gated_residual(self.encode(inputs, centers), gate, prev_local)


class GlobalBranch(nn.Module):
    """Masked-token encoder/decoder reconstructing the full token sequence."""

    def __init__(self, in_dim, dim, n_heads, first, mask_ratio):
        super().__init__()
        self.first = first
        self.mask_ratio = mask_ratio
        self.tokenize = PatchEncoder(in_dim, dim) if first else nn.Linear(in_dim, dim)
        self.pos = Mlp([3, dim, dim])
        self.encoder = Block(dim, n_heads)
        self.decoder = Block(dim, n_heads)
        self.mask_token = nn.Parameter(torch.zeros(dim))
        nn.init.normal_(self.mask_token, std=0.02)

    def encode(self, inputs, centers, generator=None):
        tokens = self.tokenize(inputs)
        pos = self.pos(centers)
        B, g, M = tokens.shape
        ratio = self.mask_ratio if self.training else 0.0
        n_mask = int(round(ratio * g))
        if n_mask == 0:
            return self.decoder(self.encoder(tokens + pos) + pos)
        n_mask = min(n_mask, g - 1)
        noise = torch.rand(B, g, generator=generator)
        order = noise.argsort(dim=1)
        visible = order[:, n_mask:]
        enc = self.encoder(gather(tokens + pos, visible))
        full = self.mask_token.expand(B, g, M).clone()
        full = full.scatter(1, visible.unsqueeze(-1).expand(-1, -1, M), enc)
        return self.decoder(full + pos)

    def forward(self, inputs, centers, prev_global=None, gate=None, generator=None):
        return gated_residual(self.encode(inputs, centers, generator), gate, prev_global)


class SpatialAwareLayer(nn.Module):
    def __init__(self, cfg: ExtractorConfig, index: int):
        super().__init__()
        M = cfg.embed_dim
        first = index == 0
        in_dim = 3 + cfg.in_features if first else 2 * M
        self.index = index
        self.local = LocalBranch(in_dim, M, cfg.n_heads, first)
        self.global_ = GlobalBranch(in_dim, M, cfg.n_heads, first, cfg.mask_ratio)
        if not first:
            self.omega1 = nn.Parameter(torch.zeros(M))
            self.omega2 = nn.Parameter(torch.zeros(M))
            self.attention = AttentionBlock(2 * M)


def point_mlp(in_features, dim):
    return Mlp([3 + in_features, dim, dim])


class HierarchicalExtractor(nn.Module):
    """Per-point features (B, N, M) and a max-pooled scene feature (B, M).

    The segmentation head adds the nearest patch's fused feature, scaled by a
    zero-initialised per-channel gate, to a shallow per-point path.
    """

    def __init__(self, cfg: ExtractorConfig | None = None, linking: bool = True):
        super().__init__()
        self.cfg = cfg or ExtractorConfig()
        self.linking = linking
        M = self.cfg.embed_dim
        # built first so it shares its initialisation with PointwiseExtractor under the same seed
        self.point_path = point_mlp(self.cfg.in_features, M)
        self.align = AlignmentNet(n_heads=self.cfg.n_heads)
        self.layers = nn.ModuleList(SpatialAwareLayer(self.cfg, i) for i in range(self.cfg.n_layers))
        self.fuse = nn.Linear(self.cfg.n_layers * 2 * M, M)
        self.context_gate = nn.Parameter(torch.zeros(M))

    @property
    def embed_dim(self):
        return self.cfg.embed_dim

    def group(self, xyz, feats):
        g, k = self.cfg.n_patches, self.cfg.neighbors_per_patch
        N = xyz.shape[1]
        if g > N:
            raise GroupingError(f"{g} patches requested for {N} points")
        center_idx = farthest_point_sample(xyz, g)
        centers = gather(xyz, center_idx)
        nbr = knn_indices(xyz, centers, min(k, N))
        rel = gather(xyz, nbr) - centers.unsqueeze(2)
        groups = torch.cat([rel, gather(feats, nbr)], dim=-1)
        return groups, centers

    def forward(self, xyz, feats, generator=None, return_layers=False):
        if not (torch.isfinite(xyz).all() and torch.isfinite(feats).all()):
            raise NumericError("non-finite extractor input")
        cfg = self.cfg
        skip = self.point_path(torch.cat([xyz, feats], dim=-1))
        xyz, transform = self.align(xyz)
        groups, centers = self.group(xyz, feats)
        B, g = centers.shape[:2]
        zeros = torch.zeros(B, g, cfg.embed_dim, dtype=xyz.dtype)

        x = groups
        prev_l = prev_g = None
        outputs, trace = [], []
        for layer in self.layers:
            link_l = link_g = None
            gate1 = gate2 = None
            if layer.index > 0 and self.linking:
                gate1, gate2 = layer.omega1, layer.omega2
                link_l, link_g = prev_l, prev_g
                if cfg.use_attn:
                    amap = layer.attention(torch.cat([prev_l, prev_g], dim=-1))
                    a_l, a_g = amap.split(cfg.embed_dim, dim=-1)
                    link_l, link_g = a_l * prev_l, a_g * prev_g
            f_l = layer.local(x, centers, link_l, gate1) if cfg.use_local else zeros
            f_g = layer.global_(x, centers, link_g, gate2, generator) if cfg.use_global else zeros
            trace.append((f_l, f_g))
            prev_l, prev_g = f_l, f_g
            x = torch.cat([f_l, f_g], dim=-1)
            outputs.append(x)

        patch = self.fuse(torch.cat(outputs, dim=-1))
        nearest = torch.cdist(xyz, centers).argmin(dim=-1)
        per_point = skip + self.context_gate * gather(patch, nearest)
        pooled = per_point.max(dim=1).values
        if return_layers:
            return per_point, pooled, {"transform": transform, "layers": trace, "centers": centers}
        return per_point, pooled


class PointwiseExtractor(nn.Module):
    """Baseline without the hierarchical layers: the per-point path alone, max pooled."""

    def __init__(self, embed_dim=64, in_features=3):
        super().__init__()
        self.mlp = point_mlp(in_features, embed_dim)
        self._embed_dim = embed_dim

    @property
    def embed_dim(self):
        return self._embed_dim

    def forward(self, xyz, feats, generator=None):
        per_point = self.mlp(torch.cat([xyz, feats], dim=-1))
        return per_point, per_point.max(dim=1).values


# ---------------------------------------------------------------------------
# array-level helpers


def cloud_inputs(cloud, min_points=1, dtype=torch.float32):
    """Centered positions and [-0.5, 0.5] colors for one cloud, tiled up to ``min_points``."""
    pos = cloud.positions - cloud.positions.mean(axis=0)
    col = cloud.colors / 255.0 - 0.5
    n = len(pos)
    if n < min_points:
        idx = np.resize(np.arange(n), min_points)
        pos, col = pos[idx], col[idx]
    xyz = torch.as_tensor(pos, dtype=dtype).unsqueeze(0)
    feats = torch.as_tensor(col, dtype=dtype).unsqueeze(0)
    return xyz, feats


def extract(cloud, config: ExtractorConfig | None = None, model: nn.Module | None = None):
    """Per-point features (N x M) and pooled scene feature (M) as numpy arrays."""
    if model is None:
        model = HierarchicalExtractor(config)
    dtype = next(model.parameters()).dtype
    n = len(cloud)
    need = 1
    if isinstance(model, HierarchicalExtractor):
        need = model.cfg.n_patches * model.cfg.neighbors_per_patch
    xyz, feats = cloud_inputs(cloud, need, dtype)
    was_training = model.training
    model.eval()
    with torch.no_grad():
        per_point, _ = model(xyz, feats)
    model.train(was_training)
    per_point = per_point[0, :n].numpy()
    return per_point, per_point.max(axis=0)
