"""Encoder providers, depth encoder, projection head and the cross-modal losses."""

from __future__ import annotations

import hashlib
import logging
import math
import re
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ParameterError
from .extractor import Block, Mlp

log = logging.getLogger(__name__)

MODALITIES = ("point", "image", "depth", "text")
CONCEPT_TEMPLATE = "{}"


def normalize_rows(x: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    """Unit-normalize rows; an all-zero row maps to the first basis vector."""
    norm = x.norm(dim=-1, keepdim=True)
    unit = x / norm.clamp_min(eps)
    fallback = torch.zeros_like(x)
    fallback[..., 0] = 1.0
    return torch.where(norm > eps, unit, fallback)


@dataclass
class ModalEmbeddings:
    modality: str
    vectors: torch.Tensor

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ParameterError(f"unknown modality {self.modality!r}")
        if self.vectors.dim() != 2:
            raise ParameterError("embeddings must be a B x d array")
        norms = self.vectors.detach().norm(dim=-1)
        if not torch.allclose(norms, torch.ones_like(norms), atol=1e-5):
            raise ParameterError(f"{self.modality} embeddings are not unit-normalized")


class LearnableTemperature(nn.Module):
    """Positive temperature stored as its logarithm."""

    def __init__(self, init: float = 0.07):
        super().__init__()
        if init <= 0:
            raise ParameterError("temperature must be positive")
        self.log_value = nn.Parameter(torch.tensor(math.log(init)))

    @property
    def value(self) -> torch.Tensor:
        return self.log_value.exp()

    def forward(self):
        return self.value


def _temperature(t, dtype=None):
    if isinstance(t, LearnableTemperature):
        return t.value
    # plain numbers follow the feature dtype; as_tensor alone would give float32
    t = torch.as_tensor(t, dtype=dtype if not torch.is_tensor(t) else None)
    if (t <= 0).any():
        raise ParameterError("temperature must be positive")
    return t


# ---------------------------------------------------------------------------
# frozen providers


_TOKEN = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> list[str]:
    return _TOKEN.findall(text.lower())


@lru_cache(maxsize=4096)
def _token_vector(token: str, d: int, seed: int) -> np.ndarray:
    digest = hashlib.sha256(f"{seed}/{token}".encode()).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    return rng.standard_normal(d)


def stub_text_encoder(text: str, d: int = 32, seed: int = 0) -> np.ndarray:
    """Sum of seeded per-token vectors, normalized. Shared words give correlated vectors."""
    tokens = tokenize(text)
    if not tokens:
        raise ParameterError("cannot encode empty text")
    v = np.zeros(d)
    for tok in tokens:
        v += _token_vector(tok, d, seed)
    return v / np.linalg.norm(v)


class StubProvider:
    """Deterministic stand-in for a frozen, jointly trained image/text tower pair.

    ``concepts`` maps a concept name to a reference RGB color. The image tower
    assigns every non-empty pixel to its nearest reference color and returns
    the area-weighted mix of the matching concept text embeddings, which is how
    a pretrained tower "knows" categories it was never shown labels for here.
    Without concepts it falls back to a hashed color histogram.
    """

    provider_id = "stub-v1"

    def __init__(self, d: int = 32, seed: int = 0, concepts=None, template: str = CONCEPT_TEMPLATE):
        self.d = d
        self.seed = seed
        self.template = template
        self.concepts = dict(concepts or {})
        self._names = list(self.concepts)
        self._colors = np.array([self.concepts[n] for n in self._names], dtype=np.float64).reshape(-1, 3)

    def text_encode(self, text: str) -> np.ndarray:
        return stub_text_encoder(text, self.d, self.seed)

    def concept_embedding(self, name: str) -> np.ndarray:
        return self.text_encode(self.template.format(name))

    def image_encode(self, image) -> np.ndarray:
        img = np.asarray(image, dtype=np.float64).reshape(-1, 3)
        px = img[img.sum(axis=1) > 0]
        v = np.zeros(self.d)
        if len(px) and len(self._names):
            dist = ((px[:, None, :] - self._colors[None]) ** 2).sum(-1)
            counts = np.bincount(dist.argmin(axis=1), minlength=len(self._names))
            for name, c in zip(self._names, counts):
                if c:
                    v += c * self.concept_embedding(name)
        elif len(px):
            bins = np.minimum(px // 64, 3).astype(int)
            codes, counts = np.unique(bins[:, 0] * 16 + bins[:, 1] * 4 + bins[:, 2], return_counts=True)
            for code, c in zip(codes, counts):
                v += c * _token_vector(f"rgbbin{code}", self.d, self.seed)
        else:
            v = _token_vector("emptyimage", self.d, self.seed)
        return v / np.linalg.norm(v)

    def text_batch(self, texts, dtype=torch.float32) -> torch.Tensor:
        return torch.as_tensor(np.stack([self.text_encode(t) for t in texts]), dtype=dtype)

    def image_batch(self, images, dtype=torch.float32) -> torch.Tensor:
        return torch.as_tensor(np.stack([self.image_encode(im) for im in images]), dtype=dtype)


PROVIDERS = {StubProvider.provider_id: StubProvider}


def get_provider(provider_id: str = "stub-v1", **kwargs):
    try:
        cls = PROVIDERS[provider_id]
    except KeyError:
        raise ParameterError(f"unknown provider {provider_id!r}; known: {sorted(PROVIDERS)}") from None
    return cls(**kwargs)


# ---------------------------------------------------------------------------
# trainable encoders


@dataclass
class DepthEncoderConfig:
    patch_size: int = 32
    gate_init: float = 0.0
    trainable: bool = True
    width: int = 64
    n_heads: int = 4

    def __post_init__(self):
        if self.patch_size < 1:
            raise ParameterError("patch_size must be >= 1")


class DepthEncoder(nn.Module):
    """Patch-token self-attention encoder for depth maps with a gated aggregator.

    ``out = head(cls_token + gate * aggregate(patch_tokens))``; the gate starts
    at ``gate_init``. All-zero maps yield a learned null embedding.
    """

    def __init__(self, d: int = 32, config: DepthEncoderConfig | None = None):
        super().__init__()
        self.cfg = config or DepthEncoderConfig()
        w, p = self.cfg.width, self.cfg.patch_size
        self.patch_embed = nn.Linear(p * p, w)
        self.pos = Mlp([2, w, w])
        self.cls = nn.Parameter(torch.zeros(w))
        self.block = Block(w, self.cfg.n_heads)
        self.aggregate = nn.Linear(w, w)
        self.gate = nn.Parameter(torch.tensor(float(self.cfg.gate_init)))
        self.head = nn.Linear(w, d)
        self.null = nn.Parameter(torch.randn(d) * 0.02)
        self.requires_grad_(self.cfg.trainable)
        self.last_null_mask = None

    def patches(self, depth):
        B, H, W = depth.shape
        p = self.cfg.patch_size
        depth = F.pad(depth, (0, -W % p, 0, -H % p))
        rows, cols = depth.shape[1] // p, depth.shape[2] // p
        tiles = depth.unfold(1, p, p).unfold(2, p, p).reshape(B, rows * cols, p * p)
        r, c = torch.meshgrid(torch.arange(rows), torch.arange(cols), indexing="ij")
        coords = torch.stack([(r.flatten() + 0.5) / rows, (c.flatten() + 0.5) / cols], -1)
        return tiles, coords.to(depth.dtype)

    def forward(self, depth: torch.Tensor, use_gate: bool = True) -> torch.Tensor:
        if depth.dim() == 2:
            depth = depth.unsqueeze(0)
        scale = depth.amax(dim=(1, 2), keepdim=True)
        null_mask = scale.flatten() <= 0
        depth = torch.where(scale > 0, depth / scale.clamp_min(1e-12), torch.zeros_like(depth))
        tiles, coords = self.patches(depth)
        tokens = self.patch_embed(tiles) + self.pos(coords)
        cls = self.cls.expand(tokens.shape[0], 1, -1)
        h = self.block(torch.cat([cls, tokens], dim=1))
        out = h[:, 0]
        if use_gate:
            out = out + self.gate * self.aggregate(h[:, 1:].mean(dim=1))
        emb = normalize_rows(self.head(out))
        self.last_null_mask = null_mask
        if null_mask.any():
            log.warning("depth map with no valid pixels; using the null embedding")
            emb = torch.where(null_mask.unsqueeze(-1), normalize_rows(self.null).expand_as(emb), emb)
        return emb


def depth_encode(depth, config: DepthEncoderConfig | None = None, encoder: DepthEncoder | None = None, d: int = 32):
    encoder = encoder or DepthEncoder(d, config)
    t = torch.as_tensor(np.asarray(depth), dtype=next(encoder.parameters()).dtype)
    return encoder(t)[0]


class ProjectionHead(nn.Module):
    """Two-layer projection from extractor width into the joint space, unit rows."""

    def __init__(self, in_dim: int = 64, out_dim: int = 32, hidden: int | None = None):
        super().__init__()
        hidden = hidden or in_dim
        self.fc1 = nn.Linear(in_dim, hidden)
        self.fc2 = nn.Linear(hidden, out_dim)
        nn.init.zeros_(self.fc1.bias)
        nn.init.zeros_(self.fc2.bias)

    def forward(self, x):
        return normalize_rows(self.fc2(F.gelu(self.fc1(x))))


def project_point_features(feats, head: ProjectionHead) -> torch.Tensor:
    return head(torch.as_tensor(feats, dtype=head.fc1.weight.dtype))


# ---------------------------------------------------------------------------
# losses


def _vectors(x):
    return x.vectors if isinstance(x, ModalEmbeddings) else x


def symmetric_contrastive(a, b, eps=0.07) -> torch.Tensor:
    """Mean over positive pairs (i, i) of both directions' log-softmax, halved."""
    a, b = _vectors(a), _vectors(b)
    if a.shape[0] != b.shape[0]:
        raise ParameterError(f"batch sizes differ: {a.shape[0]} vs {b.shape[0]}")
    if a.shape[0] == 0:
        raise ParameterError("empty batch")
    logits = a @ b.T / _temperature(eps, a.dtype)
    a_to_b = torch.diagonal(F.log_softmax(logits, dim=1))
    b_to_a = torch.diagonal(F.log_softmax(logits, dim=0))
    return (-0.5 * a_to_b - 0.5 * b_to_a).mean()


def overall_loss(l_pi, l_pd, l_di, l_capt_total):
    return l_pi + l_pd + l_di + l_capt_total
