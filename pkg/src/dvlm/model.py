"""Desk-scale diffusion VLM: toy multi-view vision tower, projector and a
bidirectional transformer with configurable attention plans and a prefix
key/value cache.

Sequence layout is ``[vision | prompt | answer]`` with learned absolute
positions over the whole layout.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from enum import Enum
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import CacheMismatchError, CapacityError, ConfigError, InvalidInputError

N_VIEWS = 5


@dataclass
class ModelConfig:
    vocab_size: int
    n_layers: int = 2
    n_heads: int = 4
    d_model: int = 64
    d_ff: int = 256
    max_context: int = 128
    patch_size: int = 2
    view_grid: int = 6
    channels: int = 3
    d_vision: int = 32
    vision_heads: int = 2
    vision_block: bool = True
    pool: bool = True

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ConfigError("d_model must be divisible by n_heads")
        if self.d_vision % self.vision_heads:
            raise ConfigError("d_vision must be divisible by vision_heads")

    @property
    def view_size(self) -> int:
        return self.view_grid * self.patch_size

    @property
    def image_size(self) -> int:
        return 2 * self.view_size

    @property
    def n_vision_tokens(self) -> int:
        return vision_token_count(self.view_grid, self.pool)

    def to_text(self) -> str:
        return "".join(f"{k}={_fmt(v)}\n" for k, v in asdict(self).items())

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        kw = {}
        for f in fields(cls):
            if f.name in d:
                kw[f.name] = _parse(d[f.name], f.type)
        return cls(**kw)


def _fmt(v) -> str:
    return ("true" if v else "false") if isinstance(v, bool) else str(v)


def _parse(v, typ):
    if not isinstance(v, str):
        return v
    if typ in (bool, "bool"):
        return v.strip().lower() in ("1", "true", "yes", "on")
    if typ in (int, "int"):
        return int(v)
    if typ in (float, "float"):
        return float(v)
    return v


def vision_token_count(view_grid: int, pooled: bool = True) -> int:
    side = math.ceil(view_grid / 2) if pooled else view_grid
    return N_VIEWS * side * side


class PlanKind(str, Enum):
    FULL = "full"
    CAUSAL = "causal"
    PREFIX = "prefix"


@dataclass(frozen=True)
class AttentionPlan:
    kind: PlanKind
    n_img: int
    n_prompt: int
    n_answer: int

    @property
    def prefix_len(self) -> int:
        return self.n_img + self.n_prompt

    @property
    def total(self) -> int:
        return self.n_img + self.n_prompt + self.n_answer

    def allows(self, q: int, k: int) -> bool:
        if self.kind is PlanKind.FULL:
            return True
        if self.kind is PlanKind.CAUSAL:
            return k <= q
        return q >= self.prefix_len or k < self.prefix_len

    def allowed(self) -> torch.Tensor:
        """(T, T) boolean matrix, rows are queries and columns keys."""
        T = self.total
        if self.kind is PlanKind.FULL:
            return torch.ones(T, T, dtype=torch.bool)
        if self.kind is PlanKind.CAUSAL:
            return torch.ones(T, T, dtype=torch.bool).tril()
        m = torch.ones(T, T, dtype=torch.bool)
        m[: self.prefix_len, self.prefix_len :] = False
        return m


def build_plan(kind, n_img: int, n_prompt: int, n_answer: int) -> AttentionPlan:
    if min(n_img, n_prompt, n_answer) < 0:
        raise ConfigError("segment lengths must be non-negative")
    return AttentionPlan(PlanKind(kind), n_img, n_prompt, n_answer)


@dataclass(frozen=True)
class KVCache:
    keys: tuple[torch.Tensor, ...]  # per layer (B, H, P, hd)
    values: tuple[torch.Tensor, ...]
    prefix_len: int


class SelfAttention(nn.Module):
    def __init__(self, d: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.qkv = nn.Linear(d, 3 * d)
        self.proj = nn.Linear(d, d)
        self.record = False
        self.last_weights: Optional[torch.Tensor] = None

    def forward(self, x, bias=None, past=None):
        B, T, D = x.shape
        H = self.n_heads
        q, k, v = self.qkv(x).view(B, T, 3, H, D // H).permute(2, 0, 3, 1, 4)
        kv = (k, v)
        if past is not None:
            pk, pv = past
            if pk.shape[0] != B:
                pk, pv = pk.expand(B, -1, -1, -1), pv.expand(B, -1, -1, -1)
            k = torch.cat([pk, k], dim=2)
            v = torch.cat([pv, v], dim=2)
        att = (q @ k.transpose(-2, -1)) / math.sqrt(D // H)
        if bias is not None:
            att = att + bias
        w = att.softmax(-1)
        if self.record:
            self.last_weights = w.detach()
        y = (w @ v).transpose(1, 2).reshape(B, T, D)
        return self.proj(y), kv


class Block(nn.Module):
    def __init__(self, d: int, n_heads: int, d_ff: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(d)
        self.attn = SelfAttention(d, n_heads)
        self.ln2 = nn.LayerNorm(d)
        self.mlp = nn.Sequential(nn.Linear(d, d_ff), nn.GELU(), nn.Linear(d_ff, d))

    def forward(self, x, bias=None, past=None):
        a, kv = self.attn(self.ln1(x), bias, past)
        x = x + a
        return x + self.mlp(self.ln2(x)), kv


def mask_bias(allowed: torch.Tensor, dtype) -> torch.Tensor:
    """Additive attention bias: 0 where allowed, -inf elsewhere."""
    bias = torch.zeros(allowed.shape, dtype=dtype)
    bias.masked_fill_(~allowed, float("-inf"))
    return bias if bias.dim() == 2 else bias.unsqueeze(1)


def split_views(images: torch.Tensor) -> torch.Tensor:
    """(B, 2S, 2S, C) -> (B, 5, S, S, C): four quadrants row-major, then the
    whole image downscaled by 2x2 area averaging."""
    B, H, W, C = images.shape
    S = H // 2
    quads = [images[:, :S, :S], images[:, :S, S:], images[:, S:, :S], images[:, S:, S:]]
    full = F.avg_pool2d(images.permute(0, 3, 1, 2), 2).permute(0, 2, 3, 1)
    return torch.stack(quads + [full], dim=1)


def pool2x2(grid: torch.Tensor) -> torch.Tensor:
    """2x2 average pooling of (N, g, g, D) features; odd g is edge-replicated."""
    x = grid.permute(0, 3, 1, 2)
    g = x.shape[-1]
    if g % 2:
        x = F.pad(x, (0, 1, 0, 1), mode="replicate")
    return F.avg_pool2d(x, 2).permute(0, 2, 3, 1)


class VisionTower(nn.Module):
    """Shared per-view patch encoder, pooling and a 2-layer MLP projector."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        g, p, dv = cfg.view_grid, cfg.patch_size, cfg.d_vision
        self.patch = nn.Linear(cfg.channels * p * p, dv)
        self.pos = nn.Parameter(torch.zeros(g * g, dv))
        self.block = Block(dv, cfg.vision_heads, 4 * dv) if cfg.vision_block else None
        self.ln = nn.LayerNorm(dv) if cfg.vision_block else None
        self.projector = nn.Sequential(nn.Linear(dv, cfg.d_model), nn.GELU(), nn.Linear(cfg.d_model, cfg.d_model))
        nn.init.normal_(self.pos, std=0.02)

    def features(self, images: torch.Tensor) -> torch.Tensor:
        """Pre-projector embeddings (B, n_vision_tokens, d_vision)."""
        cfg = self.cfg
        B = images.shape[0]
        g, p = cfg.view_grid, cfg.patch_size
        views = split_views(images).reshape(B * N_VIEWS, g, p, g, p, cfg.channels)
        patches = views.permute(0, 1, 3, 2, 4, 5).reshape(B * N_VIEWS, g * g, p * p * cfg.channels)
        h = self.patch(patches) + self.pos
        if self.block is not None:
            h = self.ln(self.block(h)[0])
        h = h.view(B * N_VIEWS, g, g, -1)
        if cfg.pool:
            h = pool2x2(h)
        return h.reshape(B, -1, h.shape[-1])

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.projector(self.features(images))


def as_image_batch(img, cfg: ModelConfig, dtype=torch.float32) -> torch.Tensor:
    x = torch.as_tensor(np.asarray(img) if not torch.is_tensor(img) else img, dtype=dtype)
    if x.dim() == 3:
        x = x.unsqueeze(0)
    if x.dim() != 4 or x.shape[-1] != cfg.channels:
        raise InvalidInputError(f"expected (H, W, {cfg.channels}) image(s), got {tuple(x.shape)}")
    if x.shape[1] != x.shape[2]:
        raise InvalidInputError("image must be square")
    if x.shape[1] != cfg.image_size:
        raise InvalidInputError(f"image side {x.shape[1]} != configured {cfg.image_size}")
    return x


class DiffusionVLM(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        self.tok = nn.Embedding(cfg.vocab_size, d)
        self.pos = nn.Embedding(cfg.max_context, d)
        self.blocks = nn.ModuleList(Block(d, cfg.n_heads, cfg.d_ff) for _ in range(cfg.n_layers))
        self.ln_f = nn.LayerNorm(d)
        self.head = nn.Linear(d, cfg.vocab_size)
        self.vision = VisionTower(cfg)
        self.encoder_calls = 0
        self.apply(self._init)

    @staticmethod
    def _init(m):
        if isinstance(m, nn.Linear):
            nn.init.normal_(m.weight, std=0.02)
            nn.init.zeros_(m.bias)
        elif isinstance(m, nn.Embedding):
            nn.init.normal_(m.weight, std=0.02)

    def projector_parameters(self):
        return self.vision.projector.parameters()

    def encode_image(self, img) -> torch.Tensor:
        """Image(s) -> projected vision embeddings (B, n_vision_tokens, d_model)."""
        x = as_image_batch(img, self.cfg, dtype=self.head.weight.dtype)
        self.encoder_calls += x.shape[0]
        return self.vision(x)

    def embed(self, vision: Optional[torch.Tensor], ids: torch.Tensor, start: int = 0) -> torch.Tensor:
        ids = torch.as_tensor(ids, dtype=torch.long)
        if ids.dim() == 1:
            ids = ids.unsqueeze(0)
        h = self.tok(ids)
        if vision is not None and vision.shape[1]:
            if vision.shape[0] != h.shape[0]:
                vision = vision.expand(h.shape[0], -1, -1)
            h = torch.cat([vision, h], dim=1)
        T = h.shape[1]
        if start + T > self.cfg.max_context:
            raise CapacityError(f"{start + T} positions exceed max_context={self.cfg.max_context}")
        return h + self.pos(torch.arange(start, start + T))

    def transformer(self, h: torch.Tensor, allowed: Optional[torch.Tensor] = None) -> torch.Tensor:
        bias = None if allowed is None or bool(allowed.all()) else mask_bias(allowed, h.dtype)
        for blk in self.blocks:
            h, _ = blk(h, bias)
        return h

    def logits(self, h: torch.Tensor) -> torch.Tensor:
        return self.head(self.ln_f(h))

    def forward(
        self,
        answer: torch.Tensor,
        plan: AttentionPlan,
        vision: Optional[torch.Tensor] = None,
        prompt: Optional[torch.Tensor] = None,
        cache: Optional[KVCache] = None,
    ) -> torch.Tensor:
        """Answer-position logits (B, n_answer, V)."""
        answer = torch.as_tensor(answer, dtype=torch.long)
        if answer.dim() == 1:
            answer = answer.unsqueeze(0)
        if answer.shape[1] != plan.n_answer:
            raise ConfigError("answer length does not match plan")
        if cache is not None:
            if plan.kind is not PlanKind.PREFIX or cache.prefix_len != plan.prefix_len:
                raise CacheMismatchError(
                    f"cache of prefix {cache.prefix_len} unusable with {plan.kind.value} plan of prefix {plan.prefix_len}"
                )
            if plan.total > self.cfg.max_context:
                raise CapacityError(f"{plan.total} positions exceed max_context={self.cfg.max_context}")
            h = self.embed(None, answer, start=cache.prefix_len)
            for blk, pk, pv in zip(self.blocks, cache.keys, cache.values):
                h, _ = blk(h, None, (pk, pv))
            return self.logits(h)
        n_img = 0 if vision is None else vision.shape[1]
        n_prompt = 0 if prompt is None else torch.as_tensor(prompt).shape[-1]
        if (n_img, n_prompt) != (plan.n_img, plan.n_prompt):
            raise ConfigError("inputs do not match plan segment lengths")
        ids = answer if prompt is None else torch.cat([_batch(prompt, answer.shape[0]), answer], dim=1)
        h = self.transformer(self.embed(vision, ids), plan.allowed())
        return self.logits(h[:, plan.prefix_len :])

    def prefill(self, vision: Optional[torch.Tensor], prompt: Optional[torch.Tensor]) -> KVCache:
        """Per-layer keys/values of the prefix computed with prefix-only attention."""
        if prompt is None:
            prompt = torch.zeros(1, 0, dtype=torch.long)
        prompt = torch.as_tensor(prompt, dtype=torch.long)
        if prompt.dim() == 1:
            prompt = prompt.unsqueeze(0)
        if vision is not None and prompt.shape[0] != vision.shape[0]:
            prompt = prompt.expand(vision.shape[0], -1)
        h = self.embed(vision, prompt)
        keys, values = [], []
        for blk in self.blocks:
            h, (k, v) = blk(h)
            keys.append(k)
            values.append(v)
        return KVCache(tuple(keys), tuple(values), h.shape[1])


def _batch(ids, B: int) -> torch.Tensor:
    ids = torch.as_tensor(ids, dtype=torch.long)
    if ids.dim() == 1:
        ids = ids.unsqueeze(0)
    return ids.expand(B, -1) if ids.shape[0] != B else ids
