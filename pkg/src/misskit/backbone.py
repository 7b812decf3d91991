"""Dual-modality transformer tracker at desk scale.

The tracker follows the one-stream layout: search and template frames of
each modality are cut into p x p patches, embedded with a shared linear
layer and shared position embeddings, and pushed through a ladder of N
transformer blocks.  Blocks are either weight-shared between modalities or
modality-specific; specific blocks additionally carry a learnable global
token per modality, which is stripped again before the next shared block.
The search tokens of the last layer are fused (sum, channel concat, or a
small fusion transformer) and a token-wise head predicts a score map and a
box read off the best-scoring token.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, ContractError, DataError
from .tensor import Module, Parameter, Tensor

EXTRACTORS = ("shared", "specific", "shared_specific")
FUSIONS = ("sum", "concat", "transformer")
MODALITIES = ("rgb", "tir")


@dataclass(frozen=True)
class TrackerConfig:
    patch_size: int = 4
    embed_dim: int = 32
    num_layers: int = 6
    specific_layers: tuple[int, ...] | None = None
    extractor: str = "shared_specific"
    fusion: str = "concat"
    search_size: int = 32
    template_size: int = 16
    channels: int = 3
    num_heads: int = 1
    mlp_ratio: int = 2
    head_hidden: int = 32
    init_std: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.extractor not in EXTRACTORS:
            raise ConfigurationError(f"unknown extractor {self.extractor!r}; choose from {EXTRACTORS}")
        if self.fusion not in FUSIONS:
            raise ConfigurationError(f"unknown fusion {self.fusion!r}; choose from {FUSIONS}")
        if self.embed_dim % 2:
            raise ConfigurationError(f"embed_dim must be even, got {self.embed_dim}")
        if self.embed_dim % self.num_heads:
            raise ConfigurationError("embed_dim must be divisible by num_heads")
        for size in (self.search_size, self.template_size):
            if size % self.patch_size:
                raise ConfigurationError(f"image size {size} not divisible by patch size {self.patch_size}")
        all_layers = tuple(range(1, self.num_layers + 1))
        layers = self.specific_layers
        if self.extractor == "shared":
            if layers:
                raise ConfigurationError("the shared extractor takes no specific layers")
            layers = ()
        elif self.extractor == "specific":
            if layers is not None and tuple(sorted(layers)) != all_layers:
                raise ConfigurationError("the specific extractor makes every layer specific")
            layers = all_layers
        else:
            if layers is None:
                layers = tuple(n for n in (2, 4, 6) if n <= self.num_layers)
            if not layers:
                raise ConfigurationError("shared_specific needs at least one specific layer")
        layers = tuple(sorted(set(int(n) for n in layers)))
        if any(n < 1 or n > self.num_layers for n in layers):
            raise ConfigurationError(f"specific layers {layers} outside 1..{self.num_layers}")
        object.__setattr__(self, "specific_layers", layers)

    @property
    def search_grid(self) -> int:
        return self.search_size // self.patch_size

    @property
    def num_search(self) -> int:
        return self.search_grid ** 2

    @property
    def num_template(self) -> int:
        return (self.template_size // self.patch_size) ** 2

    @property
    def fused_dim(self) -> int:
        return self.embed_dim if self.fusion == "sum" else 2 * self.embed_dim

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["specific_layers"] = list(self.specific_layers)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "TrackerConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown tracker config keys: {sorted(unknown)}")
        data = dict(data)
        if data.get("specific_layers") is not None:
            data["specific_layers"] = tuple(data["specific_layers"])
        return cls(**data)

    @classmethod
    def paper_scale(cls, embed_dim: int = 768) -> "TrackerConfig":
        """ViT-B-like geometry: 256/128 crops, p=16, 12 layers, specific at 4, 7, 10."""
        return cls(patch_size=16, embed_dim=embed_dim, num_layers=12, specific_layers=(4, 7, 10),
                   search_size=256, template_size=128, num_heads=12, mlp_ratio=4,
                   head_hidden=256)


@dataclass
class TokenSequence:
    """Token features of one modality: [global?] + search patches + template patches."""

    values: Tensor
    num_search: int
    num_template: int
    has_global: bool = False

    @property
    def roles(self) -> list[str]:
        head = ["global"] if self.has_global else []
        return head + ["search"] * self.num_search + ["template"] * self.num_template

    def __len__(self) -> int:
        return self.values.shape[0]


@dataclass
class HeadOutput:
    score_logits: Tensor  # 1 x (grid*grid)
    box: Tensor  # (cx, cy, w, h), normalised to the search region
    grid: int
    search_size: int
    best_index: int

    @property
    def score_map(self) -> np.ndarray:
        return self.score_logits.data.reshape(self.grid, self.grid)

    def box_pixels(self) -> tuple[float, float, float, float]:
        cx, cy, w, h = (float(v) * self.search_size for v in self.box.data)
        return (cx - w / 2, cy - h / 2, w, h)


def patchify(image: np.ndarray, p: int) -> np.ndarray:
    """H x W x C image -> (H/p * W/p) x (p*p*C) rows, patches in row-major order."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[:, :, None]
    h, w, c = image.shape
    if h % p or w % p:
        raise ConfigurationError(f"image {h}x{w} not divisible by patch size {p}")
    return (image.reshape(h // p, p, w // p, p, c)
            .transpose(0, 2, 1, 3, 4)
            .reshape((h // p) * (w // p), p * p * c))


class LayerNorm(Module):
    def __init__(self, name: str, dim: int):
        self.gain = Parameter(np.ones(dim), name=f"{name}/gain")
        self.bias = Parameter(np.zeros(dim), name=f"{name}/bias")

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias)


class Linear(Module):
    def __init__(self, name: str, n_in: int, n_out: int, rng, std: float):
        self.weight = Parameter(T.init_normal(rng, (n_in, n_out), std), name=f"{name}/weight")
        self.bias = Parameter(np.zeros(n_out), name=f"{name}/bias")

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class TransformerBlock(Module):
    """Pre-norm block: x + Attn(LN(x)), then x + MLP(LN(x))."""

    def __init__(self, name: str, dim: int, num_heads: int, mlp_ratio: int, rng, std: float):
        self.name = name
        self.num_heads = num_heads
        self.norm1 = LayerNorm(f"{name}/norm1", dim)
        self.qkv = Linear(f"{name}/qkv", dim, 3 * dim, rng, std)
        self.proj = Linear(f"{name}/proj", dim, dim, rng, std)
        self.norm2 = LayerNorm(f"{name}/norm2", dim)
        self.fc1 = Linear(f"{name}/fc1", dim, mlp_ratio * dim, rng, std)
        self.fc2 = Linear(f"{name}/fc2", mlp_ratio * dim, dim, rng, std)

    def attention(self, x: Tensor) -> Tensor:
        d = x.shape[-1]
        hd = d // self.num_heads
        qkv = self.qkv(x)
        heads = []
        for h in range(self.num_heads):
            q = qkv[:, h * hd:(h + 1) * hd]
            k = qkv[:, d + h * hd:d + (h + 1) * hd]
            v = qkv[:, 2 * d + h * hd:2 * d + (h + 1) * hd]
            attn = T.softmax_rows(T.scale(q @ k.T, 1.0 / math.sqrt(hd)))
            heads.append(attn @ v)
        out = heads[0] if len(heads) == 1 else T.concat(heads, axis=-1)
        return self.proj(out)

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.attention(self.norm1(x))
        return x + self.fc2(T.gelu(self.fc1(self.norm2(x))))


class PatchEmbed(Module):
    """Linear patch embedding plus position embeddings shared by both modalities."""

    def __init__(self, cfg: TrackerConfig, rng):
        p, d = cfg.patch_size, cfg.embed_dim
        self.patch_size = p
        self.proj = Linear("backbone/patch_embed", p * p * cfg.channels, d, rng, cfg.init_std)
        self.pos_search = Parameter(T.init_normal(rng, (cfg.num_search, d), cfg.init_std),
                                    name="backbone/pos_embed/search")
        self.pos_template = Parameter(T.init_normal(rng, (cfg.num_template, d), cfg.init_std),
                                      name="backbone/pos_embed/template")

    def __call__(self, search: np.ndarray, template: np.ndarray) -> TokenSequence:
        s = self.proj(Tensor._wrap(patchify(search, self.patch_size)))
        t = self.proj(Tensor._wrap(patchify(template, self.patch_size)))
        if s.shape[0] != self.pos_search.shape[0] or t.shape[0] != self.pos_template.shape[0]:
            raise ConfigurationError(
                f"got {s.shape[0]} search / {t.shape[0]} template patches, "
                f"configured for {self.pos_search.shape[0]} / {self.pos_template.shape[0]}")
        values = T.concat_rows([s + self.pos_search, t + self.pos_template])
        return TokenSequence(values, s.shape[0], t.shape[0])


def patch_embed(image: np.ndarray, embed: PatchEmbed, pos: Parameter | None = None) -> Tensor:
    """Embed a single image into p x p patch tokens, optionally adding ``pos``."""
    tokens = embed.proj(Tensor._wrap(patchify(image, embed.patch_size)))
    return tokens if pos is None else tokens + pos


def shared_block(block: TransformerBlock, seq_rgb: TokenSequence, seq_tir: TokenSequence):
    """Run the same block over both modalities.  Global tokens are not allowed here."""
    if seq_rgb.has_global or seq_tir.has_global:
        raise ContractError("global tokens must be stripped before a shared block")
    return (TokenSequence(block(seq_rgb.values), seq_rgb.num_search, seq_rgb.num_template),
            TokenSequence(block(seq_tir.values), seq_tir.num_search, seq_tir.num_template))


def specific_block(block: TransformerBlock, seq: TokenSequence) -> TokenSequence:
    if not seq.has_global:
        raise ContractError("a modality-specific block needs its global token attached")
    return TokenSequence(block(seq.values), seq.num_search, seq.num_template, has_global=True)


def attach_global(seq: TokenSequence, token: Tensor) -> TokenSequence:
    if seq.has_global:
        raise ContractError("sequence already carries a global token")
    return TokenSequence(T.concat_rows([token, seq.values]), seq.num_search, seq.num_template, True)


def strip_global(seq: TokenSequence) -> tuple[TokenSequence, Tensor]:
    if not seq.has_global:
        raise ContractError("no global token to strip")
    v = seq.values
    return TokenSequence(v[1:], seq.num_search, seq.num_template), v[0:1]


class Backbone(Module):
    def __init__(self, cfg: TrackerConfig, rng):
        self.cfg = cfg
        self.embed = PatchEmbed(cfg, rng)
        self.layers: list = []
        for n in range(1, cfg.num_layers + 1):
            if n in cfg.specific_layers:
                self.layers.append({m: TransformerBlock(f"backbone/layer{n}/{m}", cfg.embed_dim,
                                                        cfg.num_heads, cfg.mlp_ratio, rng, cfg.init_std)
                                    for m in MODALITIES})
            else:
                self.layers.append(TransformerBlock(f"backbone/layer{n}/shared", cfg.embed_dim,
                                                    cfg.num_heads, cfg.mlp_ratio, rng, cfg.init_std))
        self.global_tokens = {}
        if cfg.specific_layers:
            self.global_tokens = {m: Parameter(T.init_normal(rng, (1, cfg.embed_dim), cfg.init_std),
                                               name=f"backbone/global_token/{m}")
                                  for m in MODALITIES}

    def ladder(self, search: np.ndarray, template: np.ndarray, modality: str) -> list[Tensor]:
        """Per-layer token features F^1..F^N of one modality (global token removed).

        Shared blocks see no cross-modal tokens, so each modality's ladder
        can be computed on its own.
        """
        if modality not in MODALITIES:
            raise ConfigurationError(f"unknown modality {modality!r}")
        seq = self.embed(search, template)
        g = self.global_tokens.get(modality)
        out = []
        for layer in self.layers:
            if isinstance(layer, dict):
                seq = specific_block(layer[modality], attach_global(seq, g))
                seq, g = strip_global(seq)
            else:
                seq = TokenSequence(layer(seq.values), seq.num_search, seq.num_template)
            out.append(seq.values)
        return out

    def run(self, rgb_search, rgb_template, tir_search, tir_template) -> tuple[list[Tensor], list[Tensor]]:
        """Both ladders, layer by layer, with shared blocks applied through :func:`shared_block`."""
        seqs = {"rgb": self.embed(rgb_search, rgb_template),
                "tir": self.embed(tir_search, tir_template)}
        globals_ = dict(self.global_tokens)
        ladders = {"rgb": [], "tir": []}
        for layer in self.layers:
            if isinstance(layer, dict):
                for m in MODALITIES:
                    s = specific_block(layer[m], attach_global(seqs[m], globals_[m]))
                    seqs[m], globals_[m] = strip_global(s)
            else:
                seqs["rgb"], seqs["tir"] = shared_block(layer, seqs["rgb"], seqs["tir"])
            for m in MODALITIES:
                ladders[m].append(seqs[m].values)
        return ladders["rgb"], ladders["tir"]


def fuse(f_rgb: Tensor, f_tir: Tensor, mode: str, unit: "FusionUnit | None" = None) -> Tensor:
    """Fuse two search-token feature maps of identical shape."""
    if f_rgb.shape != f_tir.shape:
        raise DataError(f"fusion inputs differ in shape: {f_rgb.shape} vs {f_tir.shape}")
    if mode == "sum":
        return f_rgb + f_tir
    if mode == "concat":
        return T.concat_channels(f_rgb, f_tir)
    if mode == "transformer":
        if unit is None:
            raise ConfigurationError("transformer fusion needs its parameterised unit")
        n = f_rgb.shape[0]
        x = T.concat_rows([f_rgb, f_tir]) + unit.pos
        for block in unit.blocks:
            x = block(x)
        return T.concat_channels(x[:n], x[n:])
    raise ConfigurationError(f"unknown fusion mode {mode!r}")


class FusionUnit(Module):
    def __init__(self, cfg: TrackerConfig, rng):
        self.mode = cfg.fusion
        self.blocks = []
        self.pos = None
        if cfg.fusion == "transformer":
            self.pos = Parameter(T.init_normal(rng, (2 * cfg.num_search, cfg.embed_dim), cfg.init_std),
                                 name="fusion/pos_embed")
            self.blocks = [TransformerBlock(f"fusion/block{i}", cfg.embed_dim, cfg.num_heads,
                                            cfg.mlp_ratio, rng, cfg.init_std) for i in range(2)]

    def __call__(self, f_rgb: Tensor, f_tir: Tensor) -> Tensor:
        return fuse(f_rgb, f_tir, self.mode, self)


class Head(Module):
    """Token-wise score MLP plus a box MLP read at the argmax token.

    The box centre is the argmax cell plus a sigmoid offset inside that
    cell; width and height are sigmoids, so every component lies in [0, 1].
    """

    def __init__(self, cfg: TrackerConfig, rng):
        k, h = cfg.fused_dim, cfg.head_hidden
        self.grid = cfg.search_grid
        self.search_size = cfg.search_size
        self.score1 = Linear("head/score1", k, h, rng, cfg.init_std)
        self.score2 = Linear("head/score2", h, 1, rng, cfg.init_std)
        self.box1 = Linear("head/box1", k, h, rng, cfg.init_std)
        self.box2 = Linear("head/box2", h, 4, rng, cfg.init_std)
        self.calls = 0

    def __call__(self, fused: Tensor) -> HeadOutput:
        self.calls += 1
        if fused.shape[0] != self.grid ** 2:
            raise ContractError(f"head expects {self.grid ** 2} search tokens, got {fused.shape[0]}")
        logits = self.score2(T.gelu(self.score1(fused))).reshape(1, self.grid ** 2)
        best = int(np.argmax(logits.data[0]))
        token = fused[best:best + 1]
        raw = self.box2(T.gelu(self.box1(token))).reshape(4)
        s = T.sigmoid(raw)
        cell = np.array([best % self.grid, best // self.grid], dtype=np.float64)
        centre = T.scale(s[0:2] + cell, 1.0 / self.grid)
        box = T.concat([centre, s[2:4]], axis=0)
        return HeadOutput(logits, box, self.grid, self.search_size, best)


def head_forward(head: Head, fused: Tensor) -> HeadOutput:
    return head(fused)


class RGBTTracker(Module):
    """Backbone + fusion unit + head; the stage-1 model."""

    def __init__(self, cfg: TrackerConfig | None = None):
        cfg = cfg or TrackerConfig()
        rng = np.random.default_rng(cfg.seed)
        self.cfg = cfg
        self.backbone = Backbone(cfg, rng)
        self.fusion = FusionUnit(cfg, rng)
        self.head = Head(cfg, rng)

    def features(self, rgb_search, rgb_template, tir_search, tir_template):
        return self.backbone.run(rgb_search, rgb_template, tir_search, tir_template)

    def search_tokens(self, features: Tensor) -> Tensor:
        # token layout is [search..., template...]; global tokens are already gone
        return features[:self.cfg.num_search]

    def predict_from_features(self, f_rgb: Tensor, f_tir: Tensor) -> HeadOutput:
        fused = self.fusion(self.search_tokens(f_rgb), self.search_tokens(f_tir))
        return self.head(fused)

    def __call__(self, rgb_search, rgb_template, tir_search, tir_template) -> HeadOutput:
        lr, lt = self.features(rgb_search, rgb_template, tir_search, tir_template)
        return self.predict_from_features(lr[-1], lt[-1])


def run_backbone(model: RGBTTracker, rgb_search, rgb_template, tir_search, tir_template):
    return model.features(rgb_search, rgb_template, tir_search, tir_template)
