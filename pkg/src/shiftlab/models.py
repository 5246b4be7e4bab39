"""Encoders and task heads built on the autodiff primitives.

The encoder is a small convnet in the pre-activation style used by transfer-
learning baselines: every conv filter is weight-standardized at forward time
and followed by group norm + ReLU.  A stem conv keeps resolution; each stage
then halves it with a stride-2 conv.  Global average pooling plus a linear
layer produces the embedding.

Heads: a two-layer projection MLP for contrastive training, and an affine
classification head, optionally fronted by attention pooling for records with
several views (scores come from a learned linear layer; softmax over views;
a single view pools to itself).

Encoder weights carry provenance ("random", "supervised-pretrained",
"contrastive-pretrained", "fine-tuned"); transitions must move forward along
that chain, which the pipeline enforces when composing stages.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

__all__ = [
    "EncoderConfig",
    "EncoderState",
    "ProjectionHead",
    "ClassificationHead",
    "Model",
    "PROVENANCE_ORDER",
    "init_encoder",
    "encode",
    "init_projection_head",
    "project",
    "init_classification_head",
    "attention_pool",
    "forward_logits",
    "param_count",
    "content_hash",
    "clone_params",
]

PROVENANCE_ORDER = {
    "random": 0,
    "supervised-pretrained": 1,
    "contrastive-pretrained": 2,
    "fine-tuned": 3,
}


@dataclass(frozen=True)
class EncoderConfig:
    image_size: int = 32
    in_channels: int = 1
    stage_channels: tuple[int, ...] = (16, 32, 64)
    blocks_per_stage: int = 1
    groups: int = 8
    embed_dim: int = 64

    def __post_init__(self):
        if not self.stage_channels:
            raise ValueError("need at least one stage")
        for ch in self.stage_channels:
            if ch % self.groups != 0:
                raise ValueError(f"stage width {ch} not divisible by groups {self.groups}")
        size = self.image_size
        for _ in self.stage_channels:
            size = (size - 1) // 2 + 1
        if size < 1:
            raise ValueError("too many stages for this image size")
        if self.blocks_per_stage < 1 or self.embed_dim < 1:
            raise ValueError("blocks_per_stage and embed_dim must be >= 1")

    @staticmethod
    def preset(name: str, image_size: int = 32, in_channels: int = 1) -> "EncoderConfig":
        """Two fixed capacity points: "small" and the wider+deeper "large"."""
        if name == "small":
            return EncoderConfig(image_size, in_channels, (16, 32, 64), 1, 8, 64)
        if name == "large":
            return EncoderConfig(image_size, in_channels, (24, 48, 96), 2, 8, 96)
        raise ValueError(f"unknown encoder preset '{name}'")


@dataclass
class EncoderState:
    """Named parameter tensors plus provenance bookkeeping."""

    config: EncoderConfig
    params: dict[str, Tensor]
    provenance: str = "random"
    parent_hash: str | None = None
    history: tuple[str, ...] = ("random",)

    def advance(self, new_provenance: str, parent_hash: str | None = None) -> None:
        if new_provenance not in PROVENANCE_ORDER:
            raise ValueError(f"unknown provenance '{new_provenance}'")
        # strictly forward, except that a fine-tuned encoder may be
        # fine-tuned again (e.g. shifted-domain tuning of a tuned model)
        again = new_provenance == "fine-tuned" and self.provenance == "fine-tuned"
        if not again and PROVENANCE_ORDER[new_provenance] <= PROVENANCE_ORDER[self.provenance]:
            raise ValueError(
                f"provenance may only move forward: {self.provenance} -> {new_provenance}"
            )
        self.provenance = new_provenance
        self.parent_hash = parent_hash
        self.history = self.history + (new_provenance,)


def _he_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


def init_encoder(config: EncoderConfig, rng: np.random.Generator) -> EncoderState:
    params: dict[str, Tensor] = {}

    def conv(name: str, cin: int, cout: int):
        params[f"{name}.w"] = Tensor(_he_uniform(rng, (cout, cin, 3, 3), cin * 9), requires_grad=True)
        params[f"{name}.gamma"] = Tensor(np.ones(cout), requires_grad=True)
        params[f"{name}.beta"] = Tensor(np.zeros(cout), requires_grad=True)

    c0 = config.stage_channels[0]
    conv("stem", config.in_channels, c0)
    prev = c0
    for i, ch in enumerate(config.stage_channels):
        conv(f"s{i}.b0", prev, ch)
        for j in range(1, config.blocks_per_stage):
            conv(f"s{i}.b{j}", ch, ch)
        prev = ch
    params["embed.w"] = Tensor(_he_uniform(rng, (prev, config.embed_dim), prev), requires_grad=True)
    params["embed.b"] = Tensor(np.zeros(config.embed_dim), requires_grad=True)
    return EncoderState(config=config, params=params)


def _conv_block(x: Tensor, params: dict[str, Tensor], name: str, stride: int, groups: int) -> Tensor:
    w = T.weight_standardize(params[f"{name}.w"])
    h = T.conv2d(x, w, stride=stride, padding=1)
    h = T.group_norm(h, params[f"{name}.gamma"], params[f"{name}.beta"], groups=groups)
    return T.relu(h)


def encode(state: EncoderState, images: np.ndarray) -> Tensor:
    """Embed a batch of (N, H, W, C) images into (N, D)."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4:
        raise ValueError(f"encode expects (N, H, W, C), got {images.shape}")
    cfg = state.config
    x = Tensor(images.transpose(0, 3, 1, 2))
    p = state.params
    h = _conv_block(x, p, "stem", stride=1, groups=cfg.groups)
    for i in range(len(cfg.stage_channels)):
        h = _conv_block(h, p, f"s{i}.b0", stride=2, groups=cfg.groups)
        for j in range(1, cfg.blocks_per_stage):
            h = _conv_block(h, p, f"s{i}.b{j}", stride=1, groups=cfg.groups)
    pooled = T.mean(T.mean(h, axis=3), axis=2)  # global average pool -> (N, C)
    return T.add(T.matmul(pooled, p["embed.w"]), p["embed.b"])


# ---------------------------------------------------------------------------
# heads


@dataclass
class ProjectionHead:
    """Two fully connected layers D -> D -> P with ReLU between."""

    embed_dim: int
    out_dim: int
    params: dict[str, Tensor] = field(default_factory=dict)


def init_projection_head(embed_dim: int, out_dim: int, rng: np.random.Generator) -> ProjectionHead:
    params = {
        "fc1.w": Tensor(_he_uniform(rng, (embed_dim, embed_dim), embed_dim), requires_grad=True),
        "fc1.b": Tensor(np.zeros(embed_dim), requires_grad=True),
        "fc2.w": Tensor(_he_uniform(rng, (embed_dim, out_dim), embed_dim), requires_grad=True),
        "fc2.b": Tensor(np.zeros(out_dim), requires_grad=True),
    }
    return ProjectionHead(embed_dim=embed_dim, out_dim=out_dim, params=params)


def project(head: ProjectionHead, emb: Tensor) -> Tensor:
    h = T.relu(T.add(T.matmul(emb, head.params["fc1.w"]), head.params["fc1.b"]))
    return T.add(T.matmul(h, head.params["fc2.w"]), head.params["fc2.b"])


@dataclass
class ClassificationHead:
    embed_dim: int
    n_classes: int
    attention: bool = False
    params: dict[str, Tensor] = field(default_factory=dict)


def init_classification_head(
    embed_dim: int, n_classes: int, rng: np.random.Generator, attention: bool = False
) -> ClassificationHead:
    params = {
        "w": Tensor(_he_uniform(rng, (embed_dim, n_classes), embed_dim), requires_grad=True),
        "b": Tensor(np.zeros(n_classes), requires_grad=True),
    }
    if attention:
        params["attn.v"] = Tensor(_he_uniform(rng, (embed_dim, 1), embed_dim), requires_grad=True)
        params["attn.b"] = Tensor(np.zeros(1), requires_grad=True)
    return ClassificationHead(embed_dim=embed_dim, n_classes=n_classes, attention=attention, params=params)


def attention_pool(embeddings: Tensor, score_w: Tensor, score_b: Tensor) -> Tensor:
    """Weight-average (M, D) view embeddings by softmax of learned linear
    scores; (1, D) comes back.  M = 1 reduces to the identity."""
    if embeddings.ndim != 2:
        raise ValueError(f"attention_pool expects (M, D), got {embeddings.shape}")
    scores = T.add(T.matmul(embeddings, score_w), score_b)  # (M, 1)
    weights = T.softmax(scores, axis=0)
    return T.matmul(T.transpose(weights), embeddings)  # (1, D)


@dataclass
class Model:
    encoder: EncoderState
    head: ClassificationHead


def forward_logits(model: Model, images: np.ndarray) -> Tensor:
    """Logits for a batch.  ``images`` is (N, H, W, C) for single-view
    records or (N, V, H, W, C) for multi-view records (attention pooling
    combines the V view embeddings per record)."""
    images = np.asarray(images, dtype=np.float64)
    head = model.head
    if images.ndim == 5:
        n, v = images.shape[:2]
        emb = encode(model.encoder, images.reshape(n * v, *images.shape[2:]))
        if v == 1:
            pooled = emb
        else:
            if not head.attention:
                raise ValueError("multi-view batch needs an attention-pooling head")
            rows = [
                attention_pool(T.gather(emb, list(range(i * v, (i + 1) * v))),
                               head.params["attn.v"], head.params["attn.b"])
                for i in range(n)
            ]
            pooled = T.concat(rows, axis=0)
    elif images.ndim == 4:
        pooled = encode(model.encoder, images)
    else:
        raise ValueError(f"forward_logits expects 4-D or 5-D input, got {images.shape}")
    return T.add(T.matmul(pooled, head.params["w"]), head.params["b"])


# ---------------------------------------------------------------------------
# parameter utilities


def param_count(params: dict[str, Tensor]) -> int:
    return sum(t.size for t in params.values())


def content_hash(params: dict[str, Tensor]) -> str:
    """Stable hash of parameter names, shapes, and exact values."""
    h = hashlib.sha256()
    for name in sorted(params):
        t = params[name]
        h.update(name.encode())
        h.update(str(t.shape).encode())
        h.update(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return h.hexdigest()[:16]


def clone_params(params: dict[str, Tensor]) -> dict[str, Tensor]:
    return {k: Tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in params.items()}
