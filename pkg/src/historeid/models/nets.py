"""Network building blocks: feature encoders, the patch classifier, and
gated-attention MIL pooling.

Encoders map an RGB patch to a fixed-length embedding. The
``tiny_synthetic`` variant is a small residual network trainable on CPU
in minutes; the pretrained variants wrap a standard ResNet18 backbone
loaded from a local weights file (the weights themselves are external
assets). ``task_trained`` extracts the encoder of a previously trained
patch classifier checkpoint.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

ENCODER_VARIANTS = (
    "task_trained",
    "imagenet_pretrained",
    "ssl_pretrained",
    "tiny_synthetic",
)
_WEIGHTS_REQUIRED = ("task_trained", "imagenet_pretrained", "ssl_pretrained")

_IMAGENET_MEAN = (0.485, 0.456, 0.406)
_IMAGENET_STD = (0.229, 0.224, 0.225)


class EncoderError(ValueError):
    """Raised for invalid encoder configuration or unloadable weights."""


@dataclass
class EncoderConfig:
    variant: str = "tiny_synthetic"
    embedding_dim: int = 64
    weights_path: Path | None = None
    width: int = 16  # channel width of the tiny variant
    depth: int = 4  # residual blocks of the tiny variant

    def __post_init__(self) -> None:
        if self.variant not in ENCODER_VARIANTS:
            raise EncoderError(
                f"unknown encoder variant {self.variant!r}; expected one of {ENCODER_VARIANTS}"
            )
        if self.embedding_dim <= 0:
            raise EncoderError("embedding_dim must be > 0")
        if self.depth < 1:
            raise EncoderError("depth must be >= 1")
        if self.variant in _WEIGHTS_REQUIRED and self.weights_path is None:
            raise EncoderError(f"variant {self.variant!r} requires weights_path")
        if self.weights_path is not None:
            self.weights_path = Path(self.weights_path)


def _norm(channels: int) -> nn.BatchNorm2d:
    # batch norm (not per-sample norm): per-sample normalization would
    # cancel the absolute density/contrast statistics that distinguish
    # subjects
    return nn.BatchNorm2d(channels)


class _ResidualBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, stride: int):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1, bias=False)
        self.norm1 = _norm(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, stride=1, padding=1, bias=False)
        self.norm2 = _norm(c_out)
        if stride != 1 or c_in != c_out:
            self.shortcut: nn.Module = nn.Sequential(
                nn.Conv2d(c_in, c_out, 1, stride=stride, bias=False), _norm(c_out)
            )
        else:
            self.shortcut = nn.Identity()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = torch.relu(self.norm1(self.conv1(x)))
        out = self.norm2(self.conv2(out))
        return torch.relu(out + self.shortcut(x))


class TinyPatchEncoder(nn.Module):
    """Small residual network trainable on CPU in minutes.

    Channel width doubles on the first and second block; every stage
    halves the spatial extent. Depth (number of residual blocks) and
    width are configurable; global average pooling plus a linear
    projection produce the embedding.
    """

    def __init__(self, embedding_dim: int = 64, width: int = 16, depth: int = 4):
        super().__init__()
        w = width
        self.embedding_dim = embedding_dim
        self.width = width
        self.depth = depth
        self.stem = nn.Sequential(
            nn.Conv2d(3, w, 3, stride=2, padding=1, bias=False), _norm(w), nn.ReLU()
        )
        channels = [w] + [(2 if i == 0 else 4) * w for i in range(depth)]
        self.blocks = nn.Sequential(
            *[
                _ResidualBlock(channels[i], channels[i + 1], stride=2)
                for i in range(depth)
            ]
        )
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.project = nn.Linear(channels[-1], embedding_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.blocks(self.stem(x))
        return self.project(self.pool(h).flatten(1))


class ResNetEncoder(nn.Module):
    """ResNet18 backbone with the classification head removed.

    Inputs in [0, 1] are normalized with the statistics the published
    backbones were trained with.
    """

    def __init__(self, state_dict: dict):
        super().__init__()
        import torchvision

        backbone = torchvision.models.resnet18(weights=None)
        result = backbone.load_state_dict(state_dict, strict=False)
        missing = [k for k in result.missing_keys if not k.startswith("fc.")]
        if missing:
            raise EncoderError(f"weights file is missing backbone keys: {missing[:5]}...")
        backbone.fc = nn.Identity()
        self.backbone = backbone
        self.embedding_dim = 512
        self.register_buffer("mean", torch.tensor(_IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(_IMAGENET_STD).view(1, 3, 1, 1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.backbone((x - self.mean) / self.std)


class PatchClassifier(nn.Module):
    """Encoder plus an N-way head; every patch is classified on its own."""

    def __init__(self, encoder: nn.Module, n_classes: int):
        super().__init__()
        self.encoder = encoder
        self.head = nn.Linear(encoder.embedding_dim, n_classes)
        self.n_classes = n_classes

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.encoder(x))


class GatedAttentionPool(nn.Module):
    """Convex instance pooling with a tanh x sigmoid gating head.

    Instance scores are w^T (tanh(V h) * sigmoid(U h)); softmax over
    instances yields weights that sum to 1, and the pooled vector is the
    weighted sum of instance embeddings.
    """

    def __init__(self, in_dim: int, hidden_dim: int = 64):
        super().__init__()
        self.tanh_gate = nn.Linear(in_dim, hidden_dim)
        self.sigmoid_gate = nn.Linear(in_dim, hidden_dim)
        self.score = nn.Linear(hidden_dim, 1)

    def forward(self, embeddings: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if embeddings.ndim != 2 or embeddings.shape[0] < 1:
            raise ValueError("expected a non-empty (n, d) embedding matrix")
        gated = torch.tanh(self.tanh_gate(embeddings)) * torch.sigmoid(
            self.sigmoid_gate(embeddings)
        )
        scores = self.score(gated).squeeze(-1)
        weights = torch.softmax(scores, dim=0)
        pooled = weights @ embeddings
        return pooled, weights


class MILClassifier(nn.Module):
    """Frozen encoder, gated-attention pooling, and a single N-way head.

    The encoder runs without gradients; only the pooling and head
    parameters train.
    """

    def __init__(self, encoder: nn.Module, n_classes: int, attention_hidden: int = 64):
        super().__init__()
        self.encoder = encoder
        self.pool = GatedAttentionPool(encoder.embedding_dim, attention_hidden)
        self.head = nn.Linear(encoder.embedding_dim, n_classes)
        self.n_classes = n_classes
        self.attention_hidden = attention_hidden

    def train(self, mode: bool = True) -> "MILClassifier":
        # the encoder is frozen: keep it in eval mode even while the
        # pooling/head train, or batch-norm running stats would drift
        super().train(mode)
        self.encoder.eval()
        return self

    def forward(self, instances: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        with torch.no_grad():
            embeddings = self.encoder(instances)
        return self.forward_embeddings(embeddings.detach())

    def forward_embeddings(
        self, embeddings: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        pooled, weights = self.pool(embeddings)
        return self.head(pooled), weights


def build_encoder(config: EncoderConfig) -> nn.Module:
    """Instantiate the configured encoder in evaluation mode."""
    if config.variant == "tiny_synthetic":
        encoder: nn.Module = TinyPatchEncoder(config.embedding_dim, config.width, config.depth)
    elif config.variant in ("imagenet_pretrained", "ssl_pretrained"):
        if config.embedding_dim != 512:
            raise EncoderError("ResNet18 backbones produce 512-dim embeddings")
        if not config.weights_path.exists():
            raise EncoderError(f"weights file not found: {config.weights_path}")
        try:
            payload = torch.load(config.weights_path, map_location="cpu", weights_only=True)
        except Exception as exc:
            raise EncoderError(f"cannot load weights {config.weights_path}: {exc}") from exc
        if isinstance(payload, dict) and "state_dict" in payload:
            payload = payload["state_dict"]
        encoder = ResNetEncoder(payload)
    else:  # task_trained
        from .training import load_checkpoint

        trained, _ = load_checkpoint(config.weights_path)
        if trained.kind != "patch":
            raise EncoderError("task_trained encoders come from patch-classifier checkpoints")
        encoder = trained.model.encoder
        if encoder.embedding_dim != config.embedding_dim:
            raise EncoderError(
                f"checkpoint encoder dim {encoder.embedding_dim} != configured "
                f"{config.embedding_dim}"
            )
    encoder.eval()
    return encoder


def patches_to_tensor(patches: np.ndarray) -> torch.Tensor:
    """(n, h, w, 3) array in [0, 1] -> float32 NCHW tensor."""
    array = np.ascontiguousarray(np.asarray(patches, dtype=np.float32))
    return torch.from_numpy(array).permute(0, 3, 1, 2)


def embed_patches(
    encoder: nn.Module, patches: np.ndarray, batch_size: int = 256
) -> np.ndarray:
    """Row i is the evaluation-mode embedding of patch i; no augmentation."""
    encoder.eval()
    chunks = []
    with torch.no_grad():
        for start in range(0, len(patches), batch_size):
            x = patches_to_tensor(patches[start : start + batch_size])
            chunks.append(encoder(x).numpy())
    if not chunks:
        dim = getattr(encoder, "embedding_dim", 0)
        return np.zeros((0, dim), dtype=np.float32)
    return np.concatenate(chunks)


def encoder_state_bytes(module: nn.Module) -> bytes:
    """Canonical byte serialization of parameters and buffers, for
    verifying that a module did not change."""
    parts = []
    state = module.state_dict()
    for key in sorted(state):
        parts.append(key.encode())
        parts.append(state[key].detach().cpu().numpy().tobytes())
    return b"".join(parts)
