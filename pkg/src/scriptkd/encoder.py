"""Vision encoder: image patches -> feature sequence -> language-width embeddings."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ndgrad as ng
from .errors import DimensionError, ParameterError
from .imaging import GrayImage
from .layers import Block, Linear, ParamSet, normal_param
from .ndgrad import GradTensor


@dataclass
class VisionConfig:
    image_height: int = 128
    image_width: int = 256
    patch: int = 16
    d_v: int = 128
    blocks: int = 4
    heads: int = 2

    def __post_init__(self):
        if self.patch <= 0 or self.image_height % self.patch or self.image_width % self.patch:
            raise ParameterError(
                f"patch {self.patch} must divide {self.image_height}x{self.image_width}")
        if self.d_v % self.heads:
            raise ParameterError(f"d_v {self.d_v} not divisible by heads {self.heads}")

    @property
    def n_patches(self) -> int:
        return (self.image_height // self.patch) * (self.image_width // self.patch)


@dataclass
class EmbeddingSeq:
    """A [length x width] embedding sequence with its role in the pipeline."""

    tensor: GradTensor
    role: str  # "image" | "text" | "combined"

    def __post_init__(self):
        if self.tensor.ndim != 2:
            raise DimensionError(f"EmbeddingSeq must be 2-D, got {self.tensor.shape}")
        if self.role not in ("image", "text", "combined"):
            raise ParameterError(f"unknown role {self.role!r}")

    @property
    def length(self) -> int:
        return self.tensor.shape[0]

    @property
    def width(self) -> int:
        return self.tensor.shape[1]


def patchify(img, patch: int, image_height=128, image_width=256) -> np.ndarray:
    """Non-overlapping row-major patches, scaled to [0, 1]: [P x patch**2]."""
    pixels = img.pixels if isinstance(img, GrayImage) else np.asarray(img)
    h, w = pixels.shape
    if h != image_height or w != image_width:
        raise DimensionError(f"expected {image_height}x{image_width} image, got {h}x{w}")
    if patch <= 0 or h % patch or w % patch:
        raise ParameterError(f"patch {patch} must divide {h}x{w}")
    gh, gw = h // patch, w // patch
    tiles = pixels.reshape(gh, patch, gw, patch).swapaxes(1, 2)
    return (tiles.reshape(gh * gw, patch * patch).astype(np.float32)) / 255.0


class VisionEncoder:
    """Patch embedding + learned positions + bidirectional transformer blocks."""

    def __init__(self, config: VisionConfig, rng, params: ParamSet | None = None,
                 prefix: str = "encoder"):
        self.config = config
        self.params = params if params is not None else ParamSet()
        p = config.patch
        self.patch_embed = Linear(self.params, f"{prefix}.patch_embed", p * p, config.d_v, rng)
        self.pos = self.params.register(
            f"{prefix}.pos", normal_param(rng, (config.n_patches, config.d_v), std=0.02))
        self.blocks = [
            Block(self.params, f"{prefix}.blocks.{i}", config.d_v, config.heads, rng,
                  parallel=False, qk_norm=False)
            for i in range(config.blocks)
        ]

    def encode_image(self, img) -> GradTensor:
        """Image -> feature sequence [n_patches x d_v]."""
        patches = patchify(img, self.config.patch,
                           self.config.image_height, self.config.image_width)
        x = ng.add(self.patch_embed(GradTensor(patches)), self.pos)
        for block in self.blocks:
            x = block(x, mask=None)
        return x


class Projector:
    """Trainable two-layer MLP (4x expansion) mapping vision width d_v to
    language width d, applied per position."""

    def __init__(self, d_v: int, d: int, rng, params: ParamSet | None = None,
                 prefix: str = "projector"):
        self.params = params if params is not None else ParamSet()
        self.fc1 = Linear(self.params, f"{prefix}.fc1", d_v, 4 * d_v, rng)
        self.fc2 = Linear(self.params, f"{prefix}.fc2", 4 * d_v, d, rng)

    def project(self, features: GradTensor) -> EmbeddingSeq:
        return EmbeddingSeq(self.fc2(ng.gelu(self.fc1(features))), role="image")
