"""Frozen patch encoder producing the continuous visual sequence of an image."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, ShapeError
from .layers import Block, Linear
from .numeric_core import Parameter, rng_for


@dataclass
class ImageGrid:
    """RGB image, ``data`` is ``[H, W, 3]`` with values in [0, 1]."""

    data: np.ndarray
    image_id: str = ""

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or self.data.shape[2] != 3:
            raise ShapeError(f"image must be [H, W, 3], got {self.data.shape}")
        if not np.all(np.isfinite(self.data)) or self.data.min(initial=0.0) < 0.0 or self.data.max(initial=0.0) > 1.0:
            raise DataError(f"image {self.image_id!r}: pixel values must lie in [0, 1]")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass
class ContinuousSequence:
    tokens: np.ndarray  # [n_c, z]
    patch_positions: list[tuple[int, int]]
    image_id: str = ""

    def __len__(self) -> int:
        return self.tokens.shape[0]


def grid_shape(width: int, height: int, p: int) -> tuple[int, int]:
    """``(rows, cols)`` of the patch grid; raises if either side is not a multiple of ``p``."""
    if p <= 0 or width % p or height % p:
        raise ConfigError(f"image size W={width}, H={height} is not divisible by patch size p={p}")
    return height // p, width // p


def patchify(image: ImageGrid, p: int) -> np.ndarray:
    """``[n_c, 3p^2]`` patch rows in row-major grid order; each row is the flattened p x p x 3 block."""
    rows, cols = grid_shape(image.width, image.height, p)
    x = image.data.reshape(rows, p, cols, p, 3).transpose(0, 2, 1, 3, 4)
    return x.reshape(rows * cols, p * p * 3).copy()


def sincos_2d(rows: int, cols: int, dim: int) -> np.ndarray:
    """Fixed 2-D sinusoidal table ``[rows*cols, dim]``: first half encodes the row, second the column."""
    if dim % 4:
        raise ConfigError(f"2-D sin/cos encoding needs dim divisible by 4, got {dim}")
    quarter = dim // 4
    freqs = 1.0 / 10000.0 ** (np.arange(quarter) / quarter)
    r, c = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")

    def enc(pos):
        ang = pos.reshape(-1, 1) * freqs
        return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)

    return np.concatenate([enc(r), enc(c)], axis=1)


@dataclass
class EncoderConfig:
    patch_size: int = 8
    z: int = 32
    layers: int = 1
    heads: int = 2


class PatchEncoder:
    """Random-initialised, permanently frozen stand-in for a pretrained ViT.

    Pixels (rescaled to [-1, 1]) go through a linear patch embedding; when
    ``layers > 0`` a fixed 2-D sin/cos table is added and ``layers``
    bidirectional pre-norm blocks follow. With zero blocks the map is strictly
    per patch.
    """

    def __init__(self, config: EncoderConfig, seed: int):
        self.config = config
        rng = rng_for(seed, "encoder")
        p = config.patch_size
        self.embed = Linear("encoder.patch_embed", 3 * p * p, config.z, rng)
        self.blocks = [Block(f"encoder.block{i}", config.z, config.heads, rng, causal=False) for i in range(config.layers)]
        for prm in self.params():
            prm.trainable = False

    def params(self) -> list[Parameter]:
        out = self.embed.params()
        for b in self.blocks:
            out += b.params()
        return out

    def __call__(self, image: ImageGrid) -> ContinuousSequence:
        return encode_continuous(image, self)


def encode_continuous(image: ImageGrid, encoder: PatchEncoder) -> ContinuousSequence:
    p = encoder.config.patch_size
    rows, cols = grid_shape(image.width, image.height, p)
    x, _ = encoder.embed.forward(patchify(image, p) * 2.0 - 1.0)
    if encoder.blocks:
        pos = sincos_2d(rows, cols, encoder.config.z)
        x = x + pos
        for blk in encoder.blocks:
            x, _ = blk.forward(x)
    positions = [(r, c) for r in range(rows) for c in range(cols)]
    return ContinuousSequence(tokens=x, patch_positions=positions, image_id=image.image_id)
