"""Segmentation masks -> binary patch labels, plus a seeded synthetic image/mask generator."""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .continuous_encoder import ImageGrid, grid_shape
from .errors import DataError, ShapeError
from .numeric_core import atomic_write_bytes, rng_for

MVM_MAGIC = b"MVM1"


@dataclass
class MaskRaster:
    data: np.ndarray  # [H, W] of {0, 1}

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 2:
            raise ShapeError(f"mask must be [H, W], got {self.data.shape}")
        if not np.all((self.data == 0) | (self.data == 1)):
            raise DataError("mask values must be 0 or 1")
        self.data = self.data.astype(np.uint8)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass
class PatchLabels:
    labels: np.ndarray  # [n_c] of {0, 1}
    patch_size: int
    source_id: str = ""


def patch_labels(mask: MaskRaster, p: int, image: ImageGrid | None = None, min_fraction: float | None = None,
                 source_id: str = "") -> PatchLabels:
    """Label patch i as 1 iff its p x p block shares at least one pixel with the mask.

    ``min_fraction`` switches to an area threshold (covered fraction >= value);
    the default ``None`` is the any-overlap rule. Patch order matches ``patchify``.
    """
    if image is not None and (image.width, image.height) != (mask.width, mask.height):
        raise DataError(f"mask is {mask.width}x{mask.height}, image is {image.width}x{image.height}")
    rows, cols = grid_shape(mask.width, mask.height, p)
    blocks = mask.data.reshape(rows, p, cols, p).transpose(0, 2, 1, 3).reshape(rows * cols, p * p)
    if min_fraction is None:
        lab = blocks.max(axis=1)
    else:
        lab = (blocks.mean(axis=1) >= min_fraction).astype(np.uint8)
    return PatchLabels(lab.astype(np.uint8), p, source_id)


@dataclass
class SynthGeometry:
    width: int = 32
    height: int = 32
    min_side: int = 6
    max_side: int = 16
    background: tuple[float, float] = (0.0, 0.4)
    foreground: tuple[float, float] = (0.7, 1.0)


@dataclass
class SynthSample:
    image: ImageGrid
    mask: MaskRaster
    rect: tuple[int, int, int, int]  # top, left, height, width

    @property
    def sample_id(self) -> str:
        return self.image.image_id


def synth_masks(count: int, geometry: SynthGeometry | None = None, seed: int = 0) -> list[SynthSample]:
    """Noise images each containing one bright axis-aligned rectangle; the mask is exactly that rectangle."""
    g = geometry or SynthGeometry()
    rng = rng_for(seed, "synth_masks")
    out = []
    for i in range(count):
        h = int(rng.integers(g.min_side, g.max_side + 1))
        w = int(rng.integers(g.min_side, g.max_side + 1))
        top = int(rng.integers(0, g.height - h + 1))
        left = int(rng.integers(0, g.width - w + 1))
        img = rng.uniform(*g.background, size=(g.height, g.width, 3))
        img[top : top + h, left : left + w] = rng.uniform(*g.foreground, size=(h, w, 3))
        mask = np.zeros((g.height, g.width), dtype=np.uint8)
        mask[top : top + h, left : left + w] = 1
        out.append(SynthSample(ImageGrid(img, image_id=f"img{i:05d}"), MaskRaster(mask), (top, left, h, w)))
    return out


def encode_mvm(mask: MaskRaster) -> bytes:
    return MVM_MAGIC + struct.pack("<II", mask.width, mask.height) + mask.data.astype(np.uint8).tobytes()


def decode_mvm(buf: bytes) -> MaskRaster:
    if len(buf) < 12 or buf[:4] != MVM_MAGIC:
        raise DataError("not an MVM1 mask (bad magic)")
    w, h = struct.unpack_from("<II", buf, 4)
    if len(buf) != 12 + w * h:
        raise DataError(f"MVM1 payload has {len(buf) - 12} bytes, expected {w * h}")
    return MaskRaster(np.frombuffer(buf, dtype=np.uint8, offset=12).reshape(h, w))


def write_mvm(path, mask: MaskRaster) -> None:
    atomic_write_bytes(path, encode_mvm(mask))


def read_mvm(path) -> MaskRaster:
    with open(path, "rb") as fh:
        return decode_mvm(fh.read())
