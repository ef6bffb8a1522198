"""Discrete visual tokenizer: mean-pooled patch slots quantized against a k-means codebook."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .continuous_encoder import ContinuousSequence
from .errors import ConfigError, DataError, ShapeError


@dataclass
class Codebook:
    codewords: np.ndarray  # [N_v, z_d]

    def __post_init__(self):
        self.codewords = np.asarray(self.codewords, dtype=np.float64)
        if self.codewords.ndim != 2:
            raise ShapeError(f"codewords must be [N_v, z_d], got {self.codewords.shape}")
        if not np.all(np.isfinite(self.codewords)):
            raise DataError("codebook contains non-finite values")
        if len(self.codewords) and len(np.unique(self.codewords, axis=0)) != len(self.codewords):
            raise DataError("codebook has duplicate codewords")

    @property
    def size(self) -> int:
        return self.codewords.shape[0]

    @property
    def dim(self) -> int:
        return self.codewords.shape[1]


@dataclass
class DiscreteTokens:
    indices: np.ndarray  # int64 [n_d], each in [0, N_v)
    image_id: str = ""

    def __len__(self) -> int:
        return len(self.indices)


def pool_to_slots(seq: ContinuousSequence | np.ndarray, n_d: int) -> np.ndarray:
    """Mean of each run of ``n_c / n_d`` consecutive patch vectors."""
    x = seq.tokens if isinstance(seq, ContinuousSequence) else np.asarray(seq, dtype=np.float64)
    n_c = x.shape[0]
    if n_d <= 0 or n_c % n_d:
        raise ConfigError(f"n_c={n_c} is not divisible by n_d={n_d}")
    return x.reshape(n_d, n_c // n_d, x.shape[1]).mean(axis=1)


def squared_distances(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """``[n, k]`` squared Euclidean distances, computed from explicit differences."""
    diff = x[:, None, :] - centers[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def nearest(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    # argmin returns the first minimum, i.e. ties go to the lowest index
    return np.argmin(squared_distances(x, centers), axis=1)


def quantize(slots: np.ndarray, codebook: Codebook, image_id: str = "") -> DiscreteTokens:
    slots = np.asarray(slots, dtype=np.float64)
    if codebook.size == 0:
        raise ConfigError("cannot quantize against an empty codebook")
    if slots.ndim != 2 or slots.shape[1] != codebook.dim:
        raise ShapeError(f"slots {slots.shape} do not match codeword dim {codebook.dim}")
    return DiscreteTokens(indices=nearest(slots, codebook.codewords).astype(np.int64), image_id=image_id)


def kmeans_pp_init(samples: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(samples)
    chosen = [int(rng.integers(n))]
    d2 = squared_distances(samples, samples[chosen[0]][None, :])[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            raise DataError(f"need at least {k} distinct samples for k-means++ seeding")
        idx = int(rng.choice(n, p=d2 / total))
        chosen.append(idx)
        d2 = np.minimum(d2, squared_distances(samples, samples[idx][None, :])[:, 0])
    return samples[chosen].copy()


def kmeans(samples: np.ndarray, k: int, iterations: int, rng: np.random.Generator) -> tuple[np.ndarray, list[float]]:
    """Lloyd's algorithm from k-means++ seeds.

    Returns the centers and the mean quantization error measured before each
    update plus once after the last one (``iterations + 1`` values). Empty
    clusters are moved onto the samples farthest from their current centers.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2:
        raise ShapeError(f"samples must be [n, d], got {samples.shape}")
    if len(samples) < k:
        raise DataError(f"{len(samples)} samples cannot seed {k} codewords")
    centers = kmeans_pp_init(samples, k, rng)
    history = []
    for _ in range(iterations):
        d2 = squared_distances(samples, centers)
        assign = np.argmin(d2, axis=1)
        dmin = d2[np.arange(len(samples)), assign]
        history.append(float(dmin.mean()))
        counts = np.bincount(assign, minlength=k)
        new = centers.copy()
        for j in np.flatnonzero(counts):
            new[j] = samples[assign == j].mean(axis=0)
        if np.any(counts == 0):
            dmin = squared_distances(samples, new)[np.arange(len(samples)), assign]
            for j in np.flatnonzero(counts == 0):
                far = int(np.argmax(dmin))
                new[j] = samples[far]
                dmin = np.minimum(dmin, squared_distances(samples, new[j][None, :])[:, 0])
        centers = new
    history.append(float(squared_distances(samples, centers).min(axis=1).mean()))
    return centers, history


def train_codebook(samples: np.ndarray, n_v: int, iterations: int, rng: np.random.Generator) -> Codebook:
    if n_v < 2:
        raise ConfigError(f"codebook needs N_v >= 2, got {n_v}")
    centers, _ = kmeans(samples, n_v, iterations, rng)
    return Codebook(centers)


class DiscreteTokenizer:
    """Image features -> ``n_d`` codebook indices."""

    def __init__(self, codebook: Codebook, n_d: int):
        self.codebook = codebook
        self.n_d = n_d

    def slots(self, seq: ContinuousSequence) -> np.ndarray:
        return pool_to_slots(seq, self.n_d)

    def __call__(self, seq: ContinuousSequence) -> DiscreteTokens:
        return quantize(self.slots(seq), self.codebook, image_id=seq.image_id)
