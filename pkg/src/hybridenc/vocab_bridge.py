"""Unified text+visual vocabulary, the shared embedding table and the continuous-feature projector."""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .continuous_encoder import ContinuousSequence
from .errors import DataError, ShapeError
from .layers import GeluMLP
from .numeric_core import Parameter, atomic_write_bytes, rng_for


@dataclass(frozen=True)
class UnifiedVocab:
    """Text ids occupy ``[0, n_text)``, visual codebook ids ``[n_text, n_text + n_visual)``."""

    n_text: int
    n_visual: int

    @property
    def size(self) -> int:
        return self.n_text + self.n_visual

    @property
    def eos_id(self) -> int:
        return self.n_text - 1

    def is_visual(self, uid: int) -> bool:
        return self.n_text <= uid < self.size

    def to_unified(self, d) -> int | np.ndarray:
        return to_unified(d, self)

    def from_unified(self, uid) -> int | np.ndarray:
        u = np.asarray(uid)
        if np.any(u < self.n_text) or np.any(u >= self.size):
            raise IndexError(f"unified id outside visual range [{self.n_text}, {self.size})")
        return u - self.n_text if u.ndim else int(u) - self.n_text


def to_unified(d, vocab: UnifiedVocab):
    """Offset a codebook index (or array of them) into the unified id space."""
    arr = np.asarray(d, dtype=np.int64)
    if np.any(arr < 0) or np.any(arr >= vocab.n_visual):
        raise IndexError(f"discrete index outside [0, {vocab.n_visual})")
    return arr + vocab.n_text if arr.ndim else int(arr) + vocab.n_text


def write_vocab_manifest(path, vocab: UnifiedVocab) -> None:
    atomic_write_bytes(path, f"N={vocab.n_text}\nNV={vocab.n_visual}\nEOS={vocab.eos_id}\n".encode())


def read_vocab_manifest(path) -> UnifiedVocab:
    fields = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                k, _, v = line.partition("=")
                fields[k.strip()] = int(v)
    try:
        return UnifiedVocab(fields["N"], fields["NV"])
    except KeyError as exc:
        raise DataError(f"{os.fspath(path)}: vocabulary manifest lacks {exc}") from None


class EmbeddingTable:
    """Single ``[N_u, z_llm]`` table shared by text and discrete visual tokens (and the tied LM head)."""

    def __init__(self, weights: np.ndarray, vocab: UnifiedVocab, name: str = "embed.weight"):
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape[0] != vocab.size:
            raise ShapeError(f"table has {weights.shape[0]} rows, vocabulary has {vocab.size}")
        self.vocab = vocab
        self.weight = Parameter(name, weights)

    @property
    def dim(self) -> int:
        return self.weight.value.shape[1]

    def params(self) -> list[Parameter]:
        return [self.weight]

    def __call__(self, ids) -> np.ndarray:
        return embed(ids, self)

    def backward(self, ids, grad_rows: np.ndarray) -> None:
        # np.add.at is unbuffered and walks ids in order: deterministic accumulation for repeats
        np.add.at(self.weight.grad, np.asarray(ids, dtype=np.int64), grad_rows)


def base_text_table(n_text: int, dim: int, seed: int) -> np.ndarray:
    """Stand-in for a pretrained text embedding matrix."""
    return rng_for(seed, "embed.base").normal(0.0, 0.02, size=(n_text, dim))


def expand_embeddings(base: np.ndarray, n_visual: int, seed: int) -> EmbeddingTable:
    """Append ``n_visual`` rows drawn from N(0, 0.02) below an unchanged copy of ``base``."""
    base = np.asarray(base, dtype=np.float64)
    new = rng_for(seed, "embed.expand").normal(0.0, 0.02, size=(n_visual, base.shape[1]))
    return EmbeddingTable(np.concatenate([base, new], axis=0), UnifiedVocab(base.shape[0], n_visual))


def embed(ids, table: EmbeddingTable) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.int64).reshape(-1)
    if np.any(ids < 0) or np.any(ids >= table.vocab.size):
        raise IndexError(f"token id outside [0, {table.vocab.size})")
    return table.weight.value[ids].copy()


class Projector(GeluMLP):
    """Two linear layers ``z -> z_llm -> z_llm`` with GELU, mapping patch features into embedding space."""

    def __init__(self, z: int, z_llm: int, seed: int):
        super().__init__("projector", z, z_llm, z_llm, rng_for(seed, "projector"))

    @property
    def in_dim(self) -> int:
        return self.fc1.n_in


def project_continuous(seq: ContinuousSequence | np.ndarray, proj: Projector) -> np.ndarray:
    x = seq.tokens if isinstance(seq, ContinuousSequence) else np.asarray(seq, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != proj.in_dim:
        raise ShapeError(f"projector expects [len, {proj.in_dim}], got {x.shape}")
    y, _ = proj.forward(x)
    return y
