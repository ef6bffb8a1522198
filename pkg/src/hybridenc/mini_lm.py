"""Tiny decoder-only transformer over hybrid (continuous + discrete + text) sequences."""
from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .errors import CapacityError, ConfigError, DataError, ShapeError
from .layers import Block, LayerNorm
from .numeric_core import Parameter, atomic_write_bytes, cross_entropy_logits, matmul, rng_for, write_mvt
from .vocab_bridge import EmbeddingTable, Projector

CONT, DISC, TEXT = "C", "D", "T"
NO_ID = -1


@dataclass
class LmConfig:
    z_llm: int = 64
    layers: int = 2
    heads: int = 2
    max_len: int = 512
    vocab_size: int = 128

    def __post_init__(self):
        if self.z_llm % self.heads:
            raise ConfigError(f"z_llm={self.z_llm} not divisible by heads={self.heads}")


@dataclass
class HybridSequence:
    """Embedded model input plus the bookkeeping needed for losses and gradient routing.

    ``ids`` holds the unified token id per position (``NO_ID`` on continuous
    rows). ``target_mask[t]`` marks positions whose token is predicted from
    position ``t-1``; continuous rows are never targets. ``cont_feats`` are the
    pre-projection patch features of the ``C`` rows, in order.
    """

    embeds: np.ndarray
    tags: str
    ids: np.ndarray
    target_mask: np.ndarray | None = None
    spans: list[tuple[str, int, int]] = field(default_factory=list)
    cont_feats: np.ndarray | None = None

    def __post_init__(self):
        self.embeds = np.asarray(self.embeds, dtype=np.float64)
        self.ids = np.asarray(self.ids, dtype=np.int64).reshape(-1)
        n = self.embeds.shape[0]
        if len(self.tags) != n or self.ids.size != n:
            raise ShapeError(f"embeds ({n}), tags ({len(self.tags)}) and ids ({self.ids.size}) disagree")
        is_cont = np.array([t == CONT for t in self.tags], dtype=bool)
        if np.any((self.ids == NO_ID) != is_cont):
            raise DataError("continuous rows must carry NO_ID and only they may")
        if self.target_mask is None:
            self.target_mask = ~is_cont
        else:
            self.target_mask = np.asarray(self.target_mask, dtype=bool) & ~is_cont
        n_cont = int(is_cont.sum())
        if self.cont_feats is not None and len(self.cont_feats) != n_cont:
            raise ShapeError(f"{len(self.cont_feats)} continuous features for {n_cont} C rows")

    def __len__(self) -> int:
        return self.embeds.shape[0]

    @classmethod
    def from_ids(cls, ids, table: EmbeddingTable, tags: str | None = None, target_mask=None) -> "HybridSequence":
        ids = np.asarray(ids, dtype=np.int64).reshape(-1)
        if tags is None:
            tags = "".join(DISC if table.vocab.is_visual(int(i)) else TEXT for i in ids)
        return cls(table(ids), tags, ids, target_mask)

    @classmethod
    def concat(cls, parts: list["HybridSequence"]) -> "HybridSequence":
        if not parts:
            raise DataError("nothing to concatenate")
        spans, off = [], 0
        for p in parts:
            spans += [(name, s + off, e + off) for name, s, e in p.spans]
            off += len(p)
        feats = [p.cont_feats for p in parts if p.cont_feats is not None and len(p.cont_feats)]
        return cls(
            embeds=np.concatenate([p.embeds for p in parts], axis=0),
            tags="".join(p.tags for p in parts),
            ids=np.concatenate([p.ids for p in parts]),
            target_mask=np.concatenate([p.target_mask for p in parts]),
            spans=spans,
            cont_feats=np.concatenate(feats, axis=0) if feats else None,
        )

    def with_targets(self, mask) -> "HybridSequence":
        return HybridSequence(self.embeds, self.tags, self.ids, mask, list(self.spans), self.cont_feats)


class MiniLM:
    """Pre-norm causal transformer whose output head is tied to the shared embedding table."""

    def __init__(self, config: LmConfig, table: EmbeddingTable, seed: int):
        if table.dim != config.z_llm or table.vocab.size != config.vocab_size:
            raise ShapeError("embedding table does not match LM config")
        self.config = config
        self.table = table
        rng = rng_for(seed, "lm")
        self.pos = Parameter("lm.pos_embed", rng.normal(0.0, 0.02, size=(config.max_len, config.z_llm)))
        self.blocks = [Block(f"lm.block{i}", config.z_llm, config.heads, rng, causal=True) for i in range(config.layers)]
        self.ln_f = LayerNorm("lm.ln_f", config.z_llm)

    def params(self) -> list[Parameter]:
        """Transformer-owned parameters; the shared table is listed by its owner."""
        out = [self.pos]
        for b in self.blocks:
            out += b.params()
        return out + self.ln_f.params()

    # -- forward / backward ---------------------------------------------------

    def forward(self, embeds: np.ndarray):
        t = embeds.shape[0]
        if t > self.config.max_len:
            raise CapacityError(f"sequence length {t} exceeds max_len {self.config.max_len}")
        if t == 0:
            raise DataError("empty sequence")
        x = embeds + self.pos.value[:t]
        caches = []
        for blk in self.blocks:
            x, c = blk.forward(x)
            caches.append(c)
        h, c_ln = self.ln_f.forward(x)
        return h, (t, caches, c_ln)

    def backward(self, dh: np.ndarray, cache) -> np.ndarray:
        """Backprop from final hidden states; returns the gradient w.r.t. input embeddings."""
        t, caches, c_ln = cache
        dx = self.ln_f.backward(dh, c_ln)
        for blk, c in zip(reversed(self.blocks), reversed(caches)):
            dx = blk.backward(dx, c)
        self.pos.grad[:t] += dx
        return dx

    def logits(self, hidden: np.ndarray) -> np.ndarray:
        return matmul(hidden, self.table.weight.value.T)

    def loss(self, seq: HybridSequence, backward: bool = False):
        """Mean next-token cross-entropy over ``seq.target_mask``.

        With ``backward=True`` parameter grads are accumulated and the gradient
        w.r.t. ``seq.embeds`` is returned alongside the loss.
        """
        pos = np.flatnonzero(seq.target_mask[1:]) + 1
        if pos.size == 0:
            raise DataError("sequence has no target positions")
        hidden, cache = self.forward(seq.embeds)
        rows = hidden[pos - 1]
        loss, dlogits = cross_entropy_logits(self.logits(rows), seq.ids[pos])
        if not backward:
            return loss
        self.table.weight.grad += matmul(dlogits.T, rows)
        dh = np.zeros_like(hidden)
        dh[pos - 1] = matmul(dlogits, self.table.weight.value)
        return loss, self.backward(dh, cache)


def attention_maps(cache) -> list[np.ndarray]:
    """Per-layer ``[heads, T, T]`` attention probabilities from a forward cache."""
    _, caches, _ = cache
    return [c[1][3] for c in caches]


def forward_hidden(seq: HybridSequence, lm: MiniLM) -> tuple[np.ndarray, list[np.ndarray]]:
    hidden, cache = lm.forward(seq.embeds)
    return hidden, attention_maps(cache)


def lm_loss(seq: HybridSequence, lm: MiniLM) -> float:
    return lm.loss(seq)


def backprop_inputs(seq: HybridSequence, d_embeds: np.ndarray, table: EmbeddingTable, projector: Projector | None) -> None:
    """Route input-embedding gradients to table rows (D/T) and through the projector (C)."""
    has_id = seq.ids != NO_ID
    if np.any(has_id):
        table.backward(seq.ids[has_id], d_embeds[has_id])
    if projector is not None and seq.cont_feats is not None and len(seq.cont_feats):
        _, cache = projector.forward(seq.cont_feats)
        projector.backward(d_embeds[~has_id], cache)


def generate_greedy(prefix, lm: MiniLM, steps: int):
    """Argmax decoding; ties go to the lowest id.

    ``prefix`` is either a sequence of token ids (the return value is prefix +
    generated ids) or a ``HybridSequence`` (only the generated ids are returned).
    """
    table = lm.table
    if isinstance(prefix, HybridSequence):
        seq, out = prefix, []
    else:
        ids = [int(i) for i in prefix]
        if not ids:
            raise DataError("generation needs a non-empty prefix")
        seq, out = HybridSequence.from_ids(ids, table), ids
    if len(seq) + steps > lm.config.max_len:
        raise CapacityError(f"{len(seq)} + {steps} steps exceeds max_len {lm.config.max_len}")
    embeds = seq.embeds
    for _ in range(steps):
        hidden, _ = lm.forward(embeds)
        nxt = int(np.argmax(lm.logits(hidden[-1:])[0]))
        out.append(nxt)
        embeds = np.concatenate([embeds, table([nxt])], axis=0)
    return out


def attention_export(seq: HybridSequence, lm: MiniLM, layer: int, path=None) -> tuple[np.ndarray, str]:
    """Head-averaged attention of ``layer`` (negative counts from the end).

    When ``path`` is given the matrix is written as MVT1 and the tags to
    ``<path>.tags`` (one C/D/T character per line).
    """
    n_layers = len(lm.blocks)
    if not -n_layers <= layer < n_layers:
        raise ConfigError(f"layer {layer} out of range for {n_layers} layers")
    _, maps = forward_hidden(seq, lm)
    att = maps[layer].mean(axis=0)
    if path is not None:
        write_mvt(path, att)
        atomic_write_bytes(os.fspath(path) + ".tags", ("\n".join(seq.tags) + "\n").encode())
    return att, seq.tags


def segment_mass(att: np.ndarray, tags: str, query: str = TEXT, keys: str = DISC) -> float:
    """Mean attention mass that ``query``-tagged rows place on ``keys``-tagged columns.

    Only query rows that come after the first key position are averaged (earlier
    rows cannot see any key under the causal mask). Returns 0.0 if there are none.
    """
    tag_arr = np.array(list(tags))
    key_cols = np.isin(tag_arr, list(keys))
    if not key_cols.any():
        return 0.0
    first = int(np.argmax(key_cols))
    rows = [i for i in range(first + 1, len(tags)) if tags[i] in query]
    if not rows:
        return 0.0
    return float(att[np.ix_(rows, np.flatnonzero(key_cols))].sum(axis=1).mean())
