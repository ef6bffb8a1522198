"""Relevance scoring of continuous patches against the discrete-token summary, and top-m reduction."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .continuous_encoder import ContinuousSequence
from .discrete_tokenizer import DiscreteTokens
from .errors import ConfigError, DataError, ShapeError
from .layers import Linear
from .mini_lm import HybridSequence, MiniLM
from .numeric_core import AdamW, Parameter, bce_with_logits, rng_for, sigmoid
from .vocab_bridge import Projector, UnifiedVocab, project_continuous, to_unified


@dataclass
class EosSummary:
    vector: np.ndarray  # [z_llm]
    token_ids: tuple[int, ...] = ()


@dataclass
class ReducedSequence:
    tokens: np.ndarray  # [m, z]
    kept_positions: np.ndarray  # strictly increasing original indices
    scores: np.ndarray  # scores of the kept patches
    image_id: str = ""

    def __len__(self) -> int:
        return self.tokens.shape[0]


class SelectorMLP:
    """``2*z_llm -> h -> h -> 1`` with ReLU; the single output is a logit."""

    def __init__(self, in_dim: int, hidden: int, seed: int):
        rng = rng_for(seed, "selector")
        self.in_dim = in_dim
        self.layer1 = Linear("selector.layer1", in_dim, hidden, rng, std=math.sqrt(2.0 / in_dim))
        self.layer2 = Linear("selector.layer2", hidden, hidden, rng, std=math.sqrt(2.0 / hidden))
        self.layer3 = Linear("selector.layer3", hidden, 1, rng)

    def params(self) -> list[Parameter]:
        return self.layer1.params() + self.layer2.params() + self.layer3.params()

    def forward(self, x):
        a1, c1 = self.layer1.forward(x)
        h1 = np.maximum(a1, 0.0)
        a2, c2 = self.layer2.forward(h1)
        h2 = np.maximum(a2, 0.0)
        out, c3 = self.layer3.forward(h2)
        return out[:, 0], (c1, a1, c2, a2, c3)

    def backward(self, dlogits, cache):
        c1, a1, c2, a2, c3 = cache
        dh2 = self.layer3.backward(dlogits.reshape(-1, 1), c3)
        dh1 = self.layer2.backward(dh2 * (a2 > 0), c2)
        return self.layer1.backward(dh1 * (a1 > 0), c1)


def eos_summary(discrete: DiscreteTokens, lm: MiniLM, vocab: UnifiedVocab) -> EosSummary:
    """Final-layer hidden state at an EOS appended after the unified discrete tokens."""
    ids = np.concatenate([to_unified(np.asarray(discrete.indices), vocab).reshape(-1), [vocab.eos_id]])
    hidden, _ = lm.forward(HybridSequence.from_ids(ids, lm.table).embeds)
    return EosSummary(vector=hidden[-1].copy(), token_ids=tuple(int(i) for i in ids))


def selector_inputs(seq: ContinuousSequence | np.ndarray, eos: EosSummary, projector: Projector | None) -> np.ndarray:
    """Rows ``concat(project(v_i), h_eos)``; ``projector=None`` uses the raw features."""
    x = seq.tokens if isinstance(seq, ContinuousSequence) else np.asarray(seq, dtype=np.float64)
    if projector is not None:
        x = project_continuous(x, projector)
    h = np.broadcast_to(eos.vector, (x.shape[0], eos.vector.shape[0]))
    return np.concatenate([x, h], axis=1)


def score_patches(seq, eos: EosSummary, mlp: SelectorMLP, projector: Projector | None = None) -> np.ndarray:
    x = selector_inputs(seq, eos, projector)
    if x.shape[1] != mlp.in_dim:
        raise ShapeError(f"selector expects {mlp.in_dim} input features, got {x.shape[1]}")
    logits, _ = mlp.forward(x)
    return sigmoid(logits)


def keep_count(n_c: int, alpha: float) -> int:
    """``floor(n_c * alpha)``; the 1e-9 guard absorbs binary rounding such as 100*0.29 = 28.999..."""
    if not 0.0 < alpha <= 1.0:
        raise ConfigError(f"keeping ratio must lie in (0, 1], got {alpha}")
    m = math.floor(n_c * alpha + 1e-9)
    if m < 1:
        raise ConfigError(f"keeping ratio {alpha} keeps no patch out of {n_c}")
    return m


def select_top_m(seq: ContinuousSequence, scores, alpha: float) -> ReducedSequence:
    """Keep the ``floor(n_c*alpha)`` best-scoring patches, in their original order.

    Equal scores prefer the lower original index.
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    n_c = len(seq)
    if scores.size != n_c:
        raise ShapeError(f"{scores.size} scores for {n_c} patches")
    m = keep_count(n_c, alpha)
    kept = np.sort(np.argsort(-scores, kind="stable")[:m])
    return ReducedSequence(seq.tokens[kept].copy(), kept, scores[kept].copy(), seq.image_id)


@dataclass
class SelectorTrainConfig:
    steps: int = 300
    lr: float = 1e-3
    batch: int = 8
    weight_decay: float = 0.0
    seed: int = 0


@dataclass
class SelectorExample:
    seq: ContinuousSequence
    eos: EosSummary
    labels: np.ndarray


def train_selector(dataset, mlp: SelectorMLP, projector: Projector | None, config: SelectorTrainConfig):
    """Fit the selector with BCE on patch labels; returns ``(mlp, loss_trace)``.

    Only the selector's parameters are handed to the optimizer. Projected
    inputs are computed once since nothing upstream changes during training.
    """
    dataset = [d if isinstance(d, SelectorExample) else SelectorExample(*d) for d in dataset]
    if not dataset:
        raise DataError("selector training needs at least one example")
    inputs, labels = [], []
    for ex in dataset:
        lab = np.asarray(ex.labels, dtype=np.float64).reshape(-1)
        if lab.size != len(ex.seq):
            raise ShapeError(f"{lab.size} labels for {len(ex.seq)} patches")
        inputs.append(selector_inputs(ex.seq, ex.eos, projector))
        labels.append(lab)
    opt = AdamW(mlp.params(), lr=config.lr, weight_decay=config.weight_decay)
    rng = rng_for(config.seed, "selector.batches")
    trace = []
    for _ in range(config.steps):
        pick = rng.choice(len(dataset), size=min(config.batch, len(dataset)), replace=False)
        x = np.concatenate([inputs[i] for i in pick], axis=0)
        y = np.concatenate([labels[i] for i in pick])
        opt.zero_grad()
        logits, cache = mlp.forward(x)
        loss, dlogits = bce_with_logits(logits, y)
        if not math.isfinite(loss):
            raise FloatingPointError("selector loss became non-finite")
        mlp.backward(dlogits, cache)
        opt.step()
        trace.append(loss)
    return mlp, trace


def selector_accuracy(dataset, mlp: SelectorMLP, projector: Projector | None, threshold: float = 0.5) -> float:
    hits = total = 0
    for d in dataset:
        ex = d if isinstance(d, SelectorExample) else SelectorExample(*d)
        pred = score_patches(ex.seq, ex.eos, mlp, projector) >= threshold
        hits += int(np.sum(pred == (np.asarray(ex.labels) > 0.5)))
        total += pred.size
    return hits / total
