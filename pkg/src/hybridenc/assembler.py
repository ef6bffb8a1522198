"""Per-image hybrid blocks, multi-image interleaving and token-budget accounting."""
from __future__ import annotations

import json
import re
from dataclasses import dataclass

import numpy as np

from .discrete_tokenizer import DiscreteTokens
from .errors import DataError, PlanError
from .mini_lm import CONT, DISC, NO_ID, TEXT, HybridSequence
from .patch_selector import ReducedSequence, keep_count
from .vocab_bridge import EmbeddingTable, Projector, project_continuous, to_unified

IMAGE, SEGMENT = "image", "text"


@dataclass
class MultimodalInput:
    """``plan`` lists ``("image", i)`` / ``("text", j)`` references in reading order."""

    images: list[str]
    text_segments: list[list[int]]
    plan: list[tuple[str, int]]

    def validate(self) -> None:
        seen = {IMAGE: [], SEGMENT: []}
        for kind, idx in self.plan:
            if kind not in seen:
                raise PlanError(f"unknown plan entry kind {kind!r}")
            seen[kind].append(idx)
        for kind, n in ((IMAGE, len(self.images)), (SEGMENT, len(self.text_segments))):
            if sorted(seen[kind]) != list(range(n)):
                raise PlanError(f"every {kind} must be referenced exactly once; plan has {seen[kind]} for {n} items")


def assemble_image_block(reduced: ReducedSequence | None, discrete: DiscreteTokens | None,
                         table: EmbeddingTable, projector: Projector | None) -> HybridSequence:
    """``[projected kept patches ; embedded unified discrete tokens]`` for one image.

    Either part may be ``None`` (discrete-only or continuous-only encodings).
    """
    if reduced is None and discrete is None:
        raise DataError("image block needs continuous or discrete tokens")
    if reduced is not None and discrete is not None and reduced.image_id != discrete.image_id:
        raise DataError(f"continuous tokens from {reduced.image_id!r}, discrete from {discrete.image_id!r}")
    image_id = reduced.image_id if reduced is not None else discrete.image_id
    parts, tags, ids, feats = [], "", [], None
    if reduced is not None:
        parts.append(project_continuous(reduced.tokens, projector))
        tags += CONT * len(reduced)
        ids += [NO_ID] * len(reduced)
        feats = reduced.tokens
    if discrete is not None:
        uids = np.asarray(to_unified(np.asarray(discrete.indices), table.vocab)).reshape(-1)
        parts.append(table(uids))
        tags += DISC * len(uids)
        ids += uids.tolist()
    return HybridSequence(np.concatenate(parts, axis=0), tags, ids, spans=[(image_id, 0, len(tags))], cont_feats=feats)


def text_block(ids, table: EmbeddingTable, targets: bool = True) -> HybridSequence:
    ids = np.asarray(ids, dtype=np.int64).reshape(-1)
    return HybridSequence(table(ids), TEXT * ids.size, ids, np.full(ids.size, targets))


def interleave(inp: MultimodalInput, blocks, table: EmbeddingTable, separator: int | None = None) -> HybridSequence:
    """Concatenate image blocks and text segments in plan order.

    ``blocks`` maps image index (or image id) to its ``HybridSequence``. With
    ``separator`` set, that text id is placed between consecutive plan items.
    """
    inp.validate()
    parts = []
    for n, (kind, idx) in enumerate(inp.plan):
        if n and separator is not None:
            parts.append(text_block([separator], table))
        if kind == IMAGE:
            blk = blocks[idx] if not isinstance(blocks, dict) or idx in blocks else blocks[inp.images[idx]]
            parts.append(blk)
        else:
            parts.append(text_block(inp.text_segments[idx], table))
    if not parts:
        raise PlanError("empty interleave plan")
    parts = [p for p in parts if len(p)]
    return HybridSequence.concat(parts)


def image_spans_ok(seq: HybridSequence) -> bool:
    """True iff every recorded image span matches ``C*D*`` with at least one token."""
    return all(e > s and re.fullmatch(r"C*D*", seq.tags[s:e]) for _, s, e in seq.spans)


@dataclass
class BudgetReport:
    alpha: float
    n_c: int
    m: int
    n_d: int
    images: int = 1
    text: int = 0

    @property
    def visual_total(self) -> int:
        return self.images * (self.m + self.n_d)

    @property
    def total(self) -> int:
        return self.visual_total + self.text

    @property
    def baseline_total(self) -> int:
        return self.images * self.n_c + self.text

    @property
    def quadratic_ratio(self) -> float:
        return (self.total / self.baseline_total) ** 2

    def as_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "m": self.m,
            "nd": self.n_d,
            "visual_total": self.visual_total,
            "quadratic_ratio": self.quadratic_ratio,
            "nc": self.n_c,
            "images": self.images,
            "text": self.text,
            "total": self.total,
        }

    def json_line(self) -> str:
        return json.dumps(self.as_dict())


def budget_report(n_c: int, n_d: int, alphas, images: int = 1, text: int = 0) -> list[BudgetReport]:
    """Closed-form token counts per keeping ratio; no model involved.

    The quadratic ratio compares ``total`` against the same input encoded with
    all ``n_c`` continuous tokens and no discrete tokens.
    """
    return [BudgetReport(float(a), n_c, keep_count(n_c, float(a)), n_d, images, text) for a in alphas]
