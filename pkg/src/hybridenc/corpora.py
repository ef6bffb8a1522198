"""Synthetic text vocabulary and the per-stage toy corpora.

Text ids are plain integers below ``n_text``. The top of the range is reserved
for control tokens; the bottom holds words that describe the bright rectangle
in a synthetic image, so captions and answers are functions of image content.
"""
from __future__ import annotations

from dataclasses import dataclass


from .errors import ConfigError, DataError
from .numeric_core import rng_for
from .pseudo_labels import SynthGeometry, SynthSample

ROW_WORDS = (0, 1, 2)  # top, middle, bottom
COL_WORDS = (3, 4, 5)  # left, center, right
SIZE_WORDS = (6, 7)  # small, large
Q_ROW, Q_COL, Q_SIZE = 8, 9, 10
FIRST_FILLER = 11
N_RESERVED = 7


@dataclass(frozen=True)
class TextIds:
    n_text: int

    def __post_init__(self):
        if self.n_text < FIRST_FILLER + N_RESERVED + 1:
            raise ConfigError(f"text vocabulary of {self.n_text} is too small for the toy corpora")

    eos = property(lambda s: s.n_text - 1)
    sep = property(lambda s: s.n_text - 2)
    t2i = property(lambda s: s.n_text - 3)
    i2t = property(lambda s: s.n_text - 4)
    caption = property(lambda s: s.n_text - 5)
    question = property(lambda s: s.n_text - 6)
    answer = property(lambda s: s.n_text - 7)

    @property
    def filler(self) -> range:
        return range(FIRST_FILLER, self.n_text - N_RESERVED)


def describe(rect, geometry: SynthGeometry) -> tuple[int, int, int]:
    """(row word, column word, size word) for a rectangle ``(top, left, h, w)``."""
    top, left, h, w = rect
    cy = (top + h / 2) / geometry.height
    cx = (left + w / 2) / geometry.width
    row = ROW_WORDS[min(int(cy * 3), 2)]
    col = COL_WORDS[min(int(cx * 3), 2)]
    mid_area = ((geometry.min_side + geometry.max_side) / 2) ** 2
    size = SIZE_WORDS[int(h * w > mid_area)]
    return row, col, size


@dataclass
class PairExample:
    """Stage-2 item: text ids and the image they describe."""

    sample: SynthSample
    text: list[int]


@dataclass
class CaptionExample:
    sample: SynthSample
    caption: list[int]


@dataclass
class InstructionExample:
    samples: list[SynthSample]
    question: list[int]
    response: list[int]


def pair_corpus(samples: list[SynthSample], ids: TextIds, geometry: SynthGeometry, seed: int) -> list[PairExample]:
    """Description words plus one random-but-fixed filler id per image."""
    rng = rng_for(seed, "corpus.pairs")
    filler = list(ids.filler)
    return [PairExample(s, [*describe(s.rect, geometry), int(filler[rng.integers(len(filler))])]) for s in samples]


def caption_corpus(samples: list[SynthSample], geometry: SynthGeometry) -> list[CaptionExample]:
    return [CaptionExample(s, list(describe(s.rect, geometry))) for s in samples]


def instruction_corpus(samples: list[SynthSample], ids: TextIds, geometry: SynthGeometry, count: int, seed: int,
                       max_images: int = 3) -> list[InstructionExample]:
    """Questions about 1..max_images images; the answer lists the asked attribute per image."""
    if not samples:
        raise DataError("instruction corpus needs images")
    rng = rng_for(seed, "corpus.instructions")
    out = []
    for _ in range(count):
        k = int(rng.integers(1, max_images + 1))
        pick = [samples[int(i)] for i in rng.choice(len(samples), size=min(k, len(samples)), replace=False)]
        q = int(rng.integers(3))
        words = [describe(s.rect, geometry)[q] for s in pick]
        out.append(InstructionExample(pick, [ids.question, (Q_ROW, Q_COL, Q_SIZE)[q], ids.answer], words))
    return out
