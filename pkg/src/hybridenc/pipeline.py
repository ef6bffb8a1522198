"""Four-stage training: selector, embedding table, projector, then everything but encoder and selector."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields

import numpy as np

from .assembler import MultimodalInput, interleave, text_block
from .corpora import (
    CaptionExample,
    InstructionExample,
    PairExample,
    TextIds,
    caption_corpus,
    instruction_corpus,
    pair_corpus,
)
from .errors import ConfigError, DataError, InvariantError
from .mini_lm import CONT, DISC, TEXT, HybridSequence, attention_export, backprop_inputs, segment_mass
from .model import Checkpoint, EncodedImage, HybridModel, ModelConfig
from .numeric_core import AdamW, bce_with_logits, rng_for
from .patch_selector import (
    SelectorExample,
    SelectorTrainConfig,
    eos_summary,
    score_patches,
    selector_accuracy,
    select_top_m,
    selector_inputs,
    train_selector,
)
from .pseudo_labels import SynthGeometry, SynthSample, patch_labels, synth_masks

log = logging.getLogger(__name__)

LOSS_KINDS = {1: "selector-bce", 2: "discrete-autoregressive", 3: "continuous-caption", 4: "full-instruction"}
DATA_SOURCES = {1: "synth:masks", 2: "synth:pairs", 3: "synth:captions", 4: "synth:instructions"}


def stage_trainable(stage: int, name: str) -> bool:
    """Which parameters a stage may update. The encoder and codebook are never trainable."""
    if stage == 1:
        return name.startswith("selector.")
    if stage == 2:
        return name == "embed.weight"
    if stage == 3:
        return name.startswith("projector.")
    if stage == 4:
        return name.startswith(("lm.", "embed.", "projector."))
    raise ConfigError(f"unknown stage {stage}")


@dataclass
class StageConfig:
    stage: int
    steps: int = 200
    lr: float = 1e-3
    batch: int = 8
    data: str = ""
    seed: int = 0
    weight_decay: float = 0.0
    visual_rows_only: bool = False

    def __post_init__(self):
        if self.stage not in LOSS_KINDS:
            raise ConfigError(f"stage must be 1..4, got {self.stage}")
        if self.steps < 0 or self.batch < 1 or self.lr <= 0:
            raise ConfigError(f"invalid stage config {self}")
        self.data = self.data or DATA_SOURCES[self.stage]

    @property
    def loss(self) -> str:
        return LOSS_KINDS[self.stage]

    def trainable(self, name: str) -> bool:
        return stage_trainable(self.stage, name)

    def to_text(self) -> str:
        """The six core keys always; extension keys only when they differ from their defaults."""
        core = ("stage", "steps", "lr", "batch", "data", "seed")
        keep = [f.name for f in fields(self) if f.name in core or getattr(self, f.name) != f.default]
        return "".join(f"{k}={getattr(self, k)}\n" for k in keep)

    @classmethod
    def from_text(cls, text: str, **overrides) -> "StageConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        vals = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, raw = line.partition("=")
            key, raw = key.strip(), raw.strip()
            if not sep or key not in kinds:
                raise ConfigError(f"bad stage config line {line!r}")
            if kinds[key] in ("int", int):
                vals[key] = int(raw)
            elif kinds[key] in ("float", float):
                vals[key] = float(raw)
            elif kinds[key] in ("bool", bool):
                vals[key] = raw.lower() in ("1", "true", "yes")
            else:
                vals[key] = raw
        vals.update({k: v for k, v in overrides.items() if v is not None})
        if "stage" not in vals:
            raise ConfigError("stage config lacks 'stage'")
        return cls(**vals)


DEFAULT_STAGES = {
    1: StageConfig(1, steps=600, lr=1e-3, batch=8),
    2: StageConfig(2, steps=200, lr=1e-3, batch=8),
    3: StageConfig(3, steps=200, lr=1e-3, batch=8),
    4: StageConfig(4, steps=200, lr=1e-3, batch=8),
}


@dataclass
class StageReport:
    stage: int
    trace: list[float]
    initial_loss: float
    final_loss: float
    trainable: list[str]
    before: dict[str, str]
    after: dict[str, str]
    extra: dict = field(default_factory=dict)

    def frozen_violations(self) -> list[str]:
        return [n for n in self.before if n not in self.trainable and self.before[n] != self.after[n]]

    def changed(self) -> list[str]:
        return [n for n in self.before if self.before[n] != self.after[n]]


# -----------------------------------------------------------------------------
# Toy data
# -----------------------------------------------------------------------------


@dataclass
class ToyData:
    geometry: SynthGeometry
    ids: TextIds
    selector_samples: list[SynthSample]
    heldout_samples: list[SynthSample]
    pairs: list[PairExample]
    captions: list[CaptionExample]
    instructions: list[InstructionExample]


def make_toy_data(config: ModelConfig, seed: int, count: int = 256, n_pairs: int = 16, n_instructions: int = 16,
                  heldout: int = 128, samples: list[SynthSample] | None = None) -> ToyData:
    """Synthetic rectangles: ``count`` for the selector and codebook, ``heldout`` more for evaluation.

    The first ``n_pairs`` training images also feed stages 2-4.
    """
    geometry = SynthGeometry(config.image_size, config.image_size, max(2, config.image_size // 5),
                             max(3, config.image_size // 2))
    if samples is None:
        samples = synth_masks(count + heldout, geometry, seed)
    samples, held = samples[:count], samples[count:]
    ids = TextIds(config.n_text)
    small = samples[:n_pairs]
    return ToyData(
        geometry=geometry,
        ids=ids,
        selector_samples=samples,
        heldout_samples=held,
        pairs=pair_corpus(small, ids, geometry, seed),
        captions=caption_corpus(small, geometry),
        instructions=instruction_corpus(small, ids, geometry, n_instructions, seed) if small else [],
    )


def build_model(config: ModelConfig, seed: int, data: ToyData, codebook_iters: int = 20) -> HybridModel:
    model = HybridModel(config, seed)
    model.fit_codebook([s.image for s in data.selector_samples], codebook_iters)
    return model


# -----------------------------------------------------------------------------
# Stage plumbing
# -----------------------------------------------------------------------------


def _begin(model: HybridModel, cfg: StageConfig) -> tuple[list[str], dict[str, str]]:
    if model.completed_stage != cfg.stage - 1:
        raise ConfigError(
            f"stage {cfg.stage} needs a stage {cfg.stage - 1} checkpoint; model has completed stage {model.completed_stage}"
        )
    trainable = []
    for name, p in model.named_params().items():
        p.trainable = cfg.trainable(name)
        if p.trainable:
            trainable.append(name)
    return trainable, model.checksums()


def _finish(model: HybridModel, cfg: StageConfig, report: StageReport) -> Checkpoint:
    report.after = model.checksums()
    bad = report.frozen_violations()
    if bad:
        raise InvariantError(f"stage {cfg.stage} modified frozen parameters: {', '.join(bad)}")
    model.completed_stage = cfg.stage
    ckpt = Checkpoint.capture(model)
    ckpt.report = report
    log.info("stage %d: loss %.4f -> %.4f", cfg.stage, report.initial_loss, report.final_loss)
    return ckpt


def _check_finite(loss: float, params) -> None:
    if not math.isfinite(loss):
        raise InvariantError(f"non-finite loss {loss}")
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise InvariantError(f"non-finite gradient in {p.name}")
        if not np.all(np.isfinite(p.value)):
            raise InvariantError(f"non-finite value in {p.name}")


def _train_lm(model: HybridModel, cfg: StageConfig, examples: list, build) -> tuple[list[float], float, float]:
    """Mini-batch AdamW on the LM loss of ``build(example)``.

    Gradients are accumulated per example in batch order and then averaged,
    so results do not depend on anything but the seed.
    """
    if not examples:
        raise DataError(f"stage {cfg.stage} corpus is empty")
    params = [p for p in model.named_params().values() if p.trainable]
    opt = AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = rng_for(cfg.seed, f"stage{cfg.stage}.batches")
    n_text = model.vocab.n_text

    def mean_loss():
        return float(np.mean([model.lm.loss(build(ex)) for ex in examples]))

    initial = mean_loss()
    trace = []
    for _ in range(cfg.steps):
        pick = rng.choice(len(examples), size=min(cfg.batch, len(examples)), replace=False)
        model.zero_grad()
        total = 0.0
        for i in pick:
            seq = build(examples[int(i)])
            loss, d_embeds = model.lm.loss(seq, backward=True)
            backprop_inputs(seq, d_embeds, model.table, model.projector)
            total += loss
        for p in params:
            p.grad /= len(pick)
        if cfg.visual_rows_only:
            model.table.weight.grad[:n_text] = 0.0
        _check_finite(total, params)
        opt.step()
        trace.append(total / len(pick))
    return trace, initial, mean_loss()


# -----------------------------------------------------------------------------
# Stages
# -----------------------------------------------------------------------------


def selector_examples(model: HybridModel, samples: list[SynthSample]) -> list[SelectorExample]:
    out = []
    p = model.config.patch_size
    for s in samples:
        enc = model.encode(s.image, select=False)
        eos = eos_summary(enc.discrete, model.lm, model.vocab)
        out.append(SelectorExample(enc.continuous, eos, patch_labels(s.mask, p, s.image).labels))
    return out


def _bce_over(examples, model) -> float:
    x = np.concatenate([selector_inputs(e.seq, e.eos, model.projector) for e in examples], axis=0)
    y = np.concatenate([np.asarray(e.labels, dtype=np.float64) for e in examples])
    logits, _ = model.selector.forward(x)
    return bce_with_logits(logits, y)[0]


def run_stage1(data: ToyData, model: HybridModel, cfg: StageConfig | None = None) -> Checkpoint:
    """Patch-selector training on mask-derived labels; everything else frozen."""
    cfg = cfg or DEFAULT_STAGES[1]
    trainable, before = _begin(model, cfg)
    examples = selector_examples(model, data.selector_samples)
    initial = _bce_over(examples, model)
    _, trace = train_selector(examples, model.selector, model.projector,
                              SelectorTrainConfig(cfg.steps, cfg.lr, cfg.batch, cfg.weight_decay, cfg.seed))
    final = _bce_over(examples, model)
    extra = {"train_accuracy": selector_accuracy(examples, model.selector, model.projector)}
    if data.heldout_samples:
        held = selector_examples(model, data.heldout_samples)
        extra["heldout_accuracy"] = selector_accuracy(held, model.selector, model.projector)
    report = StageReport(1, trace, initial, final, trainable, before, {}, extra)
    return _finish(model, cfg, report)


def pair_sequences(model: HybridModel, pairs: list[PairExample], ids: TextIds) -> list[HybridSequence]:
    """Both directions per pair: text -> image tokens and image tokens -> text.

    Only the generated side (after the separator) and the closing EOS are targets.
    """
    out = []
    for ex in pairs:
        disc = model.tokenizer(model.encoder(ex.sample.image))
        vis = (np.asarray(disc.indices) + model.vocab.n_text).tolist()
        for marker, first, second in ((ids.t2i, ex.text, vis), (ids.i2t, vis, ex.text)):
            seq_ids = [marker, *first, ids.sep, *second, ids.eos]
            mask = np.zeros(len(seq_ids), dtype=bool)
            mask[len(first) + 2 :] = True
            seq = HybridSequence.from_ids(seq_ids, model.table, target_mask=mask)
            if CONT in seq.tags:
                raise InvariantError("stage 2 sequence contains continuous tokens")
            out.append((seq_ids, mask))
    return out


def run_stage2(data: ToyData, model: HybridModel, cfg: StageConfig | None = None) -> Checkpoint:
    """Embedding-table training on discrete-only sequences (no continuous tokens)."""
    cfg = cfg or DEFAULT_STAGES[2]
    trainable, before = _begin(model, cfg)
    if not data.pairs:
        raise DataError("stage 2 corpus is empty")
    examples = pair_sequences(model, data.pairs, data.ids)

    def build(ex):
        # re-embed every time: the table is what is being trained
        return HybridSequence.from_ids(ex[0], model.table, target_mask=ex[1])

    trace, initial, final = _train_lm(model, cfg, examples, build)
    return _finish(model, cfg, StageReport(2, trace, initial, final, trainable, before, {}))


class _ImageCache:
    """Per-image continuous features and discrete tokens (encoder and codebook never change)."""

    def __init__(self, model: HybridModel):
        self.model = model
        self._enc = {}

    def __call__(self, sample: SynthSample):
        key = sample.sample_id
        if key not in self._enc:
            self._enc[key] = self.model.encode(sample.image, select=False)
        return self._enc[key]


def _reduced(model: HybridModel, enc, eos):
    scores = score_patches(enc.continuous, eos, model.selector, model.projector)
    return select_top_m(enc.continuous, scores, model.config.alpha)


def caption_sequence(model: HybridModel, ex: CaptionExample, ids: TextIds, cache, eos=None) -> HybridSequence:
    enc = cache(ex.sample)
    eos = eos if eos is not None else eos_summary(enc.discrete, model.lm, model.vocab)
    block = model.image_block(_with_reduced(enc, _reduced(model, enc, eos)), discrete=False)
    seq = HybridSequence.concat([block, text_block([ids.caption], model.table, targets=False),
                                 text_block([*ex.caption, ids.eos], model.table)])
    if DISC in seq.tags:
        raise InvariantError("stage 3 sequence contains discrete visual tokens")
    return seq


def _with_reduced(enc, reduced):
    return EncodedImage(enc.continuous, enc.discrete, None, None, reduced)


def run_stage3(data: ToyData, model: HybridModel, cfg: StageConfig | None = None) -> Checkpoint:
    """Projector training on captions conditioned only on reduced continuous tokens."""
    cfg = cfg or DEFAULT_STAGES[3]
    trainable, before = _begin(model, cfg)
    cache = _ImageCache(model)
    # the LM and table are frozen here, so the EOS summaries are fixed for the stage
    eos = {ex.sample.sample_id: eos_summary(cache(ex.sample).discrete, model.lm, model.vocab) for ex in data.captions}
    trace, initial, final = _train_lm(
        model, cfg, data.captions, lambda ex: caption_sequence(model, ex, data.ids, cache, eos[ex.sample.sample_id])
    )
    return _finish(model, cfg, StageReport(3, trace, initial, final, trainable, before, {}))


def instruction_sequence(model: HybridModel, ex: InstructionExample, ids: TextIds, cache,
                         continuous: bool = True, discrete: bool = True, with_response: bool = True) -> HybridSequence:
    """Images first, then question, then (optionally) the response, which carries the targets."""
    blocks = []
    for s in ex.samples:
        enc = cache(s)
        eos = eos_summary(enc.discrete, model.lm, model.vocab)
        blocks.append(model.image_block(_with_reduced(enc, _reduced(model, enc, eos)), continuous, discrete))
    segments = [list(ex.question)] + ([[*ex.response, ids.eos]] if with_response else [])
    plan = [("image", k) for k in range(len(blocks))] + [("text", j) for j in range(len(segments))]
    inp = MultimodalInput([s.sample_id for s in ex.samples], segments, plan)
    seq = interleave(inp, blocks, model.table)
    mask = np.zeros(len(seq), dtype=bool)
    if with_response:
        mask[len(seq) - len(ex.response) - 1 :] = True
    return seq.with_targets(mask)


def run_stage4(data: ToyData, model: HybridModel, cfg: StageConfig | None = None) -> Checkpoint:
    """Instruction tuning of LM, table and projector on full hybrid multi-image input."""
    cfg = cfg or DEFAULT_STAGES[4]
    trainable, before = _begin(model, cfg)
    cache = _ImageCache(model)
    trace, initial, final = _train_lm(model, cfg, data.instructions,
                                      lambda ex: instruction_sequence(model, ex, data.ids, cache))
    return _finish(model, cfg, StageReport(4, trace, initial, final, trainable, before, {}))


STAGE_RUNNERS = {1: run_stage1, 2: run_stage2, 3: run_stage3, 4: run_stage4}


def run_all(seed: int = 0, configs=None, model_config: ModelConfig | None = None, data: ToyData | None = None,
            ) -> tuple[Checkpoint, list[StageReport]]:
    """Stages 1 -> 4 in order on one model; returns the final checkpoint and per-stage reports.

    ``configs`` is a sequence of ``StageConfig`` (must be stages 1, 2, 3, 4 in
    that order) or a ``{stage: StageConfig}`` mapping.
    """
    model_config = model_config or ModelConfig()
    if configs is None:
        configs = [DEFAULT_STAGES[k] for k in (1, 2, 3, 4)]
    elif isinstance(configs, dict):
        configs = [configs.get(k, DEFAULT_STAGES[k]) for k in (1, 2, 3, 4)]
    order = [c.stage for c in configs]
    if order != [1, 2, 3, 4]:
        raise ConfigError(f"stages must run in order 1, 2, 3, 4; got {order}")
    data = data or make_toy_data(model_config, seed)
    model = build_model(model_config, seed, data)
    reports, ckpt = [], None
    for cfg in configs:
        ckpt = STAGE_RUNNERS[cfg.stage](data, model, cfg)
        reports.append(ckpt.report)
    return ckpt, reports


def attention_report(model: HybridModel, ex: InstructionExample, ids: TextIds, path=None) -> dict:
    """Last-layer text->visual attention mass for hybrid input vs continuous-only input."""
    cache = _ImageCache(model)
    hybrid = instruction_sequence(model, ex, ids, cache)
    cont_only = instruction_sequence(model, ex, ids, cache, discrete=False)
    att_h, tags_h = attention_export(hybrid, model.lm, -1, path)
    att_c, tags_c = attention_export(cont_only, model.lm, -1)
    return {
        "text_to_discrete": segment_mass(att_h, tags_h, TEXT, DISC),
        "text_to_visual_hybrid": segment_mass(att_h, tags_h, TEXT, CONT + DISC),
        "text_to_visual_continuous_only": segment_mass(att_c, tags_c, TEXT, CONT),
    }
