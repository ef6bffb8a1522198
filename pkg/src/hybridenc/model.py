"""The assembled hybrid-encoding model, its configuration and checkpoint persistence."""
from __future__ import annotations

import hashlib
import json
import os
import shutil
import tempfile
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .assembler import assemble_image_block
from .continuous_encoder import ContinuousSequence, EncoderConfig, ImageGrid, PatchEncoder
from .discrete_tokenizer import Codebook, DiscreteTokenizer, DiscreteTokens, pool_to_slots, train_codebook
from .errors import ConfigError, DataError, PreconditionError
from .mini_lm import HybridSequence, LmConfig, MiniLM
from .numeric_core import Parameter, encode_mvt, read_mvt, rng_for, tensor_checksum
from .patch_selector import EosSummary, ReducedSequence, SelectorMLP, eos_summary, score_patches, select_top_m
from .vocab_bridge import (
    Projector,
    UnifiedVocab,
    base_text_table,
    expand_embeddings,
    write_vocab_manifest,
)


@dataclass
class ModelConfig:
    image_size: int = 32
    patch_size: int = 8
    z: int = 32
    enc_layers: int = 1
    enc_heads: int = 2
    n_d: int = 4
    n_visual: int = 64
    n_text: int = 64
    z_llm: int = 64
    lm_layers: int = 2
    lm_heads: int = 2
    max_len: int = 512
    alpha: float = 0.25

    @classmethod
    def paper_geometry(cls, **overrides) -> "ModelConfig":
        """336x336 images, 14-pixel patches (576 patches), 32 discrete tokens."""
        base = dict(image_size=336, patch_size=14, n_d=32)
        base.update(overrides)
        return cls(**base)

    @property
    def n_c(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def vocab(self) -> UnifiedVocab:
        return UnifiedVocab(self.n_text, self.n_visual)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class EncodedImage:
    continuous: ContinuousSequence
    discrete: DiscreteTokens
    eos: EosSummary | None
    scores: np.ndarray | None
    reduced: ReducedSequence | None


class HybridModel:
    """Frozen encoder + codebook tokenizer + shared table + projector + selector + causal LM."""

    def __init__(self, config: ModelConfig, seed: int = 0, codebook: Codebook | None = None):
        self.config = config
        self.seed = seed
        self.completed_stage = 0
        self.encoder = PatchEncoder(EncoderConfig(config.patch_size, config.z, config.enc_layers, config.enc_heads), seed)
        if codebook is None:
            # placeholder until fit_codebook; distinct rows keep the Codebook invariants
            codebook = Codebook(rng_for(seed, "codebook.placeholder").normal(size=(config.n_visual, config.z)))
        self.codebook_param = Parameter("tokenizer.codebook", codebook.codewords, trainable=False)
        self.table = expand_embeddings(base_text_table(config.n_text, config.z_llm, seed), config.n_visual, seed)
        self.projector = Projector(config.z, config.z_llm, seed)
        self.selector = SelectorMLP(2 * config.z_llm, config.z_llm, seed)
        self.lm = MiniLM(LmConfig(config.z_llm, config.lm_layers, config.lm_heads, config.max_len, config.vocab.size),
                         self.table, seed)

    # -- parameters -----------------------------------------------------------

    def named_params(self) -> dict[str, Parameter]:
        groups = [self.encoder.params(), [self.codebook_param], self.table.params(), self.projector.params(),
                  self.selector.params(), self.lm.params()]
        out = {}
        for group in groups:
            for p in group:
                if p.name in out:
                    raise ConfigError(f"duplicate parameter name {p.name}")
                out[p.name] = p
        return out

    def checksums(self) -> dict[str, str]:
        return {name: p.checksum() for name, p in self.named_params().items()}

    def zero_grad(self) -> None:
        for p in self.named_params().values():
            p.zero_grad()

    @property
    def vocab(self) -> UnifiedVocab:
        return self.table.vocab

    @property
    def tokenizer(self) -> DiscreteTokenizer:
        return DiscreteTokenizer(Codebook(self.codebook_param.value), self.config.n_d)

    # -- codebook -------------------------------------------------------------

    def slot_samples(self, images) -> np.ndarray:
        return np.concatenate([pool_to_slots(self.encoder(img), self.config.n_d) for img in images], axis=0)

    def fit_codebook(self, images, iterations: int = 20) -> Codebook:
        cb = train_codebook(self.slot_samples(images), self.config.n_visual, iterations, rng_for(self.seed, "codebook"))
        self.codebook_param.value[...] = cb.codewords
        return cb

    # -- encoding -------------------------------------------------------------

    def encode(self, image: ImageGrid, alpha: float | None = None, select: bool = True) -> EncodedImage:
        """Continuous + discrete encodings; with ``select`` also EOS summary, scores and the reduced set."""
        cont = self.encoder(image)
        disc = self.tokenizer(cont)
        if not select:
            return EncodedImage(cont, disc, None, None, None)
        eos = eos_summary(disc, self.lm, self.vocab)
        scores = score_patches(cont, eos, self.selector, self.projector)
        reduced = select_top_m(cont, scores, self.config.alpha if alpha is None else alpha)
        return EncodedImage(cont, disc, eos, scores, reduced)

    def image_block(self, enc: EncodedImage, continuous: bool = True, discrete: bool = True) -> HybridSequence:
        return assemble_image_block(enc.reduced if continuous else None, enc.discrete if discrete else None,
                                    self.table, self.projector)


# -----------------------------------------------------------------------------
# Checkpoints
# -----------------------------------------------------------------------------


@dataclass
class Checkpoint:
    """In-memory snapshot: parameter copies plus float64 checksums."""

    tensors: dict[str, np.ndarray]
    stage: int
    seed: int
    config: ModelConfig
    checksums: dict[str, str] = field(default_factory=dict)
    report: object = None

    @classmethod
    def capture(cls, model: HybridModel) -> "Checkpoint":
        params = model.named_params()
        return cls({n: p.value.copy() for n, p in params.items()}, model.completed_stage, model.seed, model.config,
                   {n: p.checksum() for n, p in params.items()})

    def verify(self) -> bool:
        return all(tensor_checksum(v) == self.checksums[n] for n, v in self.tensors.items())

    def manifest(self) -> str:
        return "".join(f"{n} {self.checksums[n]}\n" for n in sorted(self.checksums))

    def restore(self) -> HybridModel:
        model = HybridModel(self.config, self.seed)
        for name, p in model.named_params().items():
            if name not in self.tensors:
                raise DataError(f"checkpoint lacks parameter {name}")
            p.value[...] = self.tensors[name]
        model.completed_stage = self.stage
        return model


def param_path(root, name: str) -> str:
    return os.path.join(root, *name.split(".")) + ".mvt"


def save_checkpoint(model: HybridModel, root) -> dict[str, str]:
    """Write one MVT1 file per parameter (dots become directories) plus manifests.

    ``manifest.txt`` lists ``name sha256`` of each tensor file. The directory
    is assembled in a temporary sibling and renamed into place.
    """
    root = os.fspath(root)
    parent = os.path.dirname(os.path.abspath(root))
    os.makedirs(parent, exist_ok=True)
    tmp = tempfile.mkdtemp(dir=parent, prefix=".ckpt-")
    try:
        digests = {}
        for name, p in model.named_params().items():
            data = encode_mvt(p.value)
            path = param_path(tmp, name)
            os.makedirs(os.path.dirname(path), exist_ok=True)
            with open(path, "wb") as fh:
                fh.write(data)
            digests[name] = hashlib.sha256(data).hexdigest()
        with open(os.path.join(tmp, "manifest.txt"), "w") as fh:
            fh.writelines(f"{n} {digests[n]}\n" for n in sorted(digests))
        with open(os.path.join(tmp, "config.json"), "w") as fh:
            json.dump({"model": asdict(model.config), "stage": model.completed_stage, "seed": model.seed}, fh,
                      indent=1, sort_keys=True)
        write_vocab_manifest(os.path.join(tmp, "vocab.txt"), model.vocab)
        if os.path.exists(root):
            shutil.rmtree(root)
        os.replace(tmp, root)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return digests


def load_checkpoint(root) -> HybridModel:
    root = os.fspath(root)
    cfg_path = os.path.join(root, "config.json")
    if not os.path.exists(cfg_path):
        raise PreconditionError(f"no checkpoint at {root}")
    with open(cfg_path) as fh:
        meta = json.load(fh)
    model = HybridModel(ModelConfig.from_dict(meta["model"]), int(meta["seed"]))
    expected = {}
    with open(os.path.join(root, "manifest.txt")) as fh:
        for line in fh:
            name, digest = line.split()
            expected[name] = digest
    for name, p in model.named_params().items():
        path = param_path(root, name)
        with open(path, "rb") as fh:
            data = fh.read()
        if hashlib.sha256(data).hexdigest() != expected.get(name):
            raise DataError(f"{path}: checksum does not match manifest")
        p.value[...] = read_mvt(path)
    model.completed_stage = int(meta["stage"])
    return model
