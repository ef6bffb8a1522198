"""Command-line entry point: data generation, codebook fitting, stage training, encoding, reports, verification.

Exit codes: 0 ok, 2 usage/config, 3 data/precondition, 4 invariant violation.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field, replace


from . import checks
from .assembler import BudgetReport, budget_report
from .continuous_encoder import ImageGrid
from .errors import ConfigError, DataError, HybridEncError, PreconditionError
from .model import HybridModel, ModelConfig, load_checkpoint, save_checkpoint
from .numeric_core import atomic_write_bytes, read_mvt, write_mvt
from .patch_selector import keep_count
from .pipeline import STAGE_RUNNERS, StageConfig, ToyData, make_toy_data
from .pseudo_labels import SynthSample, read_mvm, write_mvm

log = logging.getLogger("hybridenc")

MANIFEST = "manifest.json"


# -----------------------------------------------------------------------------
# Run manifest
# -----------------------------------------------------------------------------


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def tree_files(root) -> list[str]:
    if os.path.isfile(root):
        return [os.fspath(root)]
    out = []
    for d, dirs, files in os.walk(root):
        dirs.sort()
        out += [os.path.join(d, f) for f in sorted(files) if f != MANIFEST]
    return out


def content_hash(paths) -> str:
    """One digest over every file under ``paths``: sha256 of ``relpath\\0filehash\\n`` lines."""
    h = hashlib.sha256()
    for root in paths:
        if root is None or not os.path.exists(root):
            continue
        for f in tree_files(root):
            rel = os.path.relpath(f, root) if os.path.isdir(root) else os.path.basename(f)
            h.update(f"{rel}\0{file_sha256(f)}\n".encode())
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    config: str | None
    seed: int
    input_hash: str
    outputs: dict[str, str] = field(default_factory=dict)
    duration_s: float = 0.0

    def write(self, root) -> str:
        path = os.path.join(root, MANIFEST)
        atomic_write_bytes(path, (json.dumps(asdict(self), indent=1, sort_keys=True) + "\n").encode())
        return path


def finish_manifest(args, out_root, inputs, started, extra_outputs=()) -> RunManifest:
    files = tree_files(out_root) if os.path.isdir(out_root) else []
    files += [f for root in extra_outputs for f in tree_files(root)]
    outputs = {os.path.relpath(f, out_root): file_sha256(f) for f in files}
    man = RunManifest(args.command, getattr(args, "config", None), args.seed, content_hash(inputs), outputs,
                      round(time.perf_counter() - started, 3))
    man.write(out_root)
    return man


# -----------------------------------------------------------------------------
# Dataset directories
# -----------------------------------------------------------------------------


def write_dataset(out, data: ToyData, samples: list[SynthSample]) -> None:
    os.makedirs(out, exist_ok=True)
    lines = []
    for s in samples:
        write_mvt(os.path.join(out, "images", f"{s.sample_id}.mvt"), s.image.data)
        write_mvm(os.path.join(out, "masks", f"{s.sample_id}.mvm"), s.mask)
        lines.append(json.dumps({"id": s.sample_id, "rect": list(s.rect)}))
    _write_lines(os.path.join(out, "samples.jsonl"), lines)
    _write_lines(os.path.join(out, "corpus", "pairs.jsonl"),
                 [json.dumps({"image": p.sample.sample_id, "text": p.text}) for p in data.pairs])
    _write_lines(os.path.join(out, "corpus", "captions.jsonl"),
                 [json.dumps({"image": c.sample.sample_id, "caption": c.caption}) for c in data.captions])
    _write_lines(os.path.join(out, "corpus", "instructions.jsonl"),
                 [json.dumps({"images": [s.sample_id for s in i.samples], "question": i.question,
                              "response": i.response}) for i in data.instructions])


def _write_lines(path, lines) -> None:
    atomic_write_bytes(path, "".join(line + "\n" for line in lines).encode())


def read_samples(root) -> list[SynthSample]:
    index = os.path.join(root, "samples.jsonl")
    if not os.path.exists(index):
        raise PreconditionError(f"{root} is not a dataset directory (no samples.jsonl); run gen-data first")
    out = []
    with open(index) as fh:
        for line in fh:
            rec = json.loads(line)
            img = ImageGrid(read_mvt(os.path.join(root, "images", rec["id"] + ".mvt")), rec["id"])
            mask = read_mvm(os.path.join(root, "masks", rec["id"] + ".mvm"))
            out.append(SynthSample(img, mask, tuple(rec["rect"])))
    return out


def load_data(path, config: ModelConfig, seed: int) -> ToyData:
    """A gen-data directory, or freshly synthesized data when ``path`` is not a directory."""
    if path and os.path.isdir(path):
        samples = read_samples(path)
        if not samples:
            raise DataError(f"dataset {path} is empty")
        held = len(samples) // 3
        config = replace(config, image_size=samples[0].image.width)
        return make_toy_data(config, seed, count=len(samples) - held, heldout=held, samples=samples)
    if path and not str(path).startswith("synth:"):
        raise PreconditionError(f"dataset {path} does not exist")
    return make_toy_data(config, seed)


def read_images(path) -> list[ImageGrid]:
    if os.path.isdir(os.path.join(path, "images")):
        path = os.path.join(path, "images")
    if os.path.isfile(path):
        files = [path]
    elif os.path.isdir(path):
        files = [os.path.join(path, f) for f in sorted(os.listdir(path)) if f.endswith(".mvt")]
    else:
        raise PreconditionError(f"no images at {path}")
    if not files:
        raise DataError(f"no .mvt images under {path}")
    return [ImageGrid(read_mvt(f), os.path.splitext(os.path.basename(f))[0]) for f in files]


def model_config(args, **overrides) -> ModelConfig:
    if getattr(args, "paper_geometry", False):
        cfg = ModelConfig.paper_geometry(**overrides)
    else:
        cfg = ModelConfig(**overrides)
    if args.patch_size is not None:
        cfg.patch_size = args.patch_size
    return cfg


# -----------------------------------------------------------------------------
# Commands
# -----------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    if args.count < 0:
        raise ConfigError("--count must be >= 0")
    started = time.perf_counter()
    cfg = model_config(args, **({"image_size": args.image_size} if args.image_size else {}))
    data = make_toy_data(cfg, args.seed, count=args.count, heldout=0)
    write_dataset(args.out, data, data.selector_samples)
    finish_manifest(args, args.out, [], started)
    print(f"wrote {args.count} samples to {args.out}")
    return 0


def cmd_train_codebook(args) -> int:
    started = time.perf_counter()
    out_ckpt = args.out_ckpt or args.out
    if not out_ckpt:
        raise ConfigError("train-codebook needs --out-ckpt (or --out)")
    images = [s.image for s in load_data(args.data, ModelConfig(), args.seed).selector_samples]
    cfg = model_config(args, n_visual=args.nv, image_size=images[0].width)
    model = HybridModel(cfg, args.seed)
    model.fit_codebook(images, args.iters)
    save_checkpoint(model, out_ckpt)
    finish_manifest(args, out_ckpt, [args.data], started)
    print(f"codebook with {args.nv} codewords written to {out_ckpt}")
    return 0


def cmd_train(args) -> int:
    started = time.perf_counter()
    if args.config:
        if not os.path.exists(args.config):
            raise ConfigError(f"config file {args.config} not found")
        with open(args.config) as fh:
            cfg = StageConfig.from_text(fh.read(), steps=args.steps, seed=args.seed_override)
        if args.stage is not None and args.stage != cfg.stage:
            raise ConfigError(f"--stage {args.stage} disagrees with config stage {cfg.stage}")
    else:
        if args.stage is None:
            raise ConfigError("train needs --stage or --config")
        cfg = StageConfig(args.stage, seed=args.seed, **({"steps": args.steps} if args.steps is not None else {}))
    args.seed = cfg.seed
    stage = cfg.stage
    if stage > 1:
        if not args.in_ckpt or not os.path.exists(os.path.join(args.in_ckpt, "config.json")):
            raise PreconditionError(f"stage {stage} requires a stage {stage - 1} checkpoint (--in-ckpt)")
        model = load_checkpoint(args.in_ckpt)
        if model.completed_stage != stage - 1:
            raise PreconditionError(
                f"stage {stage} requires a stage {stage - 1} checkpoint; {args.in_ckpt} is from stage {model.completed_stage}")
        data = load_data(args.data or cfg.data, model.config, model.seed)
    else:
        if args.in_ckpt:
            model = load_checkpoint(args.in_ckpt)
            if model.completed_stage != 0:
                raise PreconditionError(f"stage 1 starts from a codebook checkpoint; {args.in_ckpt} is from stage "
                                        f"{model.completed_stage}")
            data = load_data(args.data or cfg.data, model.config, model.seed)
        else:
            data = load_data(args.data or cfg.data, model_config(args), cfg.seed)
            model = HybridModel(model_config(args, image_size=data.geometry.width), cfg.seed)
            model.fit_codebook([s.image for s in data.selector_samples], args.codebook_iters)
    ckpt = STAGE_RUNNERS[stage](data, model, cfg)
    save_checkpoint(model, args.out_ckpt)
    report = ckpt.report
    _write_lines(os.path.join(args.out_ckpt, "loss_trace.csv"),
                 ["step,loss"] + [f"{i},{v!r}" for i, v in enumerate(report.trace)])
    summary = {"stage": stage, "initial_loss": report.initial_loss, "final_loss": report.final_loss,
               "trainable": report.trainable, "changed": report.changed(), **report.extra}
    _write_lines(os.path.join(args.out_ckpt, "stage_report.json"), [json.dumps(summary, sort_keys=True)])
    atomic_write_bytes(os.path.join(args.out_ckpt, "stage.cfg"), cfg.to_text().encode())
    inputs = [args.in_ckpt, args.config] + ([args.data] if args.data and os.path.isdir(args.data) else [])
    finish_manifest(args, args.out_ckpt, inputs, started)
    print(f"stage {stage}: loss {report.initial_loss:.4f} -> {report.final_loss:.4f}; checkpoint {args.out_ckpt}")
    return 0


def cmd_encode(args) -> int:
    started = time.perf_counter()
    if args.ckpt:
        model = load_checkpoint(args.ckpt)
    elif args.paper_geometry:
        model = HybridModel(model_config(args), args.seed)
    else:
        raise PreconditionError("encode needs --ckpt (or --paper-geometry for an untrained geometry check)")
    alpha = model.config.alpha if args.alpha is None else args.alpha
    keep_count(model.config.n_c, alpha)
    images = read_images(args.images)
    os.makedirs(args.out, exist_ok=True)
    budget = []
    for img in images:
        if (img.width, img.height) != (model.config.image_size, model.config.image_size):
            raise DataError(f"image {img.image_id} is {img.width}x{img.height}; model expects "
                            f"{model.config.image_size}x{model.config.image_size}")
        enc = model.encode(img, alpha)
        block = model.image_block(enc)
        d = os.path.join(args.out, img.image_id)
        _write_lines(os.path.join(d, "kept_positions.txt"), [str(int(i)) for i in enc.reduced.kept_positions])
        _write_lines(os.path.join(d, "scores.txt"), [repr(float(s)) for s in enc.scores])
        _write_lines(os.path.join(d, "discrete.txt"), [str(int(i)) for i in enc.discrete.indices])
        _write_lines(os.path.join(d, "sequence.txt"), [f"{t} {i}" for t, i in zip(block.tags, block.ids)])
        write_mvt(os.path.join(d, "embeds.mvt"), block.embeds)
        rep = BudgetReport(alpha, model.config.n_c, len(enc.reduced), model.config.n_d)
        budget.append(rep.json_line())
        print(rep.json_line())
    _write_lines(os.path.join(args.out, "budget.jsonl"), budget)
    finish_manifest(args, args.out, [args.images, args.ckpt], started)
    return 0


def _parse_alphas(text) -> list[float]:
    try:
        return [float(a) for a in text.split(",") if a.strip()]
    except ValueError:
        raise ConfigError(f"--alphas must be comma-separated numbers, got {text!r}") from None


def cmd_report(args) -> int:
    started = time.perf_counter()
    base = ModelConfig.paper_geometry() if args.nc is None and args.nd is None and not args.desk else ModelConfig()
    if args.patch_size is not None:
        base.patch_size = args.patch_size
    n_c = base.n_c if args.nc is None else args.nc
    n_d = base.n_d if args.nd is None else args.nd
    lines = [r.json_line() for r in budget_report(n_c, n_d, _parse_alphas(args.alphas), args.images, args.text)]
    for line in lines:
        print(line)
    if args.out:
        _write_lines(os.path.join(args.out, "budget.jsonl"), lines)
        finish_manifest(args, args.out, [], started)
    return 0


def cmd_verify(args) -> int:
    started = time.perf_counter()
    kw = {"steps": args.steps} if args.suite in ("freeze", "all") else {}
    results = checks.run_suite(args.suite, args.seed, **kw)
    for r in results:
        print(r.line())
    summary = {"suite": args.suite, "passed": all(r.passed for r in results),
               "results": [r.as_dict() for r in results]}
    if args.out:
        _write_lines(os.path.join(args.out, "verify.json"), [json.dumps(summary, sort_keys=True, default=float)])
        finish_manifest(args, args.out, [], started)
    print(json.dumps({"suite": args.suite, "passed": summary["passed"],
                      "failed": [r.name for r in results if not r.passed]}))
    return 0 if summary["passed"] else 4


# -----------------------------------------------------------------------------
# Parser
# -----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="single source of all randomness (default 0)")
    common.add_argument("--patch-size", type=int, default=None, help="patch side in pixels")
    common.add_argument("--paper-geometry", action="store_true", help="336x336 images, 14-pixel patches, 32 discrete")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="hybridenc", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=argparse.ArgumentParser)

    g = sub.add_parser("gen-data", parents=[common], help="synthetic images, masks and toy corpora")
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--image-size", type=int, default=None, help="default 32, or 336 with --paper-geometry")
    g.set_defaults(func=cmd_gen_data)

    c = sub.add_parser("train-codebook", parents=[common], help="fit the discrete codebook (stage-0 checkpoint)")
    c.add_argument("--nv", type=int, default=64)
    c.add_argument("--iters", type=int, default=20)
    c.add_argument("--data", default=None)
    c.add_argument("--out-ckpt", default=None)
    c.add_argument("--out", default=None)
    c.set_defaults(func=cmd_train_codebook)

    def train_args(t):
        t.add_argument("--config", default=None, help="key=value stage config")
        t.add_argument("--in-ckpt", default=None)
        t.add_argument("--out-ckpt", required=True)
        t.add_argument("--data", default=None, help="gen-data directory (default: synthesize)")
        t.add_argument("--steps", type=int, default=None, help="override configured steps")
        t.add_argument("--codebook-iters", type=int, default=20)
        t.set_defaults(func=cmd_train)

    t = sub.add_parser("train", parents=[common], help="run one training stage")
    t.add_argument("--stage", type=int, choices=[1, 2, 3, 4], default=None)
    train_args(t)
    ts = sub.add_parser("train-stage", parents=[common], help="alias: train-stage N")
    ts.add_argument("stage", type=int, choices=[1, 2, 3, 4])
    train_args(ts)

    e = sub.add_parser("encode", parents=[common], help="hybrid encoding and budget line per image")
    e.add_argument("--images", required=True)
    e.add_argument("--alpha", type=float, default=None)
    e.add_argument("--ckpt", default=None)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_encode)

    r = sub.add_parser("report", parents=[common], help="closed-form token budget per keeping ratio")
    r.add_argument("--alphas", default="0.1,0.25,0.5,0.75,1.0")
    r.add_argument("--nc", type=int, default=None)
    r.add_argument("--nd", type=int, default=None)
    r.add_argument("--desk", action="store_true", help="desk geometry instead of the 336-pixel default")
    r.add_argument("--images", type=int, default=1)
    r.add_argument("--text", type=int, default=0)
    r.add_argument("--out", default=None)
    r.set_defaults(func=cmd_report)

    v = sub.add_parser("verify", parents=[common], help="run an invariant suite")
    v.add_argument("--suite", choices=["grad", "freeze", "oracle", "budget", "all"], required=True)
    v.add_argument("--steps", type=int, default=10, help="steps per stage for the freeze audit")
    v.add_argument("--out", default=None)
    v.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    # a stage config's own seed wins unless --seed is given
    args.seed_override = args.seed
    if args.seed is None:
        args.seed = 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except HybridEncError as exc:
        print(f"hybridenc: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"hybridenc: I/O error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
