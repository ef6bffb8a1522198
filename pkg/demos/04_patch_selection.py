"""Train only the patch selector (stage 1) and look at which patches survive reduction."""
from hybridenc.model import ModelConfig
from hybridenc.pipeline import StageConfig, build_model, make_toy_data, run_stage1
from hybridenc.pseudo_labels import patch_labels

cfg = ModelConfig()
data = make_toy_data(cfg, seed=0, count=64, n_pairs=4, n_instructions=4, heldout=32)
model = build_model(cfg, 0, data)
report = run_stage1(data, model, StageConfig(1, steps=150)).report
print(f"selector BCE {report.initial_loss:.3f} -> {report.final_loss:.3f}")
print(f"held-out patch accuracy {report.extra['heldout_accuracy']:.3f}")

sample = data.heldout_samples[0]
enc = model.encode(sample.image, alpha=0.25)
truth = patch_labels(sample.mask, cfg.patch_size).labels
print("scores :", " ".join(f"{s:.2f}" for s in enc.scores))
print("truth  :", "".join(str(int(t)) for t in truth))
print("kept   :", enc.reduced.kept_positions.tolist(), f"({len(enc.reduced)} of {cfg.n_c})")
print("block  :", model.image_block(enc).tags)
