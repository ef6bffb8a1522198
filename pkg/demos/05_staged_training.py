"""All four stages on a tiny corpus, a checkpoint round trip and a greedy answer.

Uses a few images and short schedules so it finishes in well under a minute;
``run_all(seed)`` runs the full default schedule.
"""
import tempfile

from hybridenc.mini_lm import generate_greedy
from hybridenc.model import ModelConfig, load_checkpoint, save_checkpoint
from hybridenc.pipeline import (StageConfig, _ImageCache, build_model, instruction_sequence, make_toy_data,
                                run_stage1, run_stage2, run_stage3, run_stage4)

cfg = ModelConfig()
data = make_toy_data(cfg, 0, count=16, n_pairs=4, n_instructions=4, heldout=8)
model = build_model(cfg, 0, data)
stages = [(run_stage1, StageConfig(1, steps=50, batch=4)), (run_stage2, StageConfig(2, steps=100, lr=1e-2)),
          (run_stage3, StageConfig(3, steps=60, batch=4)), (run_stage4, StageConfig(4, steps=60, batch=4))]
for runner, sc in stages:
    r = runner(data, model, sc).report
    print(f"stage {r.stage} ({sc.loss}): loss {r.initial_loss:.3f} -> {r.final_loss:.3f}, "
          f"{len(r.changed())} tensors changed, {len(r.frozen_violations())} frozen tensors touched")

with tempfile.TemporaryDirectory() as tmp:
    save_checkpoint(model, tmp + "/ckpt")
    print("manifest head:", open(tmp + "/ckpt/manifest.txt").readline().strip())
    model = load_checkpoint(tmp + "/ckpt")

ex = data.instructions[0]
prefix = instruction_sequence(model, ex, data.ids, _ImageCache(model), with_response=False)
answer = generate_greedy(prefix, model.lm, len(ex.response) + 1)
print("prefix tags:", prefix.tags)
print("expected   :", ex.response + [data.ids.eos])
print("generated  :", answer)
