"""Export last-layer attention after stage 4 and measure where text tokens look."""
import tempfile

import numpy as np

from hybridenc.model import ModelConfig
from hybridenc.numeric_core import read_mvt
from hybridenc.pipeline import StageConfig, attention_report, build_model, make_toy_data, run_stage1, run_stage2, \
    run_stage3, run_stage4

cfg = ModelConfig()
data = make_toy_data(cfg, 0, count=16, n_pairs=4, n_instructions=4, heldout=8)
model = build_model(cfg, 0, data)
run_stage1(data, model, StageConfig(1, steps=20, batch=4))
run_stage2(data, model, StageConfig(2, steps=60, lr=1e-2))
run_stage3(data, model, StageConfig(3, steps=30, batch=4))
run_stage4(data, model, StageConfig(4, steps=30, batch=4))

with tempfile.TemporaryDirectory() as tmp:
    rep = attention_report(model, data.instructions[0], data.ids, tmp + "/att.mvt")
    att = read_mvt(tmp + "/att.mvt")
    tags = open(tmp + "/att.mvt.tags").read().split()
print("attention matrix", att.shape, "tags", "".join(tags))
print("rows sum to one:", bool(np.allclose(att.sum(axis=1), 1.0)))
for key, value in rep.items():
    print(f"{key:32s} {value:.3f}")
