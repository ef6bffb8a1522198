"""How many visual tokens does one image cost at a given keeping ratio?

Prints the closed-form budget for the 336-pixel, 14-pixel-patch geometry
(576 continuous patches, 32 discrete tokens) and for the small desk model.
"""
from hybridenc.assembler import budget_report
from hybridenc.model import ModelConfig

paper = ModelConfig.paper_geometry()
print(f"large geometry: n_c={paper.n_c} n_d={paper.n_d}")
for r in budget_report(paper.n_c, paper.n_d, [0.1, 0.25, 0.5, 1.0]):
    print(f"  alpha={r.alpha:<4} keep m={r.m:<3} visual tokens={r.visual_total:<3} "
          f"attention cost vs full={r.quadratic_ratio:.3f}")

desk = ModelConfig()
print(f"desk geometry: n_c={desk.n_c} n_d={desk.n_d}")
for r in budget_report(desk.n_c, desk.n_d, [0.25], images=3, text=10):
    print("  three images plus ten text tokens:", r.json_line())
