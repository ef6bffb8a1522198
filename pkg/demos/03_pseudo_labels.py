"""Segmentation mask -> per-patch relevance labels (a patch counts if any pixel overlaps)."""
from hybridenc.pseudo_labels import patch_labels, synth_masks

sample = synth_masks(1, seed=4)[0]
top, left, h, w = sample.rect
print(f"rectangle at row {top}, col {left}, size {h}x{w} in a 32x32 image")
for p in (4, 8, 16):
    labels = patch_labels(sample.mask, p).labels
    side = 32 // p
    print(f"patch size {p}: {int(labels.sum())} of {labels.size} patches relevant")
    for r in range(side):
        print("   ", "".join("#" if labels[r * side + c] else "." for c in range(side)))
