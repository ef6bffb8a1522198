"""One synthetic image through both encoders and into the shared vocabulary."""
import numpy as np

from hybridenc.continuous_encoder import EncoderConfig, PatchEncoder
from hybridenc.discrete_tokenizer import DiscreteTokenizer, pool_to_slots, train_codebook
from hybridenc.numeric_core import rng_for
from hybridenc.pseudo_labels import synth_masks
from hybridenc.vocab_bridge import UnifiedVocab, base_text_table, expand_embeddings

samples = synth_masks(64, seed=0)
encoder = PatchEncoder(EncoderConfig(patch_size=8, z=32, layers=1, heads=2), seed=0)

cont = encoder(samples[0].image)
print("continuous features:", cont.tokens.shape, "(one row per 8x8 patch)")

# fit a 64-entry codebook on pooled slots from every image
slots = np.concatenate([pool_to_slots(encoder(s.image), 4) for s in samples])
codebook = train_codebook(slots, 64, 20, rng_for(0, "demo.codebook"))
tokens = DiscreteTokenizer(codebook, n_d=4)(cont)
print("discrete codebook indices:", tokens.indices.tolist())

vocab = UnifiedVocab(n_text=64, n_visual=64)
unified = vocab.to_unified(tokens.indices)
print("unified ids (text ids are < 64):", unified.tolist())
assert np.array_equal(vocab.from_unified(unified), tokens.indices)

table = expand_embeddings(base_text_table(64, 16, seed=0), 64, seed=0)
print("embedding table rows:", table.weight.value.shape[0], "- visual rows start at", vocab.n_text)
