import math

import numpy as np
import pytest

from hybridenc.checks import GRAD_NOISE_FLOOR
from hybridenc.errors import CapacityError, ConfigError, DataError
from hybridenc.mini_lm import (
    HybridSequence,
    LmConfig,
    MiniLM,
    attention_export,
    backprop_inputs,
    forward_hidden,
    generate_greedy,
    lm_loss,
    segment_mass,
)
from hybridenc.numeric_core import AdamW, cross_entropy_logits, finite_diff_errors, read_mvt
from hybridenc.vocab_bridge import Projector, base_text_table, expand_embeddings

N, NV, ZL = 16, 8, 16


def make_lm(seed=0, max_len=32, layers=2):
    table = expand_embeddings(base_text_table(N, ZL, seed), NV, seed)
    return MiniLM(LmConfig(ZL, layers, 2, max_len, N + NV), table, seed)


def hybrid(lm, seed=0):
    proj = Projector(4, ZL, seed)
    feats = np.random.default_rng(seed).normal(size=(3, 4))
    y, _ = proj.forward(feats)
    ids = np.array([-1, -1, -1, N + 2, N + 6, 4, 9, 1])
    seq = HybridSequence(np.concatenate([y, lm.table(ids[3:])]), "CCCDDTTT", ids, cont_feats=feats)
    return seq, proj


def train(lm, seqs, steps, lr=1e-2):
    params = lm.params() + lm.table.params()
    opt = AdamW(params, lr=lr)
    for _ in range(steps):
        opt.zero_grad()
        for s in seqs:
            fresh = HybridSequence.from_ids(s.ids, lm.table, target_mask=s.target_mask)
            _, d = lm.loss(fresh, backward=True)
            backprop_inputs(fresh, d, lm.table, None)
        opt.step()


def test_causal_attention_structure():
    lm = make_lm()
    seq, _ = hybrid(lm)
    _, maps = forward_hidden(seq, lm)
    assert len(maps) == 2
    for m in maps:
        for h in m:
            assert np.all(np.triu(h, 1) == 0.0)
            assert np.all(np.abs(h.sum(axis=1) - 1.0) <= 1e-12)


def test_prefix_truncation_leaves_prefix_hiddens():
    lm = make_lm()
    seq, _ = hybrid(lm)
    full, _ = lm.forward(seq.embeds)
    for k in range(1, len(seq)):
        part, _ = lm.forward(seq.embeds[:k])
        assert np.allclose(part, full[:k], rtol=0, atol=1e-12)


def test_capacity_error():
    lm = make_lm(max_len=4)
    with pytest.raises(CapacityError):
        lm.forward(np.zeros((5, ZL)))
    with pytest.raises(CapacityError):
        generate_greedy([1, 2, 3], lm, 2)


def test_untrained_loss_near_uniform():
    lm = make_lm()
    seq = HybridSequence.from_ids([1, 5, N + 3, N + 1, 7, 2], lm.table)
    assert abs(lm_loss(seq, lm) - math.log(N + NV)) < 0.1 * math.log(N + NV)


def test_single_target_equals_position_ce():
    lm = make_lm()
    ids = [1, 5, N + 3, N + 1, 7, 2]
    mask = np.zeros(6, dtype=bool)
    mask[4] = True
    seq = HybridSequence.from_ids(ids, lm.table, target_mask=mask)
    hidden, _ = lm.forward(seq.embeds)
    ce, _ = cross_entropy_logits(lm.logits(hidden[3:4]), [7])
    assert lm.loss(seq) == pytest.approx(ce, abs=1e-15)


def test_continuous_rows_never_targets():
    lm = make_lm()
    seq, _ = hybrid(lm)
    assert not seq.target_mask[:3].any() and seq.target_mask[3:].all()
    with pytest.raises(DataError):
        lm.loss(HybridSequence.from_ids([3], lm.table))


def test_memorize_one_sequence():
    lm = make_lm()
    seq = HybridSequence.from_ids([N - 3, 4, 9, N + 5, N + 2, N - 1], lm.table)
    train(lm, [seq], 150)
    assert lm.loss(HybridSequence.from_ids(seq.ids, lm.table)) < 0.1


def test_generate_basics():
    lm = make_lm()
    assert generate_greedy([3, 4], lm, 0) == [3, 4]
    assert generate_greedy([3, 4], lm, 5) == generate_greedy([3, 4], lm, 5)
    with pytest.raises(DataError):
        generate_greedy([], lm, 1)


def test_generation_reproduces_paired_tokens():
    lm = make_lm()
    pairs = {(1, 2): [N + 3, N + 7, N + 0], (4, 5): [N + 6, N + 1, N + 1]}
    seqs = []
    for text, vis in pairs.items():
        ids = [N - 3, *text, N - 2, *vis, N - 1]
        mask = np.zeros(len(ids), dtype=bool)
        mask[4:] = True
        seqs.append(HybridSequence.from_ids(ids, lm.table, target_mask=mask))
    train(lm, seqs, 200)
    for text, vis in pairs.items():
        out = generate_greedy([N - 3, *text, N - 2], lm, 3)
        assert out[4:] == vis


def test_attention_export(tmp_path):
    lm = make_lm()
    seq, _ = hybrid(lm)
    path = tmp_path / "att.mvt"
    att, tags = attention_export(seq, lm, -1, path)
    stored = read_mvt(path)
    assert stored.shape == (8, 8)
    assert np.all(np.abs(stored.sum(axis=1) - 1.0) <= 1e-6)
    assert np.all(np.abs(att.sum(axis=1) - 1.0) <= 1e-9)
    side = (tmp_path / "att.mvt.tags").read_text().split()
    assert side == list("CCCDDTTT") and len(tags) == len(seq)
    mass = segment_mass(att, tags, "T", "D")
    assert 0.0 <= mass <= 1.0
    with pytest.raises(ConfigError):
        attention_export(seq, lm, 2)


def test_segment_mass_hand_computed():
    att = np.array([[1.0, 0, 0, 0], [0.5, 0.5, 0, 0], [0.2, 0.3, 0.5, 0], [0.1, 0.1, 0.4, 0.4]])
    assert segment_mass(att, "DDTT", "T", "D") == pytest.approx((0.5 + 0.2) / 2)
    assert segment_mass(att, "TTTT", "T", "D") == 0.0


def test_shared_table_object():
    lm = make_lm()
    seq = HybridSequence.from_ids([1, N + 2, 3], lm.table)
    lm.loss(seq, backward=True)
    # the tied head writes straight into the table's gradient
    assert np.any(lm.table.weight.grad != 0)
    assert all(p is not lm.table.weight for p in lm.params())


def _lm_case(ids, tags, with_proj=False):
    lm = make_lm(max_len=8)
    proj = Projector(4, ZL, 0) if with_proj else None
    feats = np.random.default_rng(0).normal(size=(tags.count("C"), 4)) if with_proj else None
    ids = np.array(ids)

    def build():
        rows = [proj.forward(feats)[0]] if with_proj else []
        rows.append(lm.table(ids[ids >= 0]))
        return HybridSequence(np.concatenate(rows), tags, ids, cont_feats=feats)

    params = lm.params() + lm.table.params() + (proj.params() if with_proj else [])
    for p in params:
        p.zero_grad()
    seq = build()
    _, d = lm.loss(seq, backward=True)
    backprop_inputs(seq, d, lm.table, proj)
    return (lambda: lm.loss(build())), params


def test_lm_gradient_check_four_tokens():
    f, params = _lm_case([3, N + 1, 7, N - 1], "TDTT")
    worst = max(float(finite_diff_errors(f, p)[2].max()) for p in params)
    print(f"4-token LM max relative error {worst:.3e}")
    assert worst <= 1e-6


def test_lm_gradient_above_noise_floor():
    f, params = _lm_case([-1, -1, N + 1, N + 4, 3, 7, 2, N - 1], "CCDDTTTT", with_proj=True)
    for p in params:
        g, _, rel = finite_diff_errors(f, p)
        big = np.abs(g) >= GRAD_NOISE_FLOOR
        if big.any():
            assert rel[big].max() <= 1e-5, p.name
