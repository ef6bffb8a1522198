import numpy as np
import pytest
from hypothesis import given, strategies as st

from hybridenc.errors import ShapeError
from hybridenc.numeric_core import finite_diff_check
from hybridenc.vocab_bridge import (
    Projector,
    UnifiedVocab,
    base_text_table,
    embed,
    expand_embeddings,
    project_continuous,
    read_vocab_manifest,
    to_unified,
    write_vocab_manifest,
)


def test_offset_examples():
    assert to_unified(5, UnifiedVocab(100, 16)) == 105
    v = UnifiedVocab(100, 16)
    assert to_unified(15, v) == 115 == v.size - 1
    with pytest.raises(IndexError):
        to_unified(16, v)
    with pytest.raises(IndexError):
        to_unified(-1, v)


@given(st.integers(1, 10_000), st.integers(1, 2_000))
def test_offset_bijection(n, nv):
    v = UnifiedVocab(n, nv)
    d = np.arange(nv)
    u = to_unified(d, v)
    assert np.array_equal(u - n, d)
    assert set(u.tolist()).isdisjoint(range(n))
    assert u.max() < v.size


def test_expand_preserves_base_and_is_seeded():
    base = base_text_table(10, 4, 0)
    t = expand_embeddings(base, 6, 1)
    assert np.array_equal(t.weight.value[:10], base)
    assert t.weight.value.shape == (16, 4)
    assert np.array_equal(expand_embeddings(base, 6, 1).weight.value, t.weight.value)
    assert np.array_equal(expand_embeddings(base, 0, 1).weight.value, base)
    new = expand_embeddings(base_text_table(10, 64, 0), 400, 2).weight.value[10:]
    assert abs(new.std() - 0.02) < 0.001


def test_embed_rows():
    t = expand_embeddings(base_text_table(5, 3, 0), 4, 0)
    assert np.array_equal(embed([0], t)[0], t.weight.value[0])
    rows = t([2, 2])
    assert np.array_equal(rows[0], rows[1])
    u = to_unified(3, t.vocab)
    assert np.array_equal(t([u])[0], t.weight.value[5 + 3])
    with pytest.raises(IndexError):
        t([9])


def test_embedding_backward_accumulates_repeats():
    t = expand_embeddings(base_text_table(4, 2, 0), 2, 0)
    t.backward([1, 1, 3], np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]))
    assert t.weight.grad[1].tolist() == [4.0, 6.0]
    assert t.weight.grad[3].tolist() == [5.0, 6.0]


def test_projector_zero_weights():
    proj = Projector(4, 6, 0)
    for p in proj.params():
        p.value[...] = 0.0
    assert np.all(project_continuous(np.ones((3, 4)), proj) == 0.0)


@given(st.integers(1, 12))
def test_projector_shape(k):
    proj = Projector(4, 6, 0)
    assert project_continuous(np.ones((k, 4)), proj).shape == (k, 6)


def test_projector_shape_error():
    with pytest.raises(ShapeError):
        project_continuous(np.ones((2, 3)), Projector(4, 6, 0))


def test_projector_row_permutation():
    proj = Projector(4, 6, 0)
    x = np.random.default_rng(0).normal(size=(5, 4))
    perm = [4, 2, 0, 1, 3]
    assert np.array_equal(project_continuous(x[perm], proj), project_continuous(x, proj)[perm])


def test_projector_gradient_matches_fd():
    proj = Projector(4, 6, 0)
    rng = np.random.default_rng(1)
    x, w = rng.normal(size=(3, 4)), rng.normal(size=(3, 6))

    def f():
        y, _ = proj.forward(x)
        return float(np.sum(y * w))

    y, cache = proj.forward(x)
    proj.backward(w, cache)
    for p in proj.params():
        assert finite_diff_check(f, p) <= 1e-6, p.name


def test_vocab_manifest_roundtrip(tmp_path):
    path = tmp_path / "vocab.txt"
    write_vocab_manifest(path, UnifiedVocab(64, 32))
    text = path.read_text()
    assert text.startswith("N=64\nNV=32\n")
    assert read_vocab_manifest(path) == UnifiedVocab(64, 32)
