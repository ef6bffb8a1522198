import numpy as np
import pytest
from hypothesis import given, strategies as st

from hybridenc.continuous_encoder import ImageGrid
from hybridenc.errors import ConfigError, DataError
from hybridenc.pseudo_labels import (
    MaskRaster,
    SynthGeometry,
    decode_mvm,
    encode_mvm,
    patch_labels,
    read_mvm,
    synth_masks,
    write_mvm,
)


def pixel_scan(mask, p):
    h, w = mask.shape
    out = []
    for r in range(h // p):
        for c in range(w // p):
            out.append(int(any(mask[y, x] for y in range(r * p, r * p + p) for x in range(c * p, c * p + p))))
    return out


def test_simple_masks():
    assert patch_labels(MaskRaster(np.zeros((8, 8))), 4).labels.tolist() == [0, 0, 0, 0]
    assert patch_labels(MaskRaster(np.ones((8, 8))), 4).labels.tolist() == [1, 1, 1, 1]
    m = np.zeros((8, 8))
    m[0, 0] = 1
    assert patch_labels(MaskRaster(m), 4).labels.tolist() == [1, 0, 0, 0]


def test_random_16x16_matches_oracle():
    m = (np.random.default_rng(0).random((16, 16)) < 0.05).astype(np.uint8)
    assert patch_labels(MaskRaster(m), 4).labels.tolist() == pixel_scan(m, 4)


@given(st.sampled_from([2, 4, 8]), st.integers(1, 4), st.integers(1, 4), st.floats(0, 0.3), st.integers(0, 2**31))
def test_matches_oracle(p, rows, cols, density, seed):
    m = (np.random.default_rng(seed).random((rows * p, cols * p)) < density).astype(np.uint8)
    assert patch_labels(MaskRaster(m), p).labels.tolist() == pixel_scan(m, p)


@given(st.integers(0, 2**31), st.integers(0, 255))
def test_monotone_under_added_pixels(seed, pixel):
    m = (np.random.default_rng(seed).random((16, 16)) < 0.05).astype(np.uint8)
    before = patch_labels(MaskRaster(m), 4).labels
    m.reshape(-1)[pixel] = 1
    after = patch_labels(MaskRaster(m), 4).labels
    assert np.all(after >= before)


def test_area_threshold_variant():
    m = np.zeros((4, 8))
    m[:2, :4] = 1  # half of patch 0
    m[0, 4] = 1
    lab = patch_labels(MaskRaster(m), 4, min_fraction=0.5).labels.tolist()
    assert lab == [1, 0]


def test_errors():
    with pytest.raises(DataError):
        patch_labels(MaskRaster(np.zeros((8, 8))), 4, image=ImageGrid(np.zeros((8, 4, 3))))
    with pytest.raises(ConfigError):
        patch_labels(MaskRaster(np.zeros((6, 8))), 4)
    with pytest.raises(DataError):
        MaskRaster(np.full((2, 2), 2))


def test_synth_masks_contract():
    g = SynthGeometry()
    samples = synth_masks(20, g, seed=5)
    again = synth_masks(20, g, seed=5)
    for s, t in zip(samples, again):
        assert np.array_equal(s.image.data, t.image.data) and np.array_equal(s.mask.data, t.mask.data)
    for s in samples:
        top, left, h, w = s.rect
        assert int(s.mask.data.sum()) == h * w
        assert s.mask.data[top : top + h, left : left + w].all()
        inside = s.image.data[s.mask.data == 1].mean()
        outside = s.image.data[s.mask.data == 0].mean()
        assert inside - outside >= g.foreground[0] - g.background[1]
    assert [s.sample_id for s in samples[:2]] == ["img00000", "img00001"]


def test_mvm_roundtrip(tmp_path):
    m = MaskRaster((np.random.default_rng(1).random((5, 7)) < 0.5).astype(np.uint8))
    buf = encode_mvm(m)
    assert buf[:4] == b"MVM1" and int.from_bytes(buf[4:8], "little") == 7 and int.from_bytes(buf[8:12], "little") == 5
    assert np.array_equal(decode_mvm(buf).data, m.data)
    write_mvm(tmp_path / "m.mvm", m)
    assert np.array_equal(read_mvm(tmp_path / "m.mvm").data, m.data)
    with pytest.raises(DataError):
        decode_mvm(buf[:-1])
    with pytest.raises(DataError):
        decode_mvm(b"MVM0" + buf[4:])
