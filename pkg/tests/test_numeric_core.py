import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from hybridenc.errors import DataError, ShapeError
from hybridenc.numeric_core import (
    AdamW,
    Parameter,
    adamw_step,
    bce_with_logits,
    cross_entropy_logits,
    decode_mvt,
    encode_mvt,
    finite_diff_check,
    matmul,
    read_mvt,
    rng_for,
    sigmoid,
    softmax,
    write_mvt,
)


def triple_loop(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            s = 0.0
            for k in range(a.shape[1]):
                s += a[i, k] * b[k, j]
            out[i, j] = s
    return out


# -- matmul -------------------------------------------------------------------


def test_matmul_identity():
    assert matmul(np.eye(2), [[1, 2], [3, 4]]).tolist() == [[1, 2], [3, 4]]


def test_matmul_orthogonal_rows():
    assert matmul([[1, 0]], [[0], [1]]).tolist() == [[0]]


def test_matmul_random_3x4_4x2_exact():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    assert np.array_equal(matmul(a, b), triple_loop(a, b))


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_batched_leading_axes():
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 4, 5))
    out = matmul(a, b)
    for i in range(2):
        assert np.array_equal(out[i], triple_loop(a[i], b[i]))


dims = st.integers(1, 8)


@given(dims, dims, dims, st.integers(0, 2**32 - 1))
def test_matmul_matches_triple_loop(m, k, n, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(m, k)), rng.normal(size=(k, n))
    assert np.array_equal(matmul(a, b), triple_loop(a, b))


# -- sigmoid / losses ---------------------------------------------------------


def test_sigmoid_examples():
    assert sigmoid(0.0) == 0.5
    v = sigmoid(50.0)
    assert 1 - 1e-15 < v < 1
    assert sigmoid(math.log(3)) == pytest.approx(0.75, abs=1e-15)


def test_sigmoid_stays_in_open_interval():
    v = sigmoid(np.array([-1000.0, 1000.0, 40.0, -40.0]))
    assert np.all(v > 0) and np.all(v < 1)


@given(st.floats(-30, 30))
def test_sigmoid_symmetry(x):
    assert abs(sigmoid(x) + sigmoid(-x) - 1.0) <= 1e-15


def test_bce_examples():
    assert bce_with_logits([0.0], [1.0])[0] == pytest.approx(math.log(2), abs=1e-15)
    assert bce_with_logits([0.0], [0.0])[0] == pytest.approx(math.log(2), abs=1e-15)
    loss, grad = bce_with_logits([2.0, -2.0], [1.0, 0.0])
    assert loss == pytest.approx(math.log1p(math.exp(-2)), abs=1e-15)
    assert round(loss, 4) == 0.1269
    assert grad == pytest.approx([(sigmoid(2.0) - 1) / 2, sigmoid(-2.0) / 2])


def test_bce_errors():
    with pytest.raises(ShapeError):
        bce_with_logits([0.0, 1.0], [1.0])
    with pytest.raises(DataError):
        bce_with_logits([0.0], [0.5])


def test_bce_extreme_logits_finite():
    loss, grad = bce_with_logits([800.0, -800.0], [0.0, 1.0])
    assert loss == pytest.approx(800.0)
    assert np.all(np.isfinite(grad))


def test_cross_entropy_examples():
    assert cross_entropy_logits(np.zeros((1, 8)), [3])[0] == pytest.approx(math.log(8), abs=1e-15)
    logits = np.zeros((1, 5))
    logits[0, 2] = 50.0
    assert cross_entropy_logits(logits, [2])[0] < 1e-15
    loss, grad = cross_entropy_logits([[1.0, 2.0, 3.0]], [2])
    e = np.exp([1.0, 2.0, 3.0])
    assert loss == pytest.approx(-math.log(e[2] / e.sum()), abs=1e-15)
    assert round(loss, 4) == 0.4076
    assert grad[0] == pytest.approx(e / e.sum() - np.array([0, 0, 1]))


def test_cross_entropy_target_out_of_range():
    with pytest.raises(IndexError):
        cross_entropy_logits(np.zeros((1, 3)), [3])


@given(hnp.arrays(np.float64, (3, 6), elements=st.floats(-20, 20)))
def test_softmax_rows_sum_to_one(x):
    assert np.allclose(softmax(x).sum(axis=-1), 1.0, atol=1e-12)


# -- AdamW ----------------------------------------------------------------------


def test_adamw_frozen_param_bit_identical():
    p = Parameter("frozen", np.array([1.5, -2.0]), trainable=False)
    p.grad[...] = [3.0, 4.0]
    before = p.value.copy()
    opt = AdamW([p], lr=0.1, weight_decay=0.1)
    opt.step()
    assert np.array_equal(p.value, before)
    assert "frozen" not in opt.state


def test_adamw_first_step_moves_by_lr():
    p = Parameter("x", np.array([1.0]))
    p.grad[...] = 1.0
    AdamW([p], lr=0.1, weight_decay=0.0).step()
    # bias-corrected first step is lr * g / (|g| + eps)
    assert p.value[0] == pytest.approx(1.0 - 0.1 / (1 + 1e-8), abs=1e-15)


def test_adamw_decoupled_decay_exact():
    p = Parameter("x", np.array([2.0, -4.0]))
    lr, wd = 0.1, 0.5
    expected = p.value - lr * wd * p.value
    adamw_step([p], lr=lr, betas=(0.9, 0.999), weight_decay=wd, step_count=1)
    assert np.array_equal(p.value, expected)


@given(hnp.arrays(np.float64, 4, elements=st.floats(-1e3, 1e3)), st.floats(1e-4, 1.0), st.floats(0, 1))
def test_adamw_never_touches_frozen(grad, lr, wd):
    p = Parameter("x", np.arange(4.0), trainable=False)
    p.grad[...] = grad
    q = Parameter("y", np.arange(4.0))
    q.grad[...] = grad
    AdamW([p, q], lr=lr, weight_decay=wd).step()
    assert np.array_equal(p.value, np.arange(4.0))


# -- finite differences ---------------------------------------------------------


def test_fd_quadratic():
    p = Parameter("x", np.array([3.0]))
    p.grad[...] = 6.0
    err = finite_diff_check(lambda: float(p.value[0] ** 2), p, 1e-5)
    assert err < 1e-9


def test_fd_constant_function():
    p = Parameter("x", np.array([1.0, 2.0]))
    assert finite_diff_check(lambda: 5.0, p) == 0.0


def test_fd_restores_values_exactly():
    p = Parameter("x", np.array([0.1, 0.7, 1e-3]))
    before = p.value.copy()
    finite_diff_check(lambda: float(np.sum(np.sin(p.value))), p)
    assert np.array_equal(p.value, before)


def test_fd_detects_wrong_gradient():
    p = Parameter("x", np.array([2.0]))
    p.grad[...] = 5.0
    assert finite_diff_check(lambda: float(p.value[0] ** 2), p) > 0.1


# -- RNG / checksums -------------------------------------------------------------


def test_rng_named_streams():
    a = rng_for(7, "encoder").normal(size=4)
    b = rng_for(7, "encoder").normal(size=4)
    c = rng_for(7, "selector").normal(size=4)
    d = rng_for(8, "encoder").normal(size=4)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c) and not np.array_equal(a, d)


def test_checksum_tracks_shape_and_value():
    p = Parameter("x", np.zeros((2, 3)))
    q = Parameter("y", np.zeros((3, 2)))
    assert p.checksum() != q.checksum()
    before = p.checksum()
    p.value[0, 0] = 1e-300
    assert p.checksum() != before


# -- MVT1 ----------------------------------------------------------------------


def test_mvt_layout():
    buf = encode_mvt(np.array([[1.0, 2.0, 3.0]]))
    assert buf[:4] == b"MVT1"
    assert int.from_bytes(buf[4:8], "little") == 2
    assert int.from_bytes(buf[8:12], "little") == 1 and int.from_bytes(buf[12:16], "little") == 3
    assert np.frombuffer(buf[16:], "<f4").tolist() == [1.0, 2.0, 3.0]


@given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=1, max_dims=4, max_side=5),
                  elements=st.floats(-1e6, 1e6, width=32)))
def test_mvt_roundtrip_f32_exact(arr):
    out = decode_mvt(encode_mvt(arr.astype(np.float64)))
    assert out.dtype == np.float64 and out.shape == arr.shape
    assert np.array_equal(out, arr.astype(np.float64))


def test_mvt_rejects_nan_and_truncation(tmp_path):
    buf = bytearray(encode_mvt(np.ones(3)))
    buf[-4:] = np.array([np.nan], "<f4").tobytes()
    with pytest.raises(DataError):
        decode_mvt(bytes(buf))
    with pytest.raises(DataError):
        decode_mvt(encode_mvt(np.ones(3))[:-1])
    with pytest.raises(DataError):
        decode_mvt(b"XXXX" + b"\0" * 8)
    with pytest.raises(DataError):
        encode_mvt(np.array([np.inf]))


def test_mvt_file_roundtrip(tmp_path):
    path = tmp_path / "sub" / "t.mvt"
    write_mvt(path, np.arange(6.0).reshape(2, 3))
    assert read_mvt(path).tolist() == [[0, 1, 2], [3, 4, 5]]
    assert [p.name for p in (tmp_path / "sub").iterdir()] == ["t.mvt"]
