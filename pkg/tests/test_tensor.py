import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nexusseg.errors import ParameterError, ShapeError, VersionError
from nexusseg.tensor import (
    child_rngs,
    coord_of,
    elementwise,
    flat_index,
    gaussian_fill,
    new_rng,
    read_tensor,
    tensor_from_bytes,
    tensor_new,
    tensor_to_bytes,
    write_tensor,
)


def test_tensor_new_fills():
    assert np.array_equal(tensor_new([2, 2], 0), np.zeros((2, 2)))
    assert tensor_new([1], 0.2)[0] == 0.2
    assert tensor_new([3], 1).sum() == 3
    assert tensor_new([2, 3]).dtype == np.float64


@pytest.mark.parametrize("shape", [[0], [2, -1], []])
def test_tensor_new_rejects_bad_extents(shape):
    with pytest.raises(ShapeError):
        tensor_new(shape)


def test_gaussian_fill_statistics():
    a = gaussian_fill([10**6], new_rng(1), 0.1)
    assert abs(a.mean()) < 1e-3
    b = gaussian_fill([10**6], new_rng(2), 1.0)
    assert abs(b.std() - 1) < 0.005


def test_gaussian_fill_deterministic_and_validated():
    assert np.array_equal(gaussian_fill([5, 5], new_rng(7), 1.0), gaussian_fill([5, 5], new_rng(7), 1.0))
    assert gaussian_fill(np.zeros((2, 3)), new_rng(0), 1.0).shape == (2, 3)
    for std in (0, -1):
        with pytest.raises(ParameterError):
            gaussian_fill([3], new_rng(0), std)


def test_child_streams_differ_and_repeat():
    a1, b1 = child_rngs(new_rng(3), 2)
    a2, _ = child_rngs(new_rng(3), 2)
    x = a1.random(4)
    assert np.array_equal(x, a2.random(4))
    assert not np.array_equal(x, b1.random(4))


def test_elementwise_examples():
    assert elementwise([1, 5], [3, 2], "max").tolist() == [3, 5]
    assert elementwise([2, 3], [0, 1], "mul").tolist() == [0, 3]
    assert elementwise([1, 1], [2, 2], "add").tolist() == [3, 3]
    assert elementwise([1, 1], [2, 2], "sub").tolist() == [-1, -1]
    with pytest.raises(ShapeError):
        elementwise([1, 2], [1, 2, 3], "add")
    with pytest.raises(ParameterError):
        elementwise([1], [1], "pow")


@given(st.lists(st.integers(1, 5), min_size=1, max_size=4), st.data())
@settings(max_examples=60, deadline=None)
def test_flat_index_round_trip(shape, data):
    coord = tuple(data.draw(st.integers(0, s - 1)) for s in shape)
    idx = flat_index(coord, shape)
    assert idx == np.ravel_multi_index(coord, shape)
    assert coord_of(idx, shape) == coord


@given(st.sampled_from(["add", "sub", "mul", "max"]), st.integers(0, 1000))
@settings(max_examples=30, deadline=None)
def test_elementwise_commutes_with_reshape(op, seed):
    rng = new_rng(seed)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    flat = elementwise(a.ravel(), b.ravel(), op)
    assert np.array_equal(elementwise(a, b, op).ravel(), flat)


def test_serialization_layout_and_round_trip():
    t = np.arange(6, dtype=np.float64).reshape(2, 3)
    blob = tensor_to_bytes(t)
    assert blob[:4] == b"NXT1"
    assert int.from_bytes(blob[4:8], "little") == 2
    assert int.from_bytes(blob[8:16], "little") == 2 and int.from_bytes(blob[16:24], "little") == 3
    assert np.frombuffer(blob[24:], "<f8").tolist() == list(range(6))
    assert np.array_equal(tensor_from_bytes(blob), t)


def test_stream_of_tensors_and_errors():
    buf = io.BytesIO()
    a, b = np.ones(3), np.full((2, 2, 2), -1.5)
    write_tensor(buf, a)
    write_tensor(buf, b)
    buf.seek(0)
    assert np.array_equal(read_tensor(buf), a)
    assert np.array_equal(read_tensor(buf), b)
    assert read_tensor(buf) is None
    with pytest.raises(VersionError):
        tensor_from_bytes(b"XXXX" + bytes(8))
    with pytest.raises(VersionError):
        tensor_from_bytes(tensor_to_bytes(a)[:-3])
