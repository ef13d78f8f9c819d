import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mrirestore.imgcore import (
    HEADER,
    ImageFormatError,
    InvalidImageError,
    PhantomSpec,
    make_phantom,
    make_subject,
    normalize_unit,
    read_image,
    read_pgm,
    write_image,
    write_pgm,
)
from mrirestore.objectives import grad_map

finite = st.floats(-1e6, 1e6, allow_nan=False, width=64)


def test_normalize_constant_is_zero():
    out = normalize_unit(np.full((4, 5), 7.0))
    assert out.shape == (4, 5)
    assert np.all(out == 0)


def test_normalize_two_values():
    np.testing.assert_array_equal(normalize_unit(np.array([[0.0, 2.0]])), [[0.0, 1.0]])


def test_normalize_three_values():
    out = normalize_unit(np.array([[0.25, 0.5, 1.0]]))
    np.testing.assert_allclose(out, [[0.0, 1 / 3, 1.0]], rtol=0, atol=1e-15)


def test_normalize_rejects_nonfinite():
    with pytest.raises(InvalidImageError):
        normalize_unit(np.array([[0.0, np.nan]]))


@settings(max_examples=50)
@given(arrays(np.float64, (6, 7), elements=finite))
def test_normalize_idempotent_and_in_range(x):
    y = normalize_unit(x)
    assert y.min() >= 0 and y.max() <= 1
    if x.max() > x.min():
        np.testing.assert_array_equal(normalize_unit(y), y)


def test_phantom_deterministic_and_in_range():
    spec = PhantomSpec(seed=3, size=96)
    a, b = make_phantom(spec), make_phantom(spec)
    assert a.shape == (96, 96)
    np.testing.assert_array_equal(a, b)
    assert a.min() >= 0 and a.max() <= 1


def test_phantom_differs_by_seed():
    assert not np.array_equal(make_phantom(PhantomSpec(1, 32)), make_phantom(PhantomSpec(2, 32)))


def test_phantom_without_texture_has_edge_concentrated_gradients():
    img = make_phantom(PhantomSpec(seed=5, size=128, texture_amplitude=0.0))
    g = grad_map(img).numpy()[0, 0]
    strong = g > 0.1
    # boundaries are a thin set of pixels but carry most of the gradient energy
    assert strong.mean() < 0.2
    assert (g[strong] ** 2).sum() > 0.8 * (g ** 2).sum()


def test_phantom_spec_validation():
    with pytest.raises(ValueError):
        PhantomSpec(seed=0, size=8)


def test_subject_stack():
    vol = make_subject(0, 2, n_slices=3, size=32)
    assert vol.shape == (3, 32, 32)
    assert not np.array_equal(vol[0], vol[1])
    np.testing.assert_array_equal(vol, make_subject(0, 2, n_slices=3, size=32))


@pytest.mark.parametrize("dtype", ["float32", "float64"])
def test_raw_roundtrip(tmp_path, dtype):
    rng = np.random.default_rng(0)
    x = rng.random((5, 9)).astype(dtype)
    write_image(x, tmp_path / "a.mrir", dtype=dtype)
    y = read_image(tmp_path / "a.mrir")
    assert y.dtype == np.dtype(dtype)
    np.testing.assert_array_equal(x, y)


def test_raw_file_size(tmp_path):
    x = np.array([[0, 1 / 3], [2 / 3, 1]])
    write_image(x, tmp_path / "a.mrir")
    raw = (tmp_path / "a.mrir").read_bytes()
    # magic(4) + width(4) + height(4) + dtype tag(1), then 4 float32 values
    assert HEADER.size == 13
    assert len(raw) == 13 + 16
    assert raw[:4] == bytes.fromhex("4D524952")
    assert raw[4:8] == (2).to_bytes(4, "little") and raw[12] == 0


def test_raw_header_fields_are_width_then_height(tmp_path):
    write_image(np.zeros((3, 5)), tmp_path / "a.mrir")
    raw = (tmp_path / "a.mrir").read_bytes()
    assert int.from_bytes(raw[4:8], "little") == 5
    assert int.from_bytes(raw[8:12], "little") == 3


def test_raw_bad_magic(tmp_path):
    write_image(np.zeros((2, 2)), tmp_path / "a.mrir")
    p = tmp_path / "a.mrir"
    p.write_bytes(b"XXXX" + p.read_bytes()[4:])
    with pytest.raises(ImageFormatError) as e:
        read_image(p)
    assert e.value.offset == 0


def test_raw_truncated(tmp_path):
    write_image(np.zeros((4, 4)), tmp_path / "a.mrir")
    p = tmp_path / "a.mrir"
    p.write_bytes(p.read_bytes()[:-3])
    with pytest.raises(ImageFormatError, match="truncated"):
        read_image(p)


def test_pgm_export(tmp_path):
    x = np.array([[0.0, 0.5], [1.0, 1.7]])
    write_pgm(x, tmp_path / "a.pgm")
    raw = (tmp_path / "a.pgm").read_bytes()
    assert raw.startswith(b"P5\n2 2\n65535\n")
    y = read_pgm(tmp_path / "a.pgm")
    np.testing.assert_allclose(y, [[0, 32768 / 65535], [1, 1]])
