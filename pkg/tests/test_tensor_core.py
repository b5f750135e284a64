import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from latenthead.tensor_core import (ChecksumError, DomainError, GridField, ShapeError, TensorFileError,
                                    decode_tensor, encode_tensor, hash_directory, lat_weights,
                                    load_checkpoint, patchify, read_tensor, regular_grid,
                                    save_checkpoint, unpatchify, validate_mask, write_tensor)


def test_lat_weights_examples():
    np.testing.assert_allclose(lat_weights([0, 0, 0]), [1, 1, 1])
    np.testing.assert_allclose(lat_weights([0, 60]), [4 / 3, 2 / 3], rtol=1e-14)
    np.testing.assert_allclose(lat_weights([-45, 45]), [1, 1], rtol=1e-14)


def test_lat_weights_rejects_out_of_range():
    with pytest.raises(DomainError):
        lat_weights([0, 91])


@given(arrays(np.float64, st.integers(1, 40), elements=st.floats(-89.9, 89.9)))
def test_lat_weights_mean_one_and_sign_symmetric(lats):
    w = lat_weights(lats)
    assert abs(w.mean() - 1) < 1e-12
    assert np.all(w >= 0)
    np.testing.assert_array_equal(w, lat_weights(-lats))


def test_regular_grid_descending():
    lats, lons = regular_grid(4, 8)
    assert np.all(np.diff(lats) < 0)
    np.testing.assert_allclose(lats, [67.5, 22.5, -22.5, -67.5])
    assert lons[1] - lons[0] == 45.0


def test_gridfield_validation():
    lats, lons = regular_grid(2, 4)
    with pytest.raises(DomainError):
        GridField("x", 0, lats, lons, np.full((2, 4), np.nan))
    with pytest.raises(ShapeError):
        GridField("x", 0, lats, lons, np.zeros((4, 2)))
    with pytest.raises(DomainError):
        GridField("x", 0, [0.0, 0.0], lons, np.zeros((2, 4)))
    with pytest.raises(DomainError):
        GridField("x", 0, lats, [0, 1, 3, 4], np.zeros((2, 4)))


def test_gridfield_normalizes_to_descending():
    lats, lons = regular_grid(3, 4)
    data = np.arange(12.0).reshape(3, 4)
    g = GridField("x", 0, lats[::-1], lons, data).normalized()
    np.testing.assert_array_equal(g.lats, lats)
    np.testing.assert_array_equal(g.data, data[::-1])
    assert not g.data.flags.writeable


def test_mask_values():
    assert validate_mask([[0, 1], [1, 0]]).dtype == np.float64
    with pytest.raises(DomainError):
        validate_mask([[0, 0.5]])


def test_patchify_examples():
    f = np.arange(16.0).reshape(4, 4)
    p = patchify(f, 4)
    assert p.shape == (1, 16)
    np.testing.assert_array_equal(p[0], np.arange(16.0))
    g = np.arange(64.0).reshape(8, 8)
    p = patchify(g, 4)
    assert p.shape == (4, 16)
    np.testing.assert_array_equal(p[0].reshape(4, 4), g[:4, :4])
    np.testing.assert_array_equal(p[1].reshape(4, 4), g[:4, 4:])


def test_patchify_errors():
    with pytest.raises(ShapeError):
        patchify(np.zeros((6, 8)), 4)
    with pytest.raises(ShapeError):
        unpatchify(np.zeros((3, 16)), 4, 8, 8)


def test_unpatchify_zero_and_single():
    np.testing.assert_array_equal(unpatchify(np.zeros((4, 4)), 2, 4, 4), np.zeros((4, 4)))
    np.testing.assert_array_equal(unpatchify(np.arange(16.0)[None], 4, 4, 4),
                                  np.arange(16.0).reshape(4, 4))


def test_patch_round_trip_random(rng):
    f = rng.standard_normal((16, 32))
    np.testing.assert_array_equal(unpatchify(patchify(f, 4), 4, 16, 32), f)


@pytest.mark.parametrize("P", [2, 4])
def test_patchify_is_bijection_8x8(P):
    # every index lands in exactly one patch slot
    f = np.arange(64).reshape(8, 8)
    p = patchify(f, P)
    assert sorted(p.ravel().tolist()) == list(range(64))
    np.testing.assert_array_equal(unpatchify(p, P, 8, 8), f)


def test_tensor_round_trip(tmp_path, rng):
    x = rng.standard_normal((3, 5, 7)).astype(np.float32)
    write_tensor(tmp_path / "a.lht", x)
    y = read_tensor(tmp_path / "a.lht")
    assert y.dtype == np.float32
    assert y.tobytes() == x.tobytes()


def test_tensor_empty_dims(tmp_path):
    write_tensor(tmp_path / "e.lht", np.zeros((0,), np.float32))
    assert read_tensor(tmp_path / "e.lht").shape == (0,)


def test_tensor_layout():
    buf = encode_tensor(np.array([[1.0, 2.0]], np.float32))
    assert buf[:8] == b"LHTENSOR"
    assert buf[8] == 0 and buf[9] == 2
    assert len(buf) == 10 + 16 + 8 + 4


def test_tensor_corruption_detected():
    buf = bytearray(encode_tensor(np.arange(6, dtype=np.float32)))
    buf[30] ^= 0x01
    with pytest.raises(ChecksumError):
        decode_tensor(bytes(buf))
    bad = b"XXTENSOR" + bytes(buf[8:])
    with pytest.raises(TensorFileError):
        decode_tensor(bad)
    with pytest.raises(TensorFileError):
        decode_tensor(bytes(buf[:-1]))


def test_tensor_rejects_nonfinite():
    with pytest.raises(DomainError):
        encode_tensor(np.array([np.inf], np.float32))


@settings(max_examples=50)
@given(arrays(np.float32, st.lists(st.integers(0, 4), min_size=0, max_size=4).map(tuple),
              elements=st.floats(allow_nan=False, allow_infinity=False, width=32)))
def test_tensor_round_trip_property(x):
    assert decode_tensor(encode_tensor(x)).tobytes() == x.tobytes()


def test_checkpoint_and_hash(tmp_path, rng):
    t = {"a/w": rng.standard_normal((2, 3)), "b": np.ones(4)}
    save_checkpoint(tmp_path / "ck", t, {"k": 1})
    h1 = hash_directory(tmp_path / "ck")
    back, meta = load_checkpoint(tmp_path / "ck")
    assert meta == {"k": 1}
    np.testing.assert_array_equal(back["a/w"], t["a/w"].astype(np.float32))
    save_checkpoint(tmp_path / "ck", t, {"k": 1})
    assert hash_directory(tmp_path / "ck") == h1
