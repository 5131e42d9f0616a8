import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image

from decompfuse.errors import ContractError, DecodeError, FormatError
from decompfuse.imaging import (
    GridGeometry,
    check_image,
    crop_back,
    gray_to_3ch,
    list_images,
    load_image,
    luminance,
    pad_to_patch,
    save_image,
)

unit = st.floats(0.0, 1.0, allow_nan=False, width=32)


def images(max_side=20, channels=(1, 3)):
    return st.tuples(st.integers(1, max_side), st.integers(1, max_side), st.sampled_from(channels)).flatmap(
        lambda s: arrays(np.float64, s, elements=unit)
    )


def test_load_8bit_white(tmp_path):
    Image.fromarray(np.full((5, 7), 255, np.uint8)).save(tmp_path / "w.png")
    img = load_image(tmp_path / "w.png")
    assert img.shape == (5, 7, 3)
    assert np.all(img == 1.0)


def test_load_8bit_black(tmp_path):
    Image.fromarray(np.zeros((4, 4, 3), np.uint8)).save(tmp_path / "b.png")
    assert np.all(load_image(tmp_path / "b.png") == 0.0)


def test_load_16bit_scaling(tmp_path):
    Image.fromarray(np.full((3, 3), 32768, np.uint16)).save(tmp_path / "s.png")
    img = load_image(tmp_path / "s.png", mode="gray")
    assert img.shape == (3, 3, 1)
    np.testing.assert_allclose(img, 32768 / 65535, atol=1e-6)


def test_gray_mode_single_channel(tmp_path):
    Image.fromarray(np.arange(12, dtype=np.uint8).reshape(3, 4, 1).repeat(3, 2)).save(tmp_path / "c.png")
    assert load_image(tmp_path / "c.png", mode="gray").shape == (3, 4, 1)


def test_load_unreadable_names_path(tmp_path):
    bad = tmp_path / "junk.png"
    bad.write_bytes(b"not an image")
    with pytest.raises(DecodeError, match="junk.png"):
        load_image(bad)


def test_load_missing_file(tmp_path):
    with pytest.raises(DecodeError, match="nope.png"):
        load_image(tmp_path / "nope.png")


def test_unsupported_format(tmp_path):
    Image.fromarray(np.zeros((2, 2), np.float32), mode="F").save(tmp_path / "f.tif")
    with pytest.raises(FormatError):
        load_image(tmp_path / "f.tif")


def test_gray_to_3ch_examples():
    out = gray_to_3ch(np.full((4, 5, 1), 0.5))
    assert out.shape == (4, 5, 3) and np.all(out == 0.5)
    np.testing.assert_array_equal(gray_to_3ch(np.array([[[0.2]]]))[0, 0], [0.2, 0.2, 0.2])


def test_gray_to_3ch_rejects_color():
    with pytest.raises(ContractError):
        gray_to_3ch(np.zeros((2, 2, 3)))


@given(images(channels=(1,)))
def test_gray_to_3ch_identical_channels(img):
    out = gray_to_3ch(img)
    assert np.max(np.abs(out - out[..., :1])) == 0


def test_pad_224_unchanged():
    img = np.random.default_rng(0).random((224, 224, 3))
    padded, geom = pad_to_patch(img, 16)
    assert padded.shape == (224, 224, 3)
    assert (geom.grid_h, geom.grid_w) == (14, 14)
    np.testing.assert_array_equal(padded, img)


def test_pad_225_by_224():
    padded, geom = pad_to_patch(np.zeros((225, 224, 3)), 16)
    assert padded.shape == (240, 224, 3)
    assert (geom.grid_h, geom.grid_w) == (15, 14)


def test_pad_is_edge_replication():
    img = np.arange(6, dtype=np.float64).reshape(2, 3, 1) / 10
    padded, _ = pad_to_patch(img, 4)
    np.testing.assert_array_equal(padded[2:, :3, 0], np.repeat(img[1:2, :, 0], 2, axis=0))
    np.testing.assert_array_equal(padded[:, 3, 0], padded[:, 2, 0])


def test_pad_rejects_bad_patch():
    with pytest.raises(ContractError):
        pad_to_patch(np.zeros((4, 4, 1)), 0)


@given(images(), st.integers(1, 9))
def test_pad_crop_roundtrip_and_geometry(img, patch):
    padded, geom = pad_to_patch(img, patch)
    np.testing.assert_array_equal(crop_back(padded, geom), img)
    for n, size in ((geom.grid_h, geom.image_h), (geom.grid_w, geom.image_w)):
        assert n * patch >= size and (n - 1) * patch < size
    assert padded.shape[:2] == (geom.padded_h, geom.padded_w)


@given(images(channels=(1,)), st.integers(1, 9))
def test_gray_to_3ch_commutes_with_pad(img, patch):
    a, _ = pad_to_patch(gray_to_3ch(img), patch)
    b, _ = pad_to_patch(img, patch)
    np.testing.assert_array_equal(a, gray_to_3ch(b))


@settings(max_examples=25, deadline=None)
@given(st.tuples(st.integers(1, 12), st.integers(1, 12), st.sampled_from((1, 3))).flatmap(
    lambda s: arrays(np.uint8, s)))
def test_save_load_roundtrip_8bit(tmp_path_factory, raw):
    path = tmp_path_factory.mktemp("io") / "x.png"
    img = raw.astype(np.float64) / 255.0
    save_image(path, img)
    back = load_image(path, mode="gray" if raw.shape[2] == 1 else "rgb")
    np.testing.assert_array_equal(np.round(back * 255).astype(np.uint8), raw)
    save_image(path, back)
    np.testing.assert_array_equal(load_image(path, mode="gray" if raw.shape[2] == 1 else "rgb"), back)


def test_check_image_contract():
    with pytest.raises(ContractError):
        check_image(np.full((2, 2, 3), 1.5))
    with pytest.raises(ContractError):
        check_image(np.full((2, 2, 3), np.nan))
    with pytest.raises(ContractError):
        check_image(np.zeros((2, 2, 2)))


def test_geometry_dict_roundtrip():
    geom = GridGeometry.for_image(30, 17, 8)
    assert GridGeometry(**geom.to_dict()) == geom
    assert geom.num_tokens == 4 * 3


def test_luminance_weights():
    img = np.zeros((1, 3, 3))
    img[0, 0, 0] = img[0, 1, 1] = img[0, 2, 2] = 1.0
    np.testing.assert_allclose(luminance(img)[0], [0.299, 0.587, 0.114])


def test_list_images_sorted_and_filtered(tmp_path):
    for name in ("b.png", "a.jpg", "notes.txt"):
        (tmp_path / name).write_bytes(b"")
    assert [p.name for p in list_images(tmp_path)] == ["a.jpg", "b.png"]
