import gzip
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from liverseg.volume_io import (
    DATATYPES,
    NiftiError,
    Volume,
    nifti_header,
    overlay_rgb,
    read_nifti,
    read_ppm,
    restack,
    slice_volume,
    write_nifti,
    write_overlay,
)


def sample(dtype, shape=(5, 4, 3), seed=0):
    rng = np.random.default_rng(seed)
    if dtype == np.float32:
        return rng.standard_normal(shape).astype(np.float32)
    info = np.iinfo(dtype)
    return rng.integers(info.min, info.max, size=shape, endpoint=True).astype(dtype)


@pytest.mark.parametrize("dtype", [np.uint8, np.int16, np.float32])
@pytest.mark.parametrize("endian", ["<", ">"])
@pytest.mark.parametrize("suffix", [".nii", ".nii.gz"])
def test_round_trip_bit_exact(tmp_path, dtype, endian, suffix):
    vol = Volume(sample(dtype), (0.7, 0.8, 2.5), "p01")
    path = tmp_path / f"p01{suffix}"
    write_nifti(vol, path, endian=endian)
    back = read_nifti(path)
    assert back.voxels.dtype == dtype
    assert back.dims == vol.dims
    assert back.voxels.tobytes() == vol.voxels.tobytes()
    np.testing.assert_allclose(back.spacing, vol.spacing, rtol=1e-6)
    assert back.source_id == "p01"


def test_datatype_codes():
    assert DATATYPES[2] == np.uint8 and DATATYPES[4] == np.int16 and DATATYPES[16] == np.float32
    for code, dt in DATATYPES.items():
        hdr = nifti_header(Volume(np.zeros((1, 1, 1), dtype=dt)))
        assert struct.unpack_from("<h", hdr, 70)[0] == code


def test_file_size_and_layout(tmp_path):
    path = tmp_path / "m.nii"
    vox = np.arange(8, dtype=np.uint8).reshape(2, 2, 2)
    write_nifti(Volume(vox), path)
    raw = path.read_bytes()
    assert len(raw) == 352 + 8
    assert raw[344:348] == b"n+1\x00"
    assert struct.unpack_from("<i", raw, 0)[0] == 348
    assert struct.unpack_from("<f", raw, 108)[0] == 352.0
    # X varies fastest on disk
    assert list(raw[352:]) == [vox[0, 0, 0], vox[1, 0, 0], vox[0, 1, 0], vox[1, 1, 0],
                               vox[0, 0, 1], vox[1, 0, 1], vox[0, 1, 1], vox[1, 1, 1]]


def test_default_spacing_is_identity(tmp_path):
    write_nifti(Volume(np.zeros((2, 3, 4), dtype=np.uint8)), tmp_path / "a.nii")
    assert read_nifti(tmp_path / "a.nii").spacing == (1.0, 1.0, 1.0)


def test_gzip_is_deterministic(tmp_path):
    vol = Volume(sample(np.int16))
    write_nifti(vol, tmp_path / "a.nii.gz")
    write_nifti(vol, tmp_path / "b.nii.gz")
    assert (tmp_path / "a.nii.gz").read_bytes() == (tmp_path / "b.nii.gz").read_bytes()
    gzip.decompress((tmp_path / "a.nii.gz").read_bytes())


def _raw(tmp_path, dtype=np.uint8):
    path = tmp_path / "v.nii"
    write_nifti(Volume(sample(dtype)), path)
    return bytearray(path.read_bytes())


def _read_bytes(tmp_path, raw):
    path = tmp_path / "bad.nii"
    path.write_bytes(bytes(raw))
    return read_nifti(path)


def test_detached_form_rejected(tmp_path):
    raw = _raw(tmp_path)
    raw[344:348] = b"ni1\x00"
    with pytest.raises(NiftiError, match="unsupported form"):
        _read_bytes(tmp_path, raw)


def test_bad_magic(tmp_path):
    raw = _raw(tmp_path)
    raw[344:348] = b"xyz\x00"
    with pytest.raises(NiftiError, match="bad magic"):
        _read_bytes(tmp_path, raw)


def test_bad_datatype(tmp_path):
    raw = _raw(tmp_path)
    struct.pack_into("<h", raw, 70, 64)
    with pytest.raises(NiftiError, match="datatype code 64"):
        _read_bytes(tmp_path, raw)


def test_truncated(tmp_path):
    raw = _raw(tmp_path)
    with pytest.raises(NiftiError, match="truncated data"):
        _read_bytes(tmp_path, raw[:-5])
    with pytest.raises(NiftiError, match="truncated header"):
        _read_bytes(tmp_path, raw[:100])


def test_nifti2_and_garbage(tmp_path):
    raw = _raw(tmp_path)
    struct.pack_into("<i", raw, 0, 540)
    with pytest.raises(NiftiError, match="NIfTI-2"):
        _read_bytes(tmp_path, raw)
    with pytest.raises(NiftiError, match="sizeof_hdr"):
        _read_bytes(tmp_path, b"\x01" * 400)


def test_scaling_applied(tmp_path):
    raw = _raw(tmp_path, np.int16)
    struct.pack_into("<2f", raw, 112, 0.5, -3.0)
    vol = _read_bytes(tmp_path, raw)
    assert vol.voxels.dtype == np.float32
    np.testing.assert_allclose(vol.voxels, sample(np.int16) * 0.5 - 3.0, rtol=1e-6)


def test_volume_validation():
    with pytest.raises(ValueError):
        Volume(np.zeros((2, 2, 2), dtype=np.float64))
    with pytest.raises(ValueError):
        Volume(np.zeros((0, 2, 2), dtype=np.uint8))


# ---------------------------------------------------------------- slicing


def test_sagittal_slice_count():
    # sagittal is the stored X axis, so a 125-wide grid yields 125 slices
    vol = Volume(np.zeros((125, 256, 256), dtype=np.uint8))
    stack = slice_volume(vol, "sagittal")
    assert len(stack) == 125 and stack.slices.shape[1:] == (256, 256)
    axial = slice_volume(Volume(np.zeros((256, 256, 125), dtype=np.uint8)), "axial")
    assert axial.slices.shape == (125, 256, 256)
    coronal = slice_volume(Volume(np.zeros((256, 256, 125), dtype=np.uint8)), "coronal")
    assert coronal.slices.shape == (256, 256, 125)


@settings(max_examples=20, deadline=None)
@given(st.tuples(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6)),
       st.sampled_from(["sagittal", "coronal", "axial"]),
       st.sampled_from([np.uint8, np.int16, np.float32]), st.integers(0, 100))
def test_slice_restack_identity(shape, axis, dtype, seed):
    vol = Volume(sample(dtype, shape, seed))
    stack = slice_volume(vol, axis)
    assert len(stack) == shape[["sagittal", "coronal", "axial"].index(axis)]
    back = restack(stack, dtype=dtype)
    assert back.voxels.tobytes() == vol.voxels.tobytes() and back.dims == vol.dims


def test_slice_unknown_axis():
    with pytest.raises(ValueError, match="unknown axis"):
        slice_volume(Volume(np.zeros((2, 2, 2), dtype=np.uint8)), "oblique")


# ---------------------------------------------------------------- overlays


def test_overlay_empty_mask_is_gray(tmp_path):
    g = np.arange(12, dtype=np.uint8).reshape(3, 4) * 20
    rgb = write_overlay(g, np.zeros_like(g), tmp_path / "o.ppm")
    assert rgb.shape == (3, 4, 3)
    assert all(np.array_equal(rgb[:, :, c], g) for c in range(3))


def test_overlay_full_mask_blend(tmp_path):
    g = np.arange(256, dtype=np.uint8).reshape(16, 16)
    m = np.ones_like(g)
    g0, m0 = g.copy(), m.copy()
    rgb = write_overlay(g, m, tmp_path / "o.ppm")
    gf = g.astype(float)
    np.testing.assert_array_equal(rgb[:, :, 0], np.floor(0.5 * gf + 127.5 + 0.5))
    np.testing.assert_array_equal(rgb[:, :, 1], np.floor(0.5 * gf + 0.5))
    np.testing.assert_array_equal(rgb[:, :, 2], rgb[:, :, 1])
    assert np.array_equal(g, g0) and np.array_equal(m, m0)
    assert np.array_equal(read_ppm(tmp_path / "o.ppm"), rgb)
    raw = (tmp_path / "o.ppm").read_bytes()
    assert raw.startswith(b"P6\n16 16\n255\n") and len(raw) == 13 + 16 * 16 * 3


def test_overlay_float_input_and_determinism():
    rng = np.random.default_rng(3)
    g, m = rng.normal(size=(9, 7)), (rng.random((9, 7)) > 0.5).astype(np.uint8)
    g0 = g.copy()
    assert np.array_equal(overlay_rgb(g, m), overlay_rgb(g, m))
    assert np.array_equal(g, g0)


def test_overlay_errors():
    with pytest.raises(ValueError, match="shape"):
        overlay_rgb(np.zeros((3, 3), np.uint8), np.zeros((3, 4), np.uint8))
    with pytest.raises(ValueError, match="binary"):
        overlay_rgb(np.zeros((3, 3), np.uint8), np.full((3, 3), 2))
