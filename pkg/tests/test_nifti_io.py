import gzip
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from _fixtures import fixture_222, nifti_bytes
from medsegpipe.errors import (
    BadMagic,
    InvalidHeader,
    NonFiniteVoxel,
    SampleNotFound,
    ShapeMismatch,
    TooManyClasses,
    TruncatedData,
    UnsupportedDatatype,
)
from medsegpipe.nifti_io import (
    NiftiSampleIO,
    load_nifti,
    read_nifti,
    save_nifti,
    write_nifti,
)
from medsegpipe.volume import ClassMap, Volume


def test_fixture_parses_to_known_values():
    raw = fixture_222()
    assert len(raw) == 352 + 32
    header, vol = read_nifti(raw)
    assert header.sizeof_hdr == 348
    assert header.dim[:4] == (3, 2, 2, 2)
    assert header.datatype == 16 and header.bitpix == 32
    assert header.vox_offset == 352.0
    assert vol.shape == (2, 2, 2)
    assert vol.spacing == (1.0, 1.0, 1.0)
    assert vol.data.ravel().tolist() == list(range(8))


def test_axis_order_is_z_y_x():
    # x fastest in the file: value = x + 10 y + 100 z
    nx, ny, nz = 4, 3, 2
    values = [x + 10 * y + 100 * z for z in range(nz) for y in range(ny) for x in range(nx)]
    _, vol = read_nifti(nifti_bytes(values, dims=(nx, ny, nz), pixdim=(0.5, 2.0, 3.0)))
    assert vol.shape == (nz, ny, nx)
    assert vol.spacing == (3.0, 2.0, 0.5)
    assert vol.data[1, 2, 3] == 123


def test_fixture_matches_nibabel_header_dump(tmp_path):
    nib = pytest.importorskip("nibabel")
    path = tmp_path / "f.nii"
    path.write_bytes(fixture_222())
    img = nib.load(str(path))
    assert tuple(img.header["dim"][:4]) == (3, 2, 2, 2)
    assert int(img.header["datatype"]) == 16
    ours = read_nifti(fixture_222())[1].data
    # nibabel is x-fastest indexed [x, y, z]; ours is [z, y, x]
    np.testing.assert_array_equal(np.asarray(img.dataobj).transpose(2, 1, 0), ours)


def test_written_file_matches_nibabel(tmp_path):
    nib = pytest.importorskip("nibabel")
    rng = np.random.default_rng(3)
    vol = Volume(rng.normal(size=(3, 4, 5)).astype(np.float32), (2.5, 1.5, 0.75))
    path = tmp_path / "w.nii"
    save_nifti(path, vol)
    img = nib.load(str(path))
    assert tuple(float(z) for z in img.header.get_zooms()) == (0.75, 1.5, 2.5)
    np.testing.assert_array_equal(np.asarray(img.dataobj).transpose(2, 1, 0), vol.data)


def test_byte_swapped_fixture_parses_identically():
    h_le, v_le = read_nifti(fixture_222("<"))
    h_be, v_be = read_nifti(fixture_222(">"))
    assert (h_le.endian, h_be.endian) == ("<", ">")
    np.testing.assert_array_equal(v_le.data, v_be.data)
    assert v_le.spacing == v_be.spacing


@pytest.mark.parametrize("magic", [b"XXXX", b"n+2\x00", b"\x00\x00\x00\x00"])
def test_bad_magic_rejected(magic):
    with pytest.raises(BadMagic):
        read_nifti(nifti_bytes([0.0] * 8, magic=magic))


@pytest.mark.parametrize("cut", [1, 4, 31])
def test_truncated_data_rejected(cut):
    raw = fixture_222()[:-cut]
    with pytest.raises(TruncatedData) as info:
        read_nifti(raw)
    assert info.value.expected == 32 and info.value.actual == 32 - cut


def test_truncated_header_rejected():
    with pytest.raises(TruncatedData):
        read_nifti(fixture_222()[:200])


def test_unsupported_datatype():
    raw = bytearray(fixture_222())
    struct.pack_into("<h", raw, 70, 32)  # complex64
    with pytest.raises(UnsupportedDatatype) as info:
        read_nifti(bytes(raw))
    assert info.value.code == 32


def test_bitpix_inconsistent_with_datatype():
    raw = bytearray(fixture_222())
    struct.pack_into("<h", raw, 72, 16)
    with pytest.raises(InvalidHeader):
        read_nifti(bytes(raw))


def test_insane_dim0_rejected():
    raw = bytearray(fixture_222())
    struct.pack_into("<h", raw, 40, 0)
    with pytest.raises(InvalidHeader):
        read_nifti(bytes(raw))


def test_nan_voxel_rejected():
    with pytest.raises(NonFiniteVoxel):
        read_nifti(nifti_bytes([0.0] * 7 + [float("nan")]))


@pytest.mark.parametrize("datatype", [2, 4, 8, 16, 64, 512])
def test_supported_datatypes(datatype):
    values = [0, 1, 2, 3, 4, 5, 6, 7]
    header, vol = read_nifti(nifti_bytes(values, datatype=datatype))
    assert header.datatype == datatype
    assert vol.data.ravel().tolist() == values


def test_scl_slope_applied_and_zero_means_no_rescale():
    _, scaled = read_nifti(nifti_bytes(list(range(8)), datatype=4, slope=2.0, inter=-1.0))
    assert scaled.data.ravel().tolist() == [2.0 * v - 1.0 for v in range(8)]
    _, plain = read_nifti(nifti_bytes(list(range(8)), datatype=4, slope=0.0, inter=5.0))
    assert plain.data.ravel().tolist() == list(range(8))


def test_4d_with_singleton_time_is_3d():
    _, vol = read_nifti(nifti_bytes([float(i) for i in range(8)], dims=(2, 2, 2, 1)))
    assert vol.shape == (2, 2, 2)


def test_4d_with_time_rejected():
    with pytest.raises(InvalidHeader):
        read_nifti(nifti_bytes([0.0] * 16, dims=(2, 2, 2, 2)))


def test_2d_image():
    _, vol = read_nifti(nifti_bytes([float(i) for i in range(6)], dims=(3, 2), pixdim=(0.5, 2.0)))
    assert vol.shape == (2, 3)
    assert vol.spacing == (2.0, 0.5)


def test_paired_header_needs_image_data():
    hdr = bytearray(nifti_bytes([], dims=(2, 2, 2), magic=b"ni1\x00")[:348])
    struct.pack_into("<f", hdr, 108, 0.0)  # paired files start voxel data at 0
    hdr = bytes(hdr)
    img = struct.pack("<8f", *range(8))
    with pytest.raises(InvalidHeader):
        read_nifti(hdr)
    _, vol = read_nifti(hdr, image_data=img)
    assert vol.data.ravel().tolist() == list(range(8))


def test_write_layout():
    raw = write_nifti(Volume(np.arange(8, dtype=np.float32).reshape(2, 2, 2), (1, 1, 1)))
    assert len(raw) == 352 + 8 * 4
    assert raw[344:348] == b"n+1\x00"
    assert struct.unpack_from("<f", raw, 108)[0] == 352.0
    assert struct.unpack_from("<f", raw, 112)[0] == 0.0
    assert struct.unpack_from("<h", raw, 70)[0] == 16


def test_constant_zero_volume_round_trip():
    vol = Volume(np.zeros((4, 4, 4), dtype=np.float32), (1.0, 1.0, 1.0))
    _, back = read_nifti(write_nifti(vol))
    np.testing.assert_array_equal(back.data, vol.data)


def test_classmap_written_as_uint8():
    labels = ClassMap(np.array([[[0, 1], [2, 0]]]), (1.0, 1.0, 1.0), 3)
    raw = write_nifti(labels)
    assert struct.unpack_from("<h", raw, 70)[0] == 2
    assert struct.unpack_from("<h", raw, 72)[0] == 8
    _, back = read_nifti(raw)
    np.testing.assert_array_equal(back.data, labels.data)


def test_too_many_classes():
    labels = ClassMap(np.zeros((2, 2, 2), dtype=np.int64), (1, 1, 1), 300)
    with pytest.raises(TooManyClasses):
        write_nifti(labels)


@settings(max_examples=60, deadline=None)
@given(
    data=hnp.arrays(
        np.float32,
        hnp.array_shapes(min_dims=3, max_dims=3, min_side=1, max_side=5),
        elements=st.floats(-1e6, 1e6, width=32),
    ),
    spacing=st.tuples(*[st.floats(0.125, 10.0, width=32)] * 3),
)
def test_round_trip_bit_exact(data, spacing):
    vol = Volume(data, spacing)
    raw = write_nifti(vol)
    _, back = read_nifti(raw)
    assert back.data.dtype == np.float32
    assert back.data.tobytes() == data.tobytes()
    np.testing.assert_allclose(back.spacing, spacing, rtol=1e-6)
    assert write_nifti(back) == raw


def test_gzip_round_trip(tmp_path):
    vol = Volume(np.arange(24, dtype=np.float32).reshape(2, 3, 4), (1.0, 2.0, 3.0))
    path = tmp_path / "v.nii.gz"
    save_nifti(path, vol)
    assert path.read_bytes()[:2] == b"\x1f\x8b"
    _, back = load_nifti(path)
    np.testing.assert_array_equal(back.data, vol.data)
    assert gzip.decompress(path.read_bytes()) == write_nifti(vol)


# sample I/O


def _write_case(root, sid, image, labels=None):
    save_nifti(root / sid / "imaging.nii", image)
    if labels is not None:
        save_nifti(root / sid / "segmentation.nii", labels)


def test_sample_io_image_only(tmp_path):
    vol = Volume(np.ones((4, 4, 4), dtype=np.float32), (1, 1, 1))
    _write_case(tmp_path / "data", "a", vol)
    sio = NiftiSampleIO(tmp_path / "data", tmp_path / "out", 2)
    assert sio.sample_ids() == ["a"]
    image, labels = sio.load_sample("a")
    assert labels is None and image.shape == (4, 4, 4)
    assert not sio.has_labels("a")


def test_sample_io_missing_sample(tmp_path):
    (tmp_path / "data").mkdir()
    sio = NiftiSampleIO(tmp_path / "data", tmp_path / "out", 2)
    with pytest.raises(SampleNotFound):
        sio.load_sample("nope")
    with pytest.raises(SampleNotFound):
        NiftiSampleIO(tmp_path / "missing", tmp_path / "out", 2).sample_ids()


def test_sample_io_shape_mismatch(tmp_path):
    vol = Volume(np.ones((4, 4, 4), dtype=np.float32), (1, 1, 1))
    lab = ClassMap(np.zeros((3, 3, 3), dtype=np.int64), (1, 1, 1), 2)
    _write_case(tmp_path / "data", "a", vol, lab)
    with pytest.raises(ShapeMismatch):
        NiftiSampleIO(tmp_path / "data", tmp_path / "out", 2).load_sample("a")


def test_sample_io_prediction_written(tmp_path):
    vol = Volume(np.ones((2, 2, 2), dtype=np.float32), (1, 2, 3))
    lab = ClassMap(np.array([0, 1, 1, 0, 1, 0, 0, 1]).reshape(2, 2, 2), (1, 2, 3), 2)
    _write_case(tmp_path / "data", "a", vol, lab)
    sio = NiftiSampleIO(tmp_path / "data", tmp_path / "out", 2)
    _, loaded = sio.load_sample("a")
    np.testing.assert_array_equal(loaded.data, lab.data)
    sio.save_prediction("a", lab)
    _, back = load_nifti(tmp_path / "out" / "a.nii")
    np.testing.assert_array_equal(back.data, lab.data)
    assert back.spacing == (1.0, 2.0, 3.0)
