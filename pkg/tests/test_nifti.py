import struct

import numpy as np
import pytest

from epiunwarp.distortion import Volume
from epiunwarp.errors import NiftiParseError, ParameterError
from epiunwarp.niftiio import HEADER_SIZE, nifti_read, nifti_write


@pytest.fixture
def sample_path(tmp_path):
    arr = np.random.default_rng(0).normal(size=(64, 64, 32)).astype(np.float32)
    path = tmp_path / "vol.nii"
    nifti_write(Volume(arr.astype(np.float64), voxel_size=(2.0, 2.0, 3.5)), path)
    return path, arr


class TestRoundTrip:
    def test_float32_payload_bitwise(self, sample_path):
        path, arr = sample_path
        vol = nifti_read(path)
        assert np.array_equal(vol.data, arr.astype(np.float64))
        assert vol.voxel_size == (2.0, 2.0, 3.5)

    def test_float64_payload_bitwise(self, tmp_path):
        arr = np.random.default_rng(1).normal(size=(16, 16))
        path = tmp_path / "v64.nii"
        nifti_write(Volume(arr), path, dtype=np.float64)
        assert np.array_equal(nifti_read(path).data, arr)

    def test_file_level_round_trip_stable(self, sample_path, tmp_path):
        path, _ = sample_path
        again = tmp_path / "again.nii"
        nifti_write(nifti_read(path), again, dtype=np.float32)
        assert path.read_bytes() == again.read_bytes()

    def test_4d_series(self, tmp_path):
        arr = np.random.default_rng(2).normal(size=(8, 8, 4, 6)).astype(np.float32)
        path = tmp_path / "series.nii"
        nifti_write(Volume(arr.astype(np.float64)), path)
        out = nifti_read(path)
        assert out.data.shape == (8, 8, 4, 6)
        assert np.array_equal(out.data, arr.astype(np.float64))


class TestScaling:
    def test_int16_with_slope_and_intercept(self, tmp_path):
        header = bytearray(HEADER_SIZE)
        struct.pack_into("<i", header, 0, HEADER_SIZE)
        struct.pack_into("<8h", header, 40, 2, 4, 4, 1, 1, 1, 1, 1)
        struct.pack_into("<2h", header, 70, 4, 16)  # int16
        struct.pack_into("<8f", header, 76, 1, 1, 1, 1, 1, 1, 1, 1)
        struct.pack_into("<f", header, 108, 352.0)
        struct.pack_into("<2f", header, 112, 2.0, 1.0)
        header[344:348] = b"n+1\x00"
        payload = np.full((4, 4), 3, dtype="<i2").tobytes(order="F")
        path = tmp_path / "scaled.nii"
        path.write_bytes(bytes(header) + b"\x00" * 4 + payload)
        vol = nifti_read(path)
        assert np.all(vol.data == 7.0)  # 3 * 2.0 + 1.0


class TestParseErrors:
    def corrupt(self, sample_path, tmp_path, mutate):
        path, _ = sample_path
        blob = bytearray(path.read_bytes())
        mutate(blob)
        bad = tmp_path / "bad.nii"
        bad.write_bytes(bytes(blob))
        return bad

    def test_two_file_magic_rejected(self, sample_path, tmp_path):
        bad = self.corrupt(sample_path, tmp_path,
                           lambda b: b.__setitem__(slice(344, 348), b"ni1\x00"))
        with pytest.raises(NiftiParseError, match="ni1") as exc:
            nifti_read(bad)
        assert exc.value.offset == 344

    def test_garbage_magic_rejected(self, sample_path, tmp_path):
        bad = self.corrupt(sample_path, tmp_path,
                           lambda b: b.__setitem__(slice(344, 348), b"xxxx"))
        with pytest.raises(NiftiParseError) as exc:
            nifti_read(bad)
        assert exc.value.offset == 344

    def test_unsupported_datatype(self, sample_path, tmp_path):
        bad = self.corrupt(sample_path, tmp_path,
                           lambda b: struct.pack_into("<2h", b, 70, 8, 32))
        with pytest.raises(NiftiParseError, match="datatype") as exc:
            nifti_read(bad)
        assert exc.value.offset == 70

    def test_truncated_payload(self, sample_path, tmp_path):
        path, _ = sample_path
        blob = path.read_bytes()[:1000]
        bad = tmp_path / "trunc.nii"
        bad.write_bytes(blob)
        with pytest.raises(NiftiParseError, match="truncated") as exc:
            nifti_read(bad)
        assert exc.value.offset == 1000

    def test_truncated_header(self, tmp_path):
        bad = tmp_path / "tiny.nii"
        bad.write_bytes(b"\x00" * 100)
        with pytest.raises(NiftiParseError, match="header"):
            nifti_read(bad)

    def test_big_endian_detected(self, sample_path, tmp_path):
        def swap(b):
            struct.pack_into(">i", b, 0, HEADER_SIZE)
            struct.pack_into(">8h", b, 40, 3, 64, 64, 32, 1, 1, 1, 1)

        bad = self.corrupt(sample_path, tmp_path, swap)
        with pytest.raises(NiftiParseError, match="big-endian"):
            nifti_read(bad)

    def test_bad_dim0(self, sample_path, tmp_path):
        bad = self.corrupt(sample_path, tmp_path,
                           lambda b: struct.pack_into("<8h", b, 40, 5, 4, 4, 4, 4, 4, 1, 1))
        with pytest.raises(NiftiParseError, match="dim"):
            nifti_read(bad)


class TestWriteValidation:
    def test_unsupported_write_dtype(self, tmp_path):
        with pytest.raises(ParameterError):
            nifti_write(Volume(np.zeros((4, 4))), tmp_path / "x.nii", dtype=np.int32)
