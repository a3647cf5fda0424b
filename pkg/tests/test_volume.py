import gzip
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from patchwork import geometry as g
from patchwork.errors import DegenerateImage, InvalidFactor, IoError, MalformedHeader, UnsupportedDatatype
from patchwork.volume import (LabelSpec, Volume, labels_to_channels, normalize, normalize_patch,
                              prefilter, read_nifti, write_nifti)

nib = pytest.importorskip("nibabel")


def vol3(shape=(4, 5, 6), seed=0, affine=None):
    rng = np.random.default_rng(seed)
    return Volume(rng.standard_normal(shape + (1,)).astype(np.float32),
                  np.eye(4) if affine is None else affine)


class TestNiftiRead:
    def test_minimal_identity(self, tmp_path):
        data = np.arange(64, dtype=np.float32).reshape(4, 4, 4)
        nib.save(nib.Nifti1Image(data, np.eye(4)), tmp_path / "a.nii")
        v = read_nifti(tmp_path / "a.nii")
        assert v.data.shape == (4, 4, 4, 1)
        np.testing.assert_array_equal(v.affine, np.eye(4))
        np.testing.assert_array_equal(v.data[..., 0], data)

    def test_pixdim_fallback(self, tmp_path):
        img = nib.Nifti1Image(np.zeros((3, 3, 3), np.float32), None)
        img.header.set_zooms((2.0, 2.0, 2.0))
        img.header.set_sform(None, code=0)
        img.header.set_qform(None, code=0)
        nib.save(img, tmp_path / "p.nii")
        v = read_nifti(tmp_path / "p.nii")
        np.testing.assert_allclose(g.linear_part(v.affine), np.diag([2.0, 2.0, 2.0]))

    def test_qform_used_without_sform(self, tmp_path):
        aff = g.compose(g.translation(3, -4, 5), g.from_linear(
            g.quaternion_to_matrix((0.9, 0.1, -0.2, 0.3)) @ np.diag([1.5, 2.0, 0.5])))
        img = nib.Nifti1Image(np.zeros((2, 3, 4), np.float32), None)
        img.header.set_qform(aff, code=1)
        img.header.set_sform(None, code=0)
        nib.save(img, tmp_path / "q.nii")
        v = read_nifti(tmp_path / "q.nii")
        np.testing.assert_allclose(v.affine, img.header.get_qform(), atol=1e-5)

    @pytest.mark.parametrize("dtype", [np.uint8, np.int16, np.int32, np.float32, np.float64])
    def test_datatypes_against_nibabel(self, tmp_path, dtype):
        rng = np.random.default_rng(1)
        data = (rng.random((5, 4, 3)) * 100).astype(dtype)
        aff = np.diag([1.2, 0.8, 3.0, 1.0])
        aff[:3, 3] = (7, 8, 9)
        nib.save(nib.Nifti1Image(data, aff), tmp_path / "d.nii.gz")
        v = read_nifti(tmp_path / "d.nii.gz")
        ref = nib.load(tmp_path / "d.nii.gz")
        np.testing.assert_allclose(v.data[..., 0], np.asarray(ref.dataobj, dtype=np.float64), rtol=1e-6)
        np.testing.assert_allclose(v.affine, ref.affine, atol=1e-5)

    def test_scl_slope_applied(self, tmp_path):
        img = nib.Nifti1Image(np.full((2, 2, 2), 10, np.int16), np.eye(4))
        img.header.set_slope_inter(0.5, 1.0)
        nib.save(img, tmp_path / "s.nii")
        np.testing.assert_allclose(read_nifti(tmp_path / "s.nii").data, 6.0)

    def test_fourth_dim_is_features(self, tmp_path):
        data = np.random.default_rng(2).random((3, 4, 5, 2)).astype(np.float32)
        nib.save(nib.Nifti1Image(data, np.eye(4)), tmp_path / "f.nii")
        v = read_nifti(tmp_path / "f.nii")
        assert v.shape == (3, 4, 5) and v.num_features == 2
        np.testing.assert_array_equal(v.data, data)

    def test_single_slice_is_2d(self, tmp_path):
        nib.save(nib.Nifti1Image(np.ones((6, 7, 1), np.float32), np.diag([2, 3, 4, 1])), tmp_path / "t.nii")
        v = read_nifti(tmp_path / "t.nii")
        assert v.ndim == 2
        np.testing.assert_allclose(v.affine, np.diag([2.0, 3.0, 1.0]))
        assert read_nifti(tmp_path / "t.nii", ndim=3).ndim == 3

    def test_bad_sizeof_hdr(self, tmp_path):
        write_nifti(vol3(), tmp_path / "x.nii")
        raw = bytearray((tmp_path / "x.nii").read_bytes())
        raw[:4] = struct.pack("<i", 123)
        (tmp_path / "x.nii").write_bytes(bytes(raw))
        with pytest.raises(MalformedHeader):
            read_nifti(tmp_path / "x.nii")

    def test_unsupported_datatype(self, tmp_path):
        nib.save(nib.Nifti1Image(np.zeros((2, 2, 2), np.complex64), np.eye(4)), tmp_path / "c.nii")
        with pytest.raises(UnsupportedDatatype):
            read_nifti(tmp_path / "c.nii")

    def test_missing_file_names_path(self, tmp_path):
        with pytest.raises(IoError, match="nope.nii"):
            read_nifti(tmp_path / "nope.nii")

    def test_big_endian(self, tmp_path):
        data = np.arange(24, dtype=">f4").reshape(2, 3, 4)
        img = nib.Nifti1Image(data, np.eye(4), header=nib.Nifti1Header(endianness=">"))
        nib.save(img, tmp_path / "be.nii")
        assert (tmp_path / "be.nii").read_bytes()[:4] == struct.pack(">i", 348)
        np.testing.assert_array_equal(read_nifti(tmp_path / "be.nii").data[..., 0], data.astype(np.float32))


class TestNiftiWrite:
    @pytest.mark.parametrize("name", ["r.nii", "r.nii.gz"])
    def test_float32_round_trip_bitwise(self, tmp_path, name):
        aff = g.compose(g.translation(1, 2, 3), g.from_linear(np.diag([0.7, 1.1, 2.0])))
        v = vol3(affine=aff)
        write_nifti(v, tmp_path / name)
        w = read_nifti(tmp_path / name)
        assert w.data.tobytes() == v.data.tobytes()
        np.testing.assert_allclose(w.affine, aff, atol=1e-5)
        ref = nib.load(tmp_path / name)
        np.testing.assert_array_equal(np.asarray(ref.dataobj), v.data[..., 0])
        assert int(ref.header["sform_code"]) == 1

    def test_gzip_detected_by_magic(self, tmp_path):
        write_nifti(vol3(), tmp_path / "z.nii.gz")
        (tmp_path / "z.bin").write_bytes((tmp_path / "z.nii.gz").read_bytes())
        assert (tmp_path / "z.bin").read_bytes()[:2] == b"\x1f\x8b"
        np.testing.assert_array_equal(read_nifti(tmp_path / "z.bin").data, vol3().data)
        assert gzip.decompress((tmp_path / "z.nii.gz").read_bytes())[344:348] == b"n+1\x00"

    def test_uint8_probability_quantization(self, tmp_path):
        p = np.random.default_rng(3).random((8, 8, 1, 1))
        v = Volume(p, np.eye(4))
        write_nifti(v, tmp_path / "u.nii", dtype="uint8", slope=1 / 255)
        back = read_nifti(tmp_path / "u.nii", ndim=3)
        assert np.max(np.abs(back.data - p)) <= 1 / 255

    def test_int16_auto_scaling_covers_range(self, tmp_path):
        v = Volume(np.linspace(-3.0, 5.0, 60).reshape(3, 4, 5, 1), np.eye(4))
        write_nifti(v, tmp_path / "i.nii", dtype="int16")
        back = read_nifti(tmp_path / "i.nii")
        assert np.max(np.abs(back.data - v.data)) <= 5.0 / 32767

    def test_2d_round_trip(self, tmp_path):
        v = Volume(np.random.default_rng(4).random((5, 7, 2)).astype(np.float32), np.diag([2.0, 3.0, 1.0]))
        write_nifti(v, tmp_path / "two.nii")
        w = read_nifti(tmp_path / "two.nii")
        assert w.ndim == 2
        np.testing.assert_array_equal(w.data, v.data)
        np.testing.assert_allclose(w.affine, v.affine)

    def test_empty_path(self):
        with pytest.raises(IoError):
            write_nifti(vol3(), "")


class TestLabels:
    def test_categorial_one_hot_with_dontcare(self):
        lab = Volume(np.array([[0, 4, 16], [30, -1, 7]], dtype=np.float32), np.eye(3))
        out = labels_to_channels(lab, LabelSpec((4, 16, 30)))
        assert out.num_features == 3
        np.testing.assert_array_equal(out.data[0, 1], [1, 0, 0])
        np.testing.assert_array_equal(out.data[1, 0], [0, 0, 1])
        np.testing.assert_array_equal(out.data[1, 2], [0, 0, 0])
        assert np.isnan(out.data[1, 1]).all()

    def test_spec_num_labels_from_list(self):
        assert LabelSpec((1, 2, 3)).num_labels == 3
        with pytest.raises(ValueError):
            LabelSpec((1, 1))


class TestNormalize:
    def test_max_on_constant(self):
        v = Volume(np.full((4, 4), 5.0), np.eye(3))
        np.testing.assert_allclose(normalize(v, "max").data, 1.0)

    @given(st.integers(0, 10_000))
    @settings(max_examples=25)
    def test_m0s1(self, seed):
        v = Volume(np.random.default_rng(seed).gamma(2.0, size=(9, 11)), np.eye(3))
        out = normalize(v, "m0s1").data
        assert abs(out.mean()) < 1e-6 and abs(out.std() - 1) < 1e-6

    @pytest.mark.parametrize("mode", ["mean", "max"])
    def test_all_zero_degenerate(self, mode):
        with pytest.raises(DegenerateImage):
            normalize(Volume(np.zeros((3, 3)), np.eye(3)), mode)

    def test_constant_m0s1_degenerate(self):
        with pytest.raises(DegenerateImage):
            normalize(Volume(np.ones((3, 3)), np.eye(3)), "m0s1")

    def test_patch_normalization(self):
        x = np.random.default_rng(0).random((6, 6, 2)) * 3 + 1
        y = normalize_patch(x)
        np.testing.assert_allclose(y.mean(axis=(0, 1)), 0, atol=1e-6)


class TestPrefilter:
    def test_none_identical(self):
        v = vol3()
        assert prefilter(v, None, [2, 2, 2]) is v

    @pytest.mark.parametrize("mode", [1.0, "boxcar", "max"])
    def test_constant_preserved(self, mode):
        v = Volume(np.full((9, 9, 1), 3.0), np.eye(3))
        np.testing.assert_allclose(prefilter(v, mode, [3, 2]).data, 3.0, rtol=1e-6)

    def test_impulse_boxcar(self):
        d = np.zeros((9, 9, 1))
        d[4, 4] = 1.0
        out = prefilter(Volume(d, np.eye(3)), "boxcar", [3, 3]).data[..., 0]
        ref = np.zeros((9, 9))
        ref[3:6, 3:6] = 1 / 9
        np.testing.assert_allclose(out, ref, atol=1e-12)

    def test_gaussian_matches_direct_convolution(self):
        rng = np.random.default_rng(1)
        d = rng.random((30, 1))
        sigma = 0.5 * 2.0
        r = int(np.ceil(3 * sigma))
        k = np.exp(-0.5 * (np.arange(-r, r + 1) / sigma) ** 2)
        k /= k.sum()
        padded = np.pad(d[:, 0], r, mode="edge")
        ref = np.array([np.dot(padded[i:i + 2 * r + 1], k) for i in range(30)])
        v = Volume(np.repeat(d[:, None, :], 1, axis=1), np.eye(3))
        out = prefilter(v, 0.5, [2.0, 1.0]).data[:, 0, 0]
        np.testing.assert_allclose(out, ref, atol=1e-12)

    def test_gaussian_preserves_interior_mean(self):
        rng = np.random.default_rng(2)
        d = np.zeros((80, 80, 1))
        d[30:50, 30:50] = rng.random((20, 20, 1))
        out = prefilter(Volume(d, np.eye(3)), 1.0, [2, 2]).data
        assert abs(out.mean() - d.mean()) < 1e-6

    def test_max_and_min_bounds(self):
        v = vol3((7, 7, 7))
        mx = prefilter(v, "max", [2, 3, 2]).data
        assert np.all(mx >= v.data)
        mix = prefilter(v, "mixture", [2, 2, 2]).data
        assert mix.shape[-1] == 3
        assert np.all(mix[..., 2:3] <= v.data + 1e-7)
        assert np.all(mix[..., 1:2] >= v.data - 1e-7)

    def test_factor_below_one(self):
        with pytest.raises(InvalidFactor):
            prefilter(vol3(), "boxcar", [0.5, 1, 1])
