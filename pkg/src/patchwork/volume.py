"""Volumes, NIfTI-1 I/O, intensity normalization and pre-crop filtering."""
from __future__ import annotations

import gzip
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from . import geometry
from .errors import DegenerateImage, InvalidFactor, IoError, MalformedHeader, UnsupportedDatatype
from .geometry import Patch

log = logging.getLogger(__name__)


@dataclass(eq=False)
class Volume:
    """Image array of shape ``(s_0, ..., s_{d-1}, f)`` plus voxel->world affine."""

    data: np.ndarray
    affine: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.affine = geometry.as_affine(self.affine)
        d = self.affine.shape[0] - 1
        if d not in (2, 3):
            raise ValueError(f"volumes must be 2D or 3D, got d={d}")
        if self.data.ndim == d:
            self.data = self.data[..., None]
        if self.data.ndim != d + 1 or self.data.shape[-1] < 1:
            raise ValueError(f"data shape {self.data.shape} does not match d={d} plus a feature axis")
        if abs(np.linalg.det(self.affine[:d, :d])) <= geometry.DET_EPS:
            raise geometry.SingularAffine("volume affine is singular")

    @property
    def ndim(self) -> int:
        return self.affine.shape[0] - 1

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape[:-1])

    @property
    def num_features(self) -> int:
        return self.data.shape[-1]

    @property
    def voxel_size(self) -> np.ndarray:
        return geometry.voxel_sizes(self.affine)

    @property
    def extent(self) -> np.ndarray:
        return np.asarray(self.shape) * self.voxel_size

    @property
    def patch(self) -> Patch:
        return Patch(self.affine, self.shape)

    def replace(self, data: np.ndarray) -> "Volume":
        return Volume(data, self.affine.copy())


@dataclass(frozen=True)
class LabelSpec:
    categorial_label: tuple[int, ...] | None = None
    categorical: bool = False
    num_labels: int = 1

    def __post_init__(self):
        if self.categorial_label is not None:
            labels = tuple(int(v) for v in self.categorial_label)
            if len(set(labels)) != len(labels):
                raise ValueError(f"categorial_label entries must be distinct: {labels}")
            object.__setattr__(self, "categorial_label", labels)
            object.__setattr__(self, "num_labels", len(labels))
        if self.num_labels < 1:
            raise ValueError("num_labels must be positive")


def labels_to_channels(label: Volume, spec: LabelSpec) -> Volume:
    """Convert a label volume to float channels; dontcare voxels become NaN.

    With ``categorial_label`` the single-channel integer map becomes one-hot
    over the listed values; unlisted values map to all-zero (background).
    Values -1 and NaN are dontcare.
    """
    raw = label.data.astype(np.float64)
    if spec.categorial_label is None:
        out = raw.copy()
        out[out == -1] = np.nan
        if out.shape[-1] != spec.num_labels:
            raise ValueError(f"label has {out.shape[-1]} channels, expected {spec.num_labels}")
        return label.replace(out.astype(np.float32))
    if raw.shape[-1] != 1:
        raise ValueError("categorial_label requires a single-channel label map")
    values = raw[..., 0]
    dontcare = np.isnan(values) | (values == -1)
    out = np.stack([(values == v) for v in spec.categorial_label], axis=-1).astype(np.float32)
    out[dontcare] = np.nan
    return label.replace(out)


# ---------------------------------------------------------------------------
# NIfTI-1
# ---------------------------------------------------------------------------

HEADER_SIZE = 348
VOX_OFFSET = 352

# (name, struct code); 348 bytes total
_HEADER_FIELDS = [
    ("sizeof_hdr", "i"), ("data_type", "10s"), ("db_name", "18s"), ("extents", "i"),
    ("session_error", "h"), ("regular", "c"), ("dim_info", "B"), ("dim", "8h"),
    ("intent_p1", "f"), ("intent_p2", "f"), ("intent_p3", "f"), ("intent_code", "h"),
    ("datatype", "h"), ("bitpix", "h"), ("slice_start", "h"), ("pixdim", "8f"),
    ("vox_offset", "f"), ("scl_slope", "f"), ("scl_inter", "f"), ("slice_end", "h"),
    ("slice_code", "B"), ("xyzt_units", "B"), ("cal_max", "f"), ("cal_min", "f"),
    ("slice_duration", "f"), ("toffset", "f"), ("glmax", "i"), ("glmin", "i"),
    ("descrip", "80s"), ("aux_file", "24s"), ("qform_code", "h"), ("sform_code", "h"),
    ("quatern_b", "f"), ("quatern_c", "f"), ("quatern_d", "f"),
    ("qoffset_x", "f"), ("qoffset_y", "f"), ("qoffset_z", "f"),
    ("srow_x", "4f"), ("srow_y", "4f"), ("srow_z", "4f"),
    ("intent_name", "16s"), ("magic", "4s"),
]
_FORMAT = "".join(code for _, code in _HEADER_FIELDS)
assert struct.calcsize("<" + _FORMAT) == HEADER_SIZE

NIFTI_DTYPES = {
    2: np.dtype(np.uint8),
    4: np.dtype(np.int16),
    8: np.dtype(np.int32),
    16: np.dtype(np.float32),
    64: np.dtype(np.float64),
}
_DTYPE_CODES = {np.dtype(v): k for k, v in NIFTI_DTYPES.items()}
WRITABLE_DTYPES = ("uint8", "int16", "float32")


def _unpack_header(raw: bytes) -> tuple[dict, str]:
    if len(raw) < HEADER_SIZE:
        raise MalformedHeader(f"header truncated ({len(raw)} bytes)")
    for endian in "<>":
        (size,) = struct.unpack(endian + "i", raw[:4])
        if size == HEADER_SIZE:
            break
    else:
        raise MalformedHeader(f"sizeof_hdr is not {HEADER_SIZE}")
    values = struct.unpack(endian + _FORMAT, raw[:HEADER_SIZE])
    hdr, i = {}, 0
    for name, code in _HEADER_FIELDS:
        count = int(code[:-1]) if code[:-1].isdigit() and code[-1] != "s" else 1
        if count == 1:
            hdr[name] = values[i]
        else:
            hdr[name] = values[i:i + count]
        i += count
    return hdr, endian


def _qform_affine(hdr: dict) -> np.ndarray:
    b, c, d = hdr["quatern_b"], hdr["quatern_c"], hdr["quatern_d"]
    a = np.sqrt(max(0.0, 1.0 - (b * b + c * c + d * d)))
    rot = geometry.quaternion_to_matrix((a, b, c, d))
    pixdim = hdr["pixdim"]
    qfac = -1.0 if pixdim[0] < 0 else 1.0
    zooms = np.array([pixdim[1], pixdim[2], pixdim[3] * qfac])
    aff = np.eye(4)
    aff[:3, :3] = rot * zooms
    aff[:3, 3] = (hdr["qoffset_x"], hdr["qoffset_y"], hdr["qoffset_z"])
    return aff


def _header_affine(hdr: dict) -> np.ndarray:
    if hdr["sform_code"] > 0:
        aff = np.eye(4)
        aff[0], aff[1], aff[2] = hdr["srow_x"], hdr["srow_y"], hdr["srow_z"]
        return aff
    if hdr["qform_code"] > 0:
        return _qform_affine(hdr)
    pixdim = [p if p > 0 else 1.0 for p in hdr["pixdim"][1:4]]
    return np.diag([*pixdim, 1.0])


def _read_bytes(path: Path) -> bytes:
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except OSError as exc:
            raise IoError(f"corrupt gzip stream in {path}: {exc}") from exc
    return raw


def read_nifti(path, ndim: int | None = None, dtype=np.float32) -> Volume:
    """Read a NIfTI-1 file (optionally gzipped) into a :class:`Volume`.

    Dimensions past the third (``dim[4]``, ...) become the feature axis. When
    ``ndim`` is None a volume with a single slice along the third axis is
    returned as 2D; pass ``ndim=3`` to keep it 3D.
    """
    if not str(path):
        raise IoError("empty path")
    path = Path(path)
    raw = _read_bytes(path)
    hdr, endian = _unpack_header(raw)
    magic = hdr["magic"]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise MalformedHeader(f"bad NIfTI-1 magic {magic!r}")
    if magic == b"ni1\x00":
        img_path = path.with_suffix(".img") if path.suffix != ".gz" else Path(str(path)[:-7] + ".img")
        raw_data, offset = _read_bytes(img_path), 0
    else:
        raw_data, offset = raw, int(hdr["vox_offset"])
    code = hdr["datatype"]
    if code not in NIFTI_DTYPES:
        raise UnsupportedDatatype(f"NIfTI datatype code {code} is not supported")
    np_dtype = NIFTI_DTYPES[code].newbyteorder(endian)
    dim = hdr["dim"]
    ndims = dim[0]
    if not 1 <= ndims <= 7:
        raise MalformedHeader(f"dim[0]={ndims} out of range")
    shape = [max(1, int(v)) for v in dim[1:ndims + 1]]
    shape += [1] * (3 - len(shape))
    count = int(np.prod(shape))
    nbytes = count * np_dtype.itemsize
    if len(raw_data) < offset + nbytes:
        raise IoError(f"{path}: data truncated (need {nbytes} bytes after offset {offset})")
    arr = np.frombuffer(raw_data, dtype=np_dtype, count=count, offset=offset)
    arr = arr.reshape(shape, order="F")
    spatial, features = shape[:3], int(np.prod(shape[3:])) if len(shape) > 3 else 1
    arr = arr.reshape(spatial + [features], order="F")

    slope, inter = hdr["scl_slope"], hdr["scl_inter"]
    out_dtype = np.float64 if NIFTI_DTYPES[code] == np.float64 else np.dtype(dtype)
    data = arr.astype(out_dtype)
    if np.isfinite(slope) and slope != 0 and (slope != 1 or inter != 0):
        data = data * out_dtype.type(slope) + out_dtype.type(inter)

    affine = _header_affine(hdr)
    if ndim is None:
        ndim = 2 if (ndims == 2 or spatial[2] == 1) else 3
    if ndim == 2:
        if spatial[2] != 1:
            raise MalformedHeader(f"cannot read a volume with {spatial[2]} slices as 2D")
        data = data[:, :, 0, :]
        affine = affine[np.ix_([0, 1, 3], [0, 1, 3])]
    return Volume(np.ascontiguousarray(data), affine)


def _integer_scaling(data: np.ndarray, dtype: np.dtype) -> tuple[float, float]:
    info = np.iinfo(dtype)
    finite = data[np.isfinite(data)]
    if finite.size == 0:
        return 1.0, 0.0
    lo, hi = float(finite.min()), float(finite.max())
    if np.all(finite == np.round(finite)) and lo >= info.min and hi <= info.max:
        return 1.0, 0.0
    if info.min < 0:
        span = max(abs(lo), abs(hi))
        return (span / info.max if span > 0 else 1.0), 0.0
    lo = min(lo, 0.0)
    return ((hi - lo) / info.max if hi > lo else 1.0), lo


def write_nifti(v: Volume, path, dtype: str = "float32", slope: float | None = None,
                inter: float = 0.0) -> None:
    """Write ``v`` as NIfTI-1 (gzipped when ``path`` ends with ``.gz``).

    Integer dtypes store ``round((x - inter) / slope)``; by default the
    scaling is chosen to cover the data range, or ``slope=1`` for data that
    already fits the integer type.
    """
    if not str(path):
        raise IoError("empty path")
    np_dtype = np.dtype(dtype)
    if np_dtype.name not in WRITABLE_DTYPES:
        raise UnsupportedDatatype(f"cannot write dtype {dtype}; use one of {WRITABLE_DTYPES}")
    data = np.asarray(v.data, dtype=np.float64)
    if v.ndim == 2:
        data = data[:, :, None, :]
        aff = np.eye(4)
        aff[np.ix_([0, 1, 3], [0, 1, 3])] = v.affine
    else:
        aff = v.affine
    nx, ny, nz, nf = data.shape

    if np_dtype.kind in "iu":
        if slope is None:
            slope, inter = _integer_scaling(data, np_dtype)
        info = np.iinfo(np_dtype)
        stored = np.clip(np.round((np.nan_to_num(data) - inter) / slope), info.min, info.max)
        stored = stored.astype(np_dtype)
    else:
        stored = data.astype(np_dtype)
        slope, inter = 1.0, 0.0

    dim = [4 if nf > 1 else (3 if v.ndim == 3 else 2), nx, ny, nz, nf, 1, 1, 1]
    zooms = geometry.voxel_sizes(aff)
    pixdim = [1.0, *zooms, 1.0, 1.0, 1.0, 1.0]
    values = dict(
        sizeof_hdr=HEADER_SIZE, data_type=b"", db_name=b"", extents=0, session_error=0,
        regular=b"r", dim_info=0, dim=dim, intent_p1=0.0, intent_p2=0.0, intent_p3=0.0,
        intent_code=0, datatype=_DTYPE_CODES[np_dtype], bitpix=np_dtype.itemsize * 8,
        slice_start=0, pixdim=pixdim, vox_offset=float(VOX_OFFSET), scl_slope=float(slope),
        scl_inter=float(inter), slice_end=0, slice_code=0, xyzt_units=2, cal_max=0.0,
        cal_min=0.0, slice_duration=0.0, toffset=0.0, glmax=0, glmin=0, descrip=b"patchwork",
        aux_file=b"", qform_code=0, sform_code=1, quatern_b=0.0, quatern_c=0.0, quatern_d=0.0,
        qoffset_x=0.0, qoffset_y=0.0, qoffset_z=0.0, srow_x=tuple(aff[0]),
        srow_y=tuple(aff[1]), srow_z=tuple(aff[2]), intent_name=b"", magic=b"n+1\x00",
    )
    flat = []
    for name, code in _HEADER_FIELDS:
        val = values[name]
        flat.extend(val if isinstance(val, (list, tuple)) else [val])
    header = struct.pack("<" + _FORMAT, *flat)
    payload = header + b"\x00" * (VOX_OFFSET - HEADER_SIZE)
    payload += stored.astype(np_dtype.newbyteorder("<")).tobytes(order="F")
    path = Path(path)
    try:
        if path.name.endswith(".gz"):
            with gzip.open(path, "wb") as fh:
                fh.write(payload)
        else:
            path.write_bytes(payload)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# intensity normalization and prefiltering
# ---------------------------------------------------------------------------

NORMALIZE_MODES = (None, "none", "max", "mean", "m0s1", "patch_m0s1")


def normalize(v: Volume, mode: str | None) -> Volume:
    if mode not in NORMALIZE_MODES:
        raise ValueError(f"unknown normalization {mode!r}")
    if mode in (None, "none", "patch_m0s1"):
        return v
    data = v.data.astype(np.float64)
    if mode == "max":
        div = np.abs(data).max()
        if div == 0:
            raise DegenerateImage("cannot max-normalize an all-zero image")
        out = data / div
    elif mode == "mean":
        div = data.mean()
        if div == 0:
            raise DegenerateImage("cannot mean-normalize an image with zero mean")
        out = data / div
    else:
        std = data.std()
        if std == 0:
            raise DegenerateImage("cannot m0s1-normalize a constant image")
        out = (data - data.mean()) / std
    return v.replace(out.astype(v.data.dtype))


def normalize_patch(data: np.ndarray) -> np.ndarray:
    """Per-channel zero-mean unit-std normalization of a single patch."""
    axes = tuple(range(data.ndim - 1))
    mean = data.mean(axis=axes, keepdims=True)
    std = data.std(axis=axes, keepdims=True)
    return (data - mean) / np.where(std > 0, std, 1.0)


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = int(np.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def parse_prefilter(mode) -> tuple[str, float]:
    """Normalize a smoothfac setting: float width, 'boxcar', 'max' or 'mixture'."""
    if mode is None or mode == "none":
        return "none", 0.0
    if isinstance(mode, str):
        if mode in ("boxcar", "max", "mixture"):
            return mode, 0.0
        if mode.startswith("gaussian"):
            _, _, w = mode.partition(":")
            return "gaussian", float(w or 1.0)
        raise ValueError(f"unknown prefilter {mode!r}")
    w = float(mode)
    if w < 0:
        raise ValueError("gaussian prefilter width must be nonnegative")
    return ("gaussian", w) if w > 0 else ("none", 0.0)


def prefilter(v: Volume, mode, factor: Sequence[float]) -> Volume:
    """Smooth ``v`` before cropping at undersampling ``factor`` (per axis, >= 1)."""
    kind, width = parse_prefilter(mode)
    factor = np.broadcast_to(np.asarray(factor, dtype=np.float64), (v.ndim,))
    if np.any(factor < 1) or not np.all(np.isfinite(factor)):
        raise InvalidFactor(f"prefilter factors must be finite and >= 1, got {factor}")
    if kind == "none":
        return v
    data = v.data.astype(np.float64)
    if kind == "gaussian":
        out = data
        for axis, f in enumerate(factor):
            sigma = width * f
            if sigma > 0:
                out = ndimage.correlate1d(out, gaussian_kernel(sigma), axis=axis, mode="nearest")
        return v.replace(out.astype(v.data.dtype))

    sizes = [max(1, int(round(f))) for f in factor]

    def sweep(filt, arr):
        for axis, size in enumerate(sizes):
            if size > 1:
                arr = filt(arr, size, axis=axis, mode="nearest")
        return arr

    if kind == "boxcar":
        out = sweep(ndimage.uniform_filter1d, data)
    elif kind == "max":
        out = sweep(ndimage.maximum_filter1d, data)
    else:
        out = np.concatenate(
            [sweep(ndimage.uniform_filter1d, data), sweep(ndimage.maximum_filter1d, data),
             sweep(ndimage.minimum_filter1d, data)],
            axis=-1,
        )
    return v.replace(out.astype(v.data.dtype))


def prefilter_channels(mode, num_features: int) -> int:
    return 3 * num_features if parse_prefilter(mode)[0] == "mixture" else num_features


def cached_prefilter(v: Volume, mode, factor: Sequence[float]) -> Volume:
    """:func:`prefilter` memoized on the volume (factors rounded to 1e-3)."""
    kind, width = parse_prefilter(mode)
    if kind == "none":
        return v
    factor = np.maximum(np.asarray(factor, dtype=np.float64), 1.0)
    key = (kind, width, tuple(np.round(factor, 3)))
    hit = v._cache.get(key)
    if hit is None:
        hit = prefilter(v, mode, np.asarray(key[2]))
        v._cache[key] = hit
    return hit
