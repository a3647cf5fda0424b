"""Gathering patch data out of volumes/parent patches and scattering it back.

Both directions are expressed through :class:`GatherOp`, a sparse sampling
operator with at most ``2**d`` taps per destination voxel.  Cropping applies
it; stitching applies its adjoint, which is also what backpropagation
through a crop needs.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import geometry
from .geometry import Patch
from .volume import Volume, cached_prefilter


@dataclass(frozen=True, eq=False)
class PatchData:
    patch: Patch
    data: np.ndarray

    def __post_init__(self):
        if tuple(self.data.shape[:-1]) != self.patch.shape:
            raise ValueError(f"data shape {self.data.shape} does not match patch {self.patch.shape}")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.patch.shape


@dataclass(frozen=True, eq=False)
class GatherOp:
    """``dst[j] = sum_k weight[j, k] * src[index[j, k]]`` over flattened grids."""

    index: np.ndarray
    weight: np.ndarray
    src_shape: tuple[int, ...]
    dst_shape: tuple[int, ...]

    @property
    def src_size(self) -> int:
        return int(np.prod(self.src_shape))

    def apply(self, src: np.ndarray) -> np.ndarray:
        """Gather from ``src`` (shape ``src_shape + (f,)``) into ``dst_shape + (f,)``."""
        f = src.shape[-1]
        flat = src.reshape(self.src_size, f)
        if self.index.shape[1] == 1:
            out = flat[self.index[:, 0]] * self.weight[:, :1].astype(flat.dtype)
        else:
            w = self.weight.astype(flat.dtype)
            out = np.einsum("nk,nkf->nf", w, flat[self.index])
        return out.reshape(self.dst_shape + (f,))

    def adjoint(self, dst: np.ndarray) -> np.ndarray:
        """Transpose of :meth:`apply`: scatter-add ``dst`` values onto the source grid."""
        f = dst.shape[-1]
        flat = dst.reshape(-1, f)
        idx = self.index.ravel()
        out = np.empty((self.src_size, f), dtype=np.result_type(dst.dtype, np.float32))
        for c in range(f):
            vals = (self.weight * flat[:, c:c + 1]).ravel()
            out[:, c] = np.bincount(idx, weights=vals, minlength=self.src_size)
        return out.reshape(self.src_shape + (f,))


def gather_op(src_shape: Sequence[int], matrix: np.ndarray, dst_shape: Sequence[int],
              interp: str = "NN") -> GatherOp:
    """Sampling operator for ``u = matrix @ v`` (dst voxel ``v`` -> src coord ``u``).

    Out-of-bounds taps get weight zero (zero padding).
    """
    src_shape = tuple(int(s) for s in src_shape)
    dst_shape = tuple(int(s) for s in dst_shape)
    d = len(src_shape)
    u = geometry.apply(matrix, geometry.grid_coords(dst_shape))
    dims = np.asarray(src_shape)
    strides = np.cumprod((1,) + src_shape[:0:-1])[::-1]
    if interp == "NN":
        idx = np.floor(u + 0.5).astype(np.int64)
        valid = np.all((idx >= 0) & (idx < dims), axis=1)
        flat = np.where(valid, idx @ strides, 0)
        return GatherOp(flat[:, None], valid[:, None].astype(np.float64), src_shape, dst_shape)
    if interp != "linear":
        raise ValueError(f"unknown interpolation {interp!r}")
    base = np.floor(u).astype(np.int64)
    frac = u - base
    corners = geometry.grid_coords((2,) * d).astype(np.int64)
    # per axis: (low, high) index validity and weight
    ok = [(base >= 0) & (base < dims), (base + 1 >= 0) & (base + 1 < dims)]
    wts = [1.0 - frac, frac]
    base_flat = base @ strides
    index = np.empty((len(u), len(corners)), dtype=np.int64)
    weight = np.empty((len(u), len(corners)))
    for k, corner in enumerate(corners):
        w = np.ones(len(u))
        valid = np.ones(len(u), dtype=bool)
        for ax, c in enumerate(corner):
            w = w * wts[c][:, ax]
            valid &= ok[c][:, ax]
        index[:, k] = np.where(valid, base_flat + corner @ strides, 0)
        weight[:, k] = np.where(valid, w, 0.0)
    return GatherOp(index, weight, src_shape, dst_shape)


def undersampling(src: Patch, dst: Patch) -> np.ndarray:
    """Per source axis, how many source voxels one dst voxel step spans (>= 1)."""
    m = geometry.linear_part(geometry.index_map(src, dst))
    return np.maximum(np.linalg.norm(m, axis=1), 1.0)


def crop(src: Volume | PatchData, dst: Patch, interp: str = "NN", prefilter_mode=None) -> PatchData:
    """Resample ``src`` onto the grid of ``dst`` (zero outside ``src``)."""
    if isinstance(src, Volume):
        if prefilter_mode is not None:
            src = cached_prefilter(src, prefilter_mode, undersampling(src.patch, dst))
        src_patch, data = src.patch, src.data
    else:
        src_patch, data = src.patch, src.data
    op = gather_op(src_patch.shape, geometry.index_map(src_patch, dst), dst.shape, interp)
    return PatchData(dst, op.apply(data))


def crop_op(src: Patch, dst: Patch, interp: str = "NN") -> GatherOp:
    return gather_op(src.shape, geometry.index_map(src, dst), dst.shape, interp)


def window_weights(shape: Sequence[int], window: str | None = None) -> np.ndarray:
    """Stitching weight per patch voxel; ``cos`` is 1 at the center and 0 on the edges."""
    shape = tuple(int(s) for s in shape)
    if window in (None, "none"):
        return np.ones(shape)
    if window not in ("cos", "cos2"):
        raise ValueError(f"unknown window {window!r}")
    w = np.ones(shape)
    for axis, s in enumerate(shape):
        if s == 1:
            continue
        v = np.arange(s) / (s - 1)
        profile = np.cos(np.pi * (v - 0.5))
        profile[[0, -1]] = 0.0
        w = w * profile.reshape([-1 if i == axis else 1 for i in range(len(shape))])
    return w * w if window == "cos2" else w


@dataclass(eq=False)
class Canvas:
    """Accumulators for stitching patch outputs onto a fixed grid."""

    patch: Patch
    accum: np.ndarray
    weight: np.ndarray

    @classmethod
    def empty(cls, patch: Patch, num_features: int) -> "Canvas":
        return cls(patch, np.zeros(patch.shape + (num_features,)), np.zeros(patch.shape + (1,)))

    def merge(self, other: "Canvas") -> None:
        self.accum += other.accum
        self.weight += other.weight


def canvas_patch(image: Volume, voxel_mm: Sequence[float]) -> Patch:
    """Grid along the image axes with the given voxel size covering the image box."""
    iv = image.voxel_size
    voxel_mm = np.broadcast_to(np.asarray(voxel_mm, dtype=np.float64), (image.ndim,))
    ratio = voxel_mm / iv
    shape = tuple(max(1, int(round(s))) for s in np.asarray(image.shape) / ratio)
    lin = geometry.linear_part(image.affine) @ np.diag(ratio)
    origin = geometry.apply(image.affine, -0.5 + 0.5 * ratio)
    return Patch(geometry.from_linear(lin, origin), shape)


def make_canvas(image: Volume, dest_voxel, num_features: int, sampling_factor: float = 1.0) -> Canvas:
    return Canvas.empty(canvas_patch(image, np.asarray(dest_voxel) / sampling_factor), num_features)


def scatter(canvas: Canvas, out: PatchData, window: str | None = None, interp: str = "NN") -> None:
    """Add window-weighted patch values (and weights) into ``canvas``."""
    op = crop_op(canvas.patch, out.patch, interp)
    w = window_weights(out.shape, window)[..., None]
    canvas.accum += op.adjoint(w * out.data)
    canvas.weight += op.adjoint(w)


def finalize(canvas: Canvas, alpha: float = 0.0) -> Volume:
    """``accum / sqrt(weight**2 + 3 alpha)``; voxels without contributions are 0."""
    if alpha < 0:
        raise ValueError("sparse suppression alpha must be >= 0")
    denom = np.sqrt(canvas.weight ** 2 + 3.0 * alpha)
    out = np.divide(canvas.accum, denom, out=np.zeros_like(canvas.accum),
                    where=canvas.weight > 0)
    return Volume(out, canvas.patch.affine.copy())


def reconstruct_identity(image: Volume, scheme, window: str | None = None) -> Volume:
    """Stitch the finest-level image crops of a full tree pass (identity blocks).

    This is the built-in self-test of the crop/scatter path: with identity
    blocks every finest patch simply returns its image crop.
    """
    from .sampler import sample_tree_children, tree_roots

    patches = tree_roots(scheme, image)
    for level in range(1, scheme.depth):
        patches = [c for p in patches for c in sample_tree_children(scheme, level, p, None, jitter=0.0)]
    canvas = make_canvas(image, scheme.dest_voxel, image.num_features)
    for p in patches:
        scatter(canvas, crop(image, p, scheme.interp, scheme.prefilter_data), window, scheme.scatter_interp)
    return finalize(canvas, 0.0)
