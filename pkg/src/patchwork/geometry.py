"""Homogeneous affine algebra for patches.

An affine is a plain ``(d+1, d+1)`` float64 numpy array mapping homogeneous
voxel indices (voxel centers, origin at voxel ``(0, ..., 0)``) to world
millimetres, the NIfTI sform convention.  A :class:`Patch` pairs such an
affine with an integer matrix shape; its box spans voxel coordinates
``[-0.5, s - 0.5]`` along every axis.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import SingularAffine

DET_EPS = 1e-12


def as_affine(matrix) -> np.ndarray:
    """Validate and return ``matrix`` as a float64 homogeneous affine."""
    a = np.array(matrix, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] < 2:
        raise ValueError(f"affine must be square (d+1)x(d+1), got shape {a.shape}")
    d = a.shape[0] - 1
    bottom = np.zeros(d + 1)
    bottom[-1] = 1.0
    if not np.allclose(a[-1], bottom, atol=1e-12, rtol=0):
        raise ValueError("affine last row must be (0, ..., 0, 1)")
    return a


def identity(d: int) -> np.ndarray:
    return np.eye(d + 1)


def translation(*t: float) -> np.ndarray:
    a = np.eye(len(t) + 1)
    a[:-1, -1] = t
    return a


def scaling(*s: float) -> np.ndarray:
    return np.diag([*s, 1.0]).astype(np.float64)


def from_linear(linear: np.ndarray, offset=None) -> np.ndarray:
    linear = np.asarray(linear, dtype=np.float64)
    d = linear.shape[0]
    a = np.eye(d + 1)
    a[:d, :d] = linear
    if offset is not None:
        a[:d, d] = offset
    return a


def rotation_2d(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def quaternion_to_matrix(q: Sequence[float]) -> np.ndarray:
    """Rotation matrix of the (normalized) quaternion ``(w, x, y, z)``."""
    w, x, y, z = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def compose(*affines: np.ndarray) -> np.ndarray:
    """Matrix product ``a @ b @ ...`` (rightmost applied first)."""
    out = affines[0]
    for a in affines[1:]:
        out = out @ a
    return out


def invert(a: np.ndarray) -> np.ndarray:
    d = a.shape[0] - 1
    lin = a[:d, :d]
    if abs(np.linalg.det(lin)) <= DET_EPS:
        raise SingularAffine(f"linear part is singular (det={np.linalg.det(lin):.3g})")
    inv_lin = np.linalg.inv(lin)
    out = np.eye(d + 1)
    out[:d, :d] = inv_lin
    out[:d, d] = -inv_lin @ a[:d, d]
    return out


def apply(a: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Apply affine ``a`` to points of shape ``(..., d)``."""
    d = a.shape[0] - 1
    points = np.asarray(points, dtype=np.float64)
    return points @ a[:d, :d].T + a[:d, d]


def linear_part(a: np.ndarray) -> np.ndarray:
    d = a.shape[0] - 1
    return a[:d, :d]


def voxel_sizes(a: np.ndarray) -> np.ndarray:
    """Column norms of the linear part: mm per voxel step along each axis."""
    return np.linalg.norm(linear_part(a), axis=0)


@dataclass(frozen=True, eq=False)
class Patch:
    """A located voxel grid: ``affine`` (voxel -> world) plus matrix ``shape``."""

    affine: np.ndarray
    shape: tuple[int, ...]

    def __post_init__(self):
        a = as_affine(self.affine)
        shape = tuple(int(s) for s in self.shape)
        if len(shape) != a.shape[0] - 1:
            raise ValueError(f"shape {shape} does not match affine dimension {a.shape[0] - 1}")
        if any(s < 1 for s in shape):
            raise ValueError(f"patch shape components must be >= 1, got {shape}")
        a.setflags(write=False)
        object.__setattr__(self, "affine", a)
        object.__setattr__(self, "shape", shape)

    @property
    def ndim(self) -> int:
        return len(self.shape)

    @property
    def linear(self) -> np.ndarray:
        return linear_part(self.affine)

    @property
    def voxel_size(self) -> np.ndarray:
        return voxel_sizes(self.affine)

    @property
    def extent(self) -> np.ndarray:
        return np.asarray(self.shape) * self.voxel_size

    @property
    def center_voxel(self) -> np.ndarray:
        return (np.asarray(self.shape, dtype=np.float64) - 1.0) / 2.0

    @property
    def center_world(self) -> np.ndarray:
        return apply(self.affine, self.center_voxel)

    def corners_voxel(self) -> np.ndarray:
        """The ``2**d`` box corners in voxel coordinates."""
        lo = -0.5 * np.ones(self.ndim)
        hi = np.asarray(self.shape) - 0.5
        grids = np.meshgrid(*[(l, h) for l, h in zip(lo, hi)], indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=-1)

    def corners_world(self) -> np.ndarray:
        return apply(self.affine, self.corners_voxel())

    def contains(self, points_world, tol: float = 1e-6) -> np.ndarray:
        """Whether world points lie inside the patch box (``tol`` in mm)."""
        pts = np.atleast_2d(points_world)
        u = apply(invert(self.affine), pts)
        tol_vox = tol / self.voxel_size
        inside = (u >= -0.5 - tol_vox) & (u <= np.asarray(self.shape) - 0.5 + tol_vox)
        return inside.all(axis=-1)

    def with_affine(self, affine: np.ndarray) -> "Patch":
        return Patch(affine, self.shape)


def patch_at(center_world, linear: np.ndarray, shape: Sequence[int]) -> Patch:
    """Patch with the given linear part whose center sits at ``center_world``."""
    shape = tuple(int(s) for s in shape)
    cv = (np.asarray(shape, dtype=np.float64) - 1.0) / 2.0
    offset = np.asarray(center_world, dtype=np.float64) - linear @ cv
    return Patch(from_linear(linear, offset), shape)


def index_map(src: Patch, dst: Patch) -> np.ndarray:
    """Affine taking ``dst`` voxel coordinates to continuous ``src`` voxel coordinates.

    The world point of dst voxel ``v`` equals the world point of the returned
    src coordinate: ``A_src @ u == A_dst @ v``.
    """
    return invert(src.affine) @ dst.affine


def grid_coords(shape: Sequence[int]) -> np.ndarray:
    """All voxel index coordinates of ``shape`` as a ``(prod(shape), d)`` array (C order)."""
    axes = [np.arange(s, dtype=np.float64) for s in shape]
    grids = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=-1)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


def _as_tuple(value, d: int, name: str) -> tuple[float, ...]:
    if value is None:
        return (0.0,) * d
    if np.isscalar(value):
        return (float(value),) * d
    value = tuple(float(v) for v in value)
    if len(value) != d:
        raise ValueError(f"{name} needs {d} entries, got {len(value)}")
    return value


@dataclass(frozen=True)
class AugmentParams:
    """Random affine augmentation strengths.

    ``dphi`` is the angular width in radians (a scalar in 2D; a scalar or
    3-tuple of per-axis quaternion widths in 3D).  ``dscale`` holds the
    standard deviations of the per-axis log scale factors.
    """

    dphi: float | tuple[float, ...] = 0.0
    flip: tuple[int, ...] = ()
    dscale: tuple[float, ...] = ()
    independent: bool = False

    def __post_init__(self):
        if any(f not in (0, 1) for f in self.flip):
            raise ValueError(f"flip entries must be 0 or 1, got {self.flip}")
        if any(s < 0 for s in self.dscale):
            raise ValueError(f"dscale entries must be nonnegative, got {self.dscale}")

    @classmethod
    def from_dict(cls, cfg: dict | None, d: int) -> "AugmentParams":
        if not cfg:
            return cls()
        unknown = set(cfg) - {"dphi", "flip", "dscale", "independent", "independent_augmentation"}
        if unknown:
            raise ValueError(f"unknown augment keys {sorted(unknown)}")
        dphi = cfg.get("dphi", 0.0)
        if not np.isscalar(dphi):
            dphi = tuple(float(v) for v in dphi)
        return cls(
            dphi=dphi,
            flip=tuple(int(v) for v in _as_tuple(cfg.get("flip"), d, "flip")),
            dscale=_as_tuple(cfg.get("dscale"), d, "dscale"),
            independent=bool(cfg.get("independent", cfg.get("independent_augmentation", False))),
        )

    def is_identity(self) -> bool:
        dphi = np.atleast_1d(self.dphi)
        return not (np.any(dphi != 0) or any(self.flip) or any(s != 0 for s in self.dscale))


def _draw_rotation(dphi, d: int, rng: np.random.Generator) -> np.ndarray:
    if d == 2:
        if not np.isscalar(dphi):
            raise ValueError("dphi must be a scalar in 2D")
        return rotation_2d(rng.normal(0.0, float(dphi)))
    if d == 3:
        widths = np.broadcast_to(np.asarray(dphi, dtype=np.float64), (3,))
        n = rng.normal(0.0, 1.0, size=3) * widths
        return quaternion_to_matrix((1.0, *n))
    raise ValueError(f"augmentation supports d in (2, 3), got {d}")


def draw_augment_factors(params: AugmentParams, d: int, rng: np.random.Generator):
    """Draw ``(R1, sigma, R2)`` with ``sigma`` the signed diagonal of Sigma."""
    flip = params.flip or (0,) * d
    dscale = params.dscale or (0.0,) * d
    r1 = _draw_rotation(params.dphi, d, rng)
    log_scale = rng.normal(0.0, 1.0, size=d) * np.asarray(dscale)
    signs = np.where(np.asarray(flip) == 1, np.where(rng.random(d) < 0.5, -1.0, 1.0), 1.0)
    r2 = _draw_rotation(params.dphi, d, rng)
    return r1, np.exp(log_scale) * signs, r2


def draw_augment_linear(params: AugmentParams, d: int, rng: np.random.Generator) -> np.ndarray:
    """The ``d x d`` matrix ``R1 @ diag(sigma) @ R2``."""
    r1, sigma, r2 = draw_augment_factors(params, d, rng)
    return r1 @ np.diag(sigma) @ r2


def transform_about(base: np.ndarray, t_linear: np.ndarray, pivot_world) -> np.ndarray:
    """Left-multiply ``base``'s linear part by ``t_linear`` keeping ``pivot_world`` fixed."""
    d = base.shape[0] - 1
    pivot = np.asarray(pivot_world, dtype=np.float64)
    out = np.eye(d + 1)
    out[:d, :d] = t_linear @ base[:d, :d]
    # pivot's voxel position under base must map to the same world point
    pivot_vox = np.linalg.solve(base[:d, :d], pivot - base[:d, d])
    out[:d, d] = pivot - out[:d, :d] @ pivot_vox
    return out


def sample_augment(base: np.ndarray, params: AugmentParams, rng: np.random.Generator,
                   pivot=None) -> np.ndarray:
    """Randomly rotate/scale/flip the linear part of ``base``.

    The world point ``pivot`` (default: the world position of voxel 0) is
    left in place.  Zero-strength params return ``base`` unchanged.
    """
    if params.is_identity():
        return base
    d = base.shape[0] - 1
    t_lin = draw_augment_linear(params, d, rng)
    if pivot is None:
        pivot = base[:d, d]
    return transform_about(base, t_lin, pivot)


def augment_patch(patch: Patch, params: AugmentParams, rng: np.random.Generator) -> Patch:
    """Augment a patch about its own center."""
    if params.is_identity():
        return patch
    return patch.with_affine(sample_augment(patch.affine, params, rng, pivot=patch.center_world))
