"""Multi-scale patching schemes and patch chain generation."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import geometry
from .errors import ChildTooLarge, InvalidScheme
from .geometry import Patch, patch_at
from .volume import Volume, parse_prefilter

SCHEME_KEYS = {
    "depth", "ndim", "patch_size", "fov_mm", "fov_rel", "destvox_mm", "destvox_rel", "system",
    "snapper", "interp_type", "scatter_type", "smoothfac_data", "smoothfac_label",
    "normalize_input", "categorial_label", "categorical", "num_labels",
}
INSIDE_TOL = 1e-9


def _interp_name(value: str) -> str:
    if value in ("NN", "nn", "nearest"):
        return "NN"
    if value in ("lin", "linear"):
        return "linear"
    raise InvalidScheme(f"interpolation must be 'NN' or 'lin', got {value!r}")


@dataclass(frozen=True, eq=False)
class Scheme:
    """A resolved patching scheme: per-level extents and voxel sizes in mm."""

    depth: int
    ndim: int
    patch_shape: tuple[tuple[int, ...], ...]
    extents: tuple[np.ndarray, ...]
    voxel_sizes: tuple[np.ndarray, ...]
    fov: np.ndarray
    dest_voxel: np.ndarray
    orient: np.ndarray
    system: str = "matrix"
    snapper: tuple[int, ...] = ()
    interp: str = "NN"
    scatter_interp: str = "NN"
    prefilter_data: object = None
    prefilter_label: object = None
    normalize: str | None = None

    def linear(self, level: int) -> np.ndarray:
        return self.orient @ np.diag(self.voxel_sizes[level])


def _per_axis(value, d: int, name: str) -> np.ndarray:
    arr = np.broadcast_to(np.asarray(value, dtype=np.float64), (d,)).copy()
    if np.any(~np.isfinite(arr)) or np.any(arr <= 0):
        raise InvalidScheme(f"{name} must be positive, got {value}")
    return arr


def _patch_shapes(value, depth: int, d: int) -> tuple[tuple[int, ...], ...]:
    if np.isscalar(value):
        shapes = [(int(value),) * d] * depth
    elif len(value) and not np.isscalar(value[0]):
        if len(value) != depth:
            raise InvalidScheme(f"patch_size lists {len(value)} levels, depth is {depth}")
        shapes = [tuple(int(s) for s in v) for v in value]
    else:
        shapes = [tuple(int(s) for s in value)] * depth
    for s in shapes:
        if len(s) != d or any(v < 1 for v in s):
            raise InvalidScheme(f"bad patch_size {s} for ndim={d}")
    return tuple(shapes)


def resolve_scheme(cfg: dict, image: Volume) -> Scheme:
    """Resolve per-level extents against ``image``.

    Intermediate extents interpolate geometrically between the top-level
    field of view and the finest extent ``patch_shape * dest_voxel``.
    """
    unknown = set(cfg) - SCHEME_KEYS
    if unknown:
        raise InvalidScheme(f"unknown scheme keys {sorted(unknown)}")
    depth = int(cfg.get("depth", 1))
    if depth < 1:
        raise InvalidScheme("depth must be >= 1")
    d = int(cfg.get("ndim", image.ndim))
    if d != image.ndim:
        raise InvalidScheme(f"scheme ndim={d} but image is {image.ndim}D")
    if ("fov_mm" in cfg) == ("fov_rel" in cfg):
        raise InvalidScheme("give exactly one of fov_mm / fov_rel")
    if ("destvox_mm" in cfg) == ("destvox_rel" in cfg):
        raise InvalidScheme("give exactly one of destvox_mm / destvox_rel")
    shapes = _patch_shapes(cfg.get("patch_size", 32), depth, d)
    if "fov_mm" in cfg:
        fov = _per_axis(cfg["fov_mm"], d, "fov_mm")
    else:
        fov = _per_axis(cfg["fov_rel"], d, "fov_rel") * image.extent
    if "destvox_mm" in cfg:
        dest = _per_axis(cfg["destvox_mm"], d, "destvox_mm")
    else:
        dest = _per_axis(cfg["destvox_rel"], d, "destvox_rel") * image.voxel_size

    finest = np.asarray(shapes[-1]) * dest
    if depth == 1:
        extents = [finest]
    else:
        if np.any(finest >= fov):
            raise InvalidScheme(f"finest extent {finest} must be smaller than fov {fov}")
        ratio = finest / fov
        extents = [fov * ratio ** (n / (depth - 1)) for n in range(depth)]
        extents[-1] = finest
    for a, b in zip(extents, extents[1:]):
        if np.any(b >= a):
            raise InvalidScheme("extents must strictly decrease from level to level")
    vox = [e / np.asarray(s) for e, s in zip(extents, shapes)]

    system = cfg.get("system", "matrix")
    if system == "world":
        orient = np.eye(d)
    elif system == "matrix":
        lin = geometry.linear_part(image.affine)
        orient = lin / np.linalg.norm(lin, axis=0)
    else:
        raise InvalidScheme(f"system must be 'world' or 'matrix', got {system!r}")
    snapper = cfg.get("snapper", 1)
    snapper = (int(snapper),) * depth if np.isscalar(snapper) else tuple(int(s) for s in snapper)
    if len(snapper) != depth:
        raise InvalidScheme(f"snapper needs {depth} entries")
    label_filter = cfg.get("smoothfac_label")
    if label_filter is not None and parse_prefilter(label_filter)[0] == "mixture":
        raise InvalidScheme("smoothfac_label cannot be 'mixture' (it would triple the target channels)")
    return Scheme(
        depth=depth, ndim=d, patch_shape=shapes, extents=tuple(extents),
        voxel_sizes=tuple(vox), fov=fov, dest_voxel=dest, orient=orient, system=system,
        snapper=snapper, interp=_interp_name(cfg.get("interp_type", "NN")),
        scatter_interp=_interp_name(cfg.get("scatter_type", "NN")),
        prefilter_data=cfg.get("smoothfac_data"), prefilter_label=cfg.get("smoothfac_label"),
        normalize=cfg.get("normalize_input"),
    )


def level_patch(scheme: Scheme, level: int, center_world) -> Patch:
    return patch_at(center_world, scheme.linear(level), scheme.patch_shape[level])


def _bbox_in(parent: Patch, child: Patch) -> tuple[np.ndarray, np.ndarray]:
    u = geometry.apply(geometry.invert(parent.affine), child.corners_world())
    return u.min(axis=0), u.max(axis=0)


def snap(child: Patch, parent: Patch) -> Patch:
    """Shift ``child`` minimally so that its box lies inside ``parent``'s box."""
    mn, mx = _bbox_in(parent, child)
    lo = np.full(parent.ndim, -0.5)
    hi = np.asarray(parent.shape) - 0.5
    width, room = mx - mn, hi - lo
    tol = 1e-6 / parent.voxel_size
    if np.any(width > room + tol):
        raise ChildTooLarge(f"child extent exceeds parent extent along some axis")
    shift = np.zeros(parent.ndim)
    low_out = mn < lo - INSIDE_TOL
    high_out = mx > hi + INSIDE_TOL
    tight = width > room - INSIDE_TOL
    shift = np.where(low_out, lo - mn, shift)
    shift = np.where(high_out, hi - mx, shift)
    shift = np.where(tight & (low_out | high_out), (lo + hi) / 2 - (mn + mx) / 2, shift)
    if not np.any(shift):
        return child
    world_shift = parent.linear @ shift
    aff = child.affine.copy()
    aff[:-1, -1] += world_shift
    return Patch(aff, child.shape)


def uniform_point(parent: Patch, rng: np.random.Generator) -> np.ndarray:
    """World point drawn uniformly from ``parent``'s box."""
    u = rng.uniform(-0.5, np.asarray(parent.shape) - 0.5)
    return geometry.apply(parent.affine, u)


def random_child(scheme: Scheme, level: int, parent: Patch, rng: np.random.Generator,
                 target=None) -> Patch:
    """A level-``level`` patch with center uniform in ``parent``.

    With a world point ``target`` the child is drawn uniformly among the
    positions that contain it (and snapped, which keeps it contained).
    """
    if target is None:
        center = uniform_point(parent, rng)
    else:
        half = 0.5 * scheme.extents[level] * (1 - 1e-6)
        offset = scheme.orient @ rng.uniform(-half, half)
        center = np.asarray(target, dtype=np.float64) + offset
    child = level_patch(scheme, level, center)
    if scheme.snapper[level]:
        return snap(child, parent)
    if target is not None and not parent.contains(child.center_world)[0]:
        # keep the center inside the parent for non-snapping levels
        u = geometry.apply(geometry.invert(parent.affine), child.center_world)
        u = np.clip(u, -0.5, np.asarray(parent.shape) - 0.5)
        child = level_patch(scheme, level, geometry.apply(parent.affine, u))
    return child


def sample_random_chain(scheme: Scheme, image: Volume, rng: np.random.Generator,
                        target=None) -> list[Patch]:
    """Coarse-to-fine chain; level 0 is placed in the image, each child in its parent."""
    chain = []
    parent = image.patch
    for level in range(scheme.depth):
        parent = random_child(scheme, level, parent, rng, target=target)
        chain.append(parent)
    return chain


def tree_grid(scheme: Scheme, level: int, parent: Patch) -> np.ndarray:
    """Centers (parent voxel coords) of the minimal regular grid of level-``level``
    children that covers ``parent``; shape ``(G, d)``."""
    probe = level_patch(scheme, level, parent.center_world)
    mn, mx = _bbox_in(parent, probe)
    cw = mx - mn
    lo = np.full(parent.ndim, -0.5)
    hi = np.asarray(parent.shape) - 0.5
    axes = []
    for i in range(parent.ndim):
        pw = hi[i] - lo[i]
        m = max(1, int(np.ceil(pw / cw[i] - 1e-9)))
        if m == 1:
            axes.append(np.array([(lo[i] + hi[i]) / 2]))
        else:
            axes.append(np.linspace(lo[i] + cw[i] / 2, hi[i] - cw[i] / 2, m))
    grids = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=-1)


def sample_tree_children(scheme: Scheme, level: int, parent: Patch, branch_factor: int | None,
                         jitter: float = 0.0, rng: np.random.Generator | None = None
                         ) -> list[Patch]:
    """Children of ``parent`` on its covering grid.

    ``branch_factor=None`` (or at least the grid size) returns the full grid,
    ``1`` a single centered child, any other ``k`` a random subset of ``k``
    grid positions.  Centers are displaced by up to ``jitter`` times half the
    child extent, then snapped; nonzero jitter can leave coverage gaps.
    """
    grid = tree_grid(scheme, level, parent)
    g = len(grid)
    if branch_factor is not None and branch_factor < 1:
        raise ValueError("branch_factor must be >= 1")
    if rng is None:
        rng = np.random.default_rng(0)
    if branch_factor == 1:
        grid = ((np.asarray(parent.shape) - 1.0) / 2.0)[None]
    elif branch_factor is not None and branch_factor < g:
        grid = grid[np.sort(rng.choice(g, size=branch_factor, replace=False))]
    probe = level_patch(scheme, level, parent.center_world)
    cw = np.subtract(*_bbox_in(parent, probe)[::-1])
    out = []
    for u in grid:
        if jitter > 0:
            u = u + rng.uniform(-1, 1, size=len(u)) * jitter * cw / 2
        child = level_patch(scheme, level, geometry.apply(parent.affine, u))
        if jitter > 0 and scheme.snapper[level]:
            child = snap(child, parent)
        out.append(child)
    return out


def tree_roots(scheme: Scheme, image: Volume, jitter: float = 0.0,
               rng: np.random.Generator | None = None) -> list[Patch]:
    """Level-0 patches tiling the whole image."""
    return sample_tree_children(scheme, 0, image.patch, None, jitter=jitter, rng=rng)


def is_nested(child: Patch, parent: Patch, tol: float = 1e-6) -> bool:
    return bool(parent.contains(child.corners_world(), tol=tol).all())


def chain_is_nested(chain: Sequence[Patch], tol: float = 1e-6) -> bool:
    return all(is_nested(c, p, tol) for p, c in zip(chain, chain[1:]))
