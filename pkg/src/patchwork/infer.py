"""Whole-volume application: patch distribution, lazy pruning, stitching, output formats."""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import geometry
from .errors import BadThresholdCount, SchemeMismatch
from .geometry import AugmentParams, Patch
from .resample import Canvas, PatchData, canvas_patch, crop, crop_op, finalize, make_canvas, scatter
from .sampler import (Scheme, level_patch, random_child, resolve_scheme, sample_tree_children, snap,
                      tree_roots, uniform_point)
from .train import probabilities, sigmoid
from .volume import Volume, normalize, normalize_patch, prefilter_channels


@dataclass
class InferConfig:
    generate_type: str = "tree"
    num_patches: int = 16
    branch_factor: int | None = None
    num_chunks: int = 1
    lazy_fraction: float = 1.0
    attention_reduce: str = "mean"
    attention_activation: str = "sigmoid"
    window: str | None = None
    sparse_alpha: float = 0.0
    augment: AugmentParams = field(default_factory=AugmentParams)
    out_type: str = "float32"
    ce_threshold: float = 0.0
    sampling_factor: float = 1.0
    level: int | str = -1
    jitter: float = 0.0
    batch_size: int = 64
    threads: int = 1
    zero_forward: bool = False

    def __post_init__(self):
        if self.generate_type not in ("random", "tree"):
            raise ValueError(f"generate_type must be 'random' or 'tree', got {self.generate_type!r}")
        if not 0 < self.lazy_fraction <= 1:
            raise ValueError("lazy_fraction must lie in (0, 1]")
        if self.branch_factor is not None and self.branch_factor < 1:
            raise ValueError("branch_factor must be >= 1")
        if self.num_chunks < 1 or self.num_patches < 1:
            raise ValueError("num_chunks and num_patches must be >= 1")
        if self.attention_reduce not in ("mean", "max", "sum"):
            raise ValueError(f"unknown attention_reduce {self.attention_reduce!r}")
        if self.attention_activation not in ("sigmoid", "none"):
            raise ValueError(f"unknown attention_activation {self.attention_activation!r}")
        if self.sampling_factor <= 0:
            raise ValueError("sampling_factor must be > 0")


def attention_score(x: np.ndarray, num_labels: int, activation: str = "sigmoid",
                    reduce: str = "mean") -> float:
    """Reduce a level output (``(..., c)``) to one attention value."""
    x = getattr(x, "data", x)
    z = np.asarray(x, dtype=np.float64)[..., :num_labels]
    a = sigmoid(z) if activation == "sigmoid" else z
    return float({"mean": np.mean, "max": np.max, "sum": np.sum}[reduce](a))


def lazy_select(scores, fraction: float, k: int | None) -> tuple[np.ndarray, int | None]:
    """Indices (ascending) of the top ``ceil(fraction * n)`` scores; ties go to the lower index."""
    scores = np.asarray(scores, dtype=np.float64)
    n = len(scores)
    keep = min(n, math.ceil(fraction * n - 1e-12))
    order = np.argsort(-scores, kind="stable")[:keep]
    return np.sort(order), k


class IdentityModel:
    """Blocks that return their image input; used to validate the crop/stitch path."""

    output_activation = "none"
    final_block = None

    def __init__(self, scheme_cfg: dict, channels: int = 1):
        self.scheme_cfg = dict(scheme_cfg)
        self._c = channels
        self.depth = int(scheme_cfg.get("depth", 1))

    @property
    def num_labels(self) -> int:
        return self._c

    @property
    def spec(self):
        return _IdentitySpec(None)

    def forward_level(self, level, inputs, forwarded):
        return inputs[..., :self._c].astype(np.float64), None


@dataclass
class _IdentitySpec:
    input_channels: int | None  # None accepts any channel count
    categorical: bool = False
    ndim: int | None = None


def _check_compatible(model, image: Volume, scheme: Scheme) -> None:
    spec = model.spec
    if getattr(spec, "ndim", None) not in (None, image.ndim):
        raise SchemeMismatch(f"model is {spec.ndim}D but image is {image.ndim}D")
    if scheme.depth != model.depth:
        raise SchemeMismatch(f"scheme depth {scheme.depth} != model depth {model.depth}")
    have = prefilter_channels(scheme.prefilter_data, image.num_features)
    if spec.input_channels is not None and spec.input_channels != have:
        raise SchemeMismatch(f"model expects {spec.input_channels} input channels, image gives {have}")


def _level_outputs(model, level: int, inputs: np.ndarray, fwd: np.ndarray | None, batch: int):
    outs = []
    for i in range(0, len(inputs), batch):
        y, _ = model.forward_level(level, inputs[i:i + batch], None if fwd is None else fwd[i:i + batch])
        if level == model.depth - 1 and model.final_block is not None:
            y = model.final_block(y)
        outs.append(np.asarray(y))
    return np.concatenate(outs)


def _activate(model, y: np.ndarray) -> np.ndarray:
    if model.output_activation == "none":
        return y[..., :model.num_labels]
    return probabilities(y[..., :model.num_labels], model.spec.categorical)


def _roots(scheme: Scheme, image: Volume, cfg: InferConfig, rng) -> list[Patch]:
    if cfg.generate_type == "tree":
        return tree_roots(scheme, image, jitter=cfg.jitter, rng=rng)
    out = []
    for _ in range(cfg.num_patches):
        p = level_patch(scheme, 0, uniform_point(image.patch, rng))
        out.append(snap(p, image.patch) if scheme.snapper[0] else p)
    return out


def _children(scheme: Scheme, level: int, parent: Patch, cfg: InferConfig, rng) -> list[Patch]:
    if cfg.generate_type == "tree":
        return sample_tree_children(scheme, level, parent, cfg.branch_factor, jitter=cfg.jitter, rng=rng)
    k = cfg.branch_factor or 1
    return [random_child(scheme, level, parent, rng) for _ in range(k)]


def _run_chunk(image: Volume, model, scheme: Scheme, cfg: InferConfig, rng, levels_wanted):
    """One chunk; returns per-level canvases (``None`` where unused) and per-level patch counts."""
    depth = scheme.depth
    f_out = model.num_labels
    canvases = {}
    for n in levels_wanted:
        vox = scheme.dest_voxel if n == depth - 1 else scheme.voxel_sizes[n]
        canvases[n] = Canvas.empty(canvas_patch(image, np.asarray(vox) / cfg.sampling_factor), f_out)
    counts = []
    patches = _roots(scheme, image, cfg, rng)
    # one augmentation per root, applied to the root's whole subtree
    aug_ids = list(range(len(patches)))
    augs = [None if cfg.augment.is_identity() else
            (geometry.draw_augment_linear(cfg.augment, scheme.ndim, rng), p.center_world) for p in patches]
    prev_out, prev_geo = None, None
    for level in range(depth):
        counts.append(len(patches))
        geo = [p if augs[a] is None else p.with_affine(geometry.transform_about(p.affine, *augs[a]))
               for p, a in zip(patches, aug_ids)]
        inputs = []
        for g in geo:
            data = crop(image, g, scheme.interp, scheme.prefilter_data).data
            inputs.append(normalize_patch(data) if scheme.normalize == "patch_m0s1" else data)
        inputs = np.stack(inputs)
        fwd = None
        if level > 0:
            fwd = np.stack([crop_op(prev_geo[j], g, scheme.interp).apply(prev_out[j])
                            for j, g in zip(parent_idx, geo)])
            if cfg.zero_forward:
                fwd = np.zeros_like(fwd)
        out = _level_outputs(model, level, inputs, fwd, cfg.batch_size)
        if level in canvases:
            interp = scheme.scatter_interp if level == depth - 1 else "linear"
            for g, y in zip(geo, out):
                scatter(canvases[level], PatchData(g, _activate(model, y)), cfg.window, interp)
        if level == depth - 1:
            break
        if cfg.lazy_fraction < 1:
            scores = [attention_score(y, model.num_labels, cfg.attention_activation, cfg.attention_reduce)
                      for y in out]
            keep, _ = lazy_select(scores, cfg.lazy_fraction, cfg.branch_factor)
        else:
            keep = np.arange(len(patches))
        new, parent_idx, new_aug = [], [], []
        for j in keep:
            kids = _children(scheme, level + 1, patches[j], cfg, rng)
            new += kids
            parent_idx += [j] * len(kids)
            new_aug += [aug_ids[j]] * len(kids)
        patches, aug_ids = new, new_aug
        prev_out, prev_geo = out, geo
    return canvases, counts


def predict(image: Volume, model, cfg: InferConfig | None = None,
            rng: np.random.Generator | None = None, stats: dict | None = None) -> Volume:
    """Probability volume on the dest grid (voxel size ``dest_voxel / sampling_factor``)."""
    cfg = cfg or InferConfig()
    ndim = getattr(model.spec, "ndim", None)
    if ndim not in (None, image.ndim):
        raise SchemeMismatch(f"model is {ndim}D but image is {image.ndim}D")
    scheme = resolve_scheme(model.scheme_cfg, image)
    _check_compatible(model, image, scheme)
    image = normalize(image, scheme.normalize)
    depth = scheme.depth
    if cfg.level == "mix":
        levels = list(range(depth))
    else:
        lv = int(cfg.level)
        lv = lv + depth if lv < 0 else lv
        if not 0 <= lv < depth:
            raise SchemeMismatch(f"level {cfg.level} outside a depth-{depth} scheme")
        levels = [lv]
    seeds = np.random.SeedSequence(int((rng or np.random.default_rng(0)).integers(2 ** 63)))
    rngs = [np.random.default_rng(s) for s in seeds.spawn(cfg.num_chunks)]

    def run(i):
        return _run_chunk(image, model, scheme, cfg, rngs[i], levels)

    if cfg.threads > 1 and cfg.num_chunks > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            results = list(pool.map(run, range(cfg.num_chunks)))
    else:
        results = [run(i) for i in range(cfg.num_chunks)]
    canvases = results[0][0]
    for other, _ in results[1:]:  # fixed merge order keeps the sum deterministic
        for n in canvases:
            canvases[n].merge(other[n])
    if stats is not None:
        stats["patches_per_level"] = [r[1] for r in results]
        stats["canvases"] = canvases

    target = make_canvas(image, scheme.dest_voxel, model.num_labels, cfg.sampling_factor).patch
    out = None
    covered = None
    for n in sorted(canvases, reverse=True):
        vol = finalize(canvases[n], cfg.sparse_alpha)
        w = canvases[n].weight
        if canvases[n].patch.shape != target.shape or not np.allclose(canvases[n].patch.affine, target.affine):
            vol = Volume(crop(vol, target, "linear").data, target.affine.copy())
            w = crop(Volume(w, canvases[n].patch.affine), target, "linear").data
        if out is None:
            out, covered = vol.data.copy(), w > 0
        else:
            fill = ~covered[..., 0]
            out[fill] = vol.data[fill]
            covered = covered | (w > 0)
    return Volume(np.clip(out, 0.0, 1.0) if model.output_activation != "none" else out, target.affine.copy())


# ---------------------------------------------------------------------------
# output formatting
# ---------------------------------------------------------------------------


@dataclass
class OutputVolume:
    volume: Volume
    dtype: str
    slope: float | None = None
    suffix: str = ""


def _thresholds(spec: str, c: int) -> np.ndarray:
    _, _, rest = spec.partition(":")
    if not rest:
        return np.full(c, 0.5)
    t = np.array([float(v) for v in rest.split(",") if v.strip()])
    if len(t) != c:
        raise BadThresholdCount(f"{spec!r} gives {len(t)} thresholds for {c} classes")
    return t


def format_output(prob: Volume, out_type: str = "float32", ce_threshold: float = 0.0,
                  categorial_label=None) -> list[OutputVolume]:
    """Convert probabilities to the stored representation(s)."""
    p = np.clip(prob.data, 0.0, 1.0)
    c = p.shape[-1]
    kind = out_type.split(":")[0]
    if kind == "float32":
        return [OutputVolume(prob.replace(p.astype(np.float32)), "float32")]
    if kind == "uint8":
        return [OutputVolume(prob.replace(np.round(p * 255)), "uint8", 1 / 255)]
    if kind == "int16":
        return [OutputVolume(prob.replace(np.round(p * 32767)), "int16", 1 / 32767)]
    if kind == "mask":
        t = _thresholds(out_type, c)
        return [OutputVolume(prob.replace((p > t).astype(np.uint8)), "uint8", suffix="_mask")]
    if kind == "atls":
        t = _thresholds(out_type, c)
        values = np.asarray(categorial_label if categorial_label is not None else np.arange(1, c + 1))
        if len(values) != c:
            raise BadThresholdCount(f"{len(values)} label values for {c} classes")
        masked = np.where(p > t, p, -np.inf)
        best = masked.argmax(axis=-1)
        best_p = np.take_along_axis(p, best[..., None], axis=-1)[..., 0]
        ok = np.isfinite(masked.max(axis=-1)) & (best_p >= ce_threshold)
        idx = np.where(ok, values[best], 0)
        dtype = "uint8" if idx.max(initial=0) < 256 and idx.min(initial=0) >= 0 else "int16"
        return [OutputVolume(prob.replace(idx[..., None].astype(np.float32)), dtype, suffix="_atls")]
    raise ValueError(f"unknown out_type {out_type!r}")
