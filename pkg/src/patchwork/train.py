"""Losses, balanced patch-set drawing, the two-loop training procedure and hard mining."""
from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import geometry
from .errors import AllMasked, DivergedTraining, NoLabels, ShapeMismatch
from .geometry import AugmentParams, Patch
from .model import PatchworkModel, chain_ops, crop_inputs
from .resample import GatherOp, crop
from .sampler import Scheme, resolve_scheme, sample_random_chain
from .volume import Volume, normalize

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _mask(target: np.ndarray, dontcare: bool, per_voxel: bool) -> np.ndarray:
    if not dontcare:
        m = np.ones(target.shape, dtype=bool)
    else:
        m = ~(np.isnan(target) | (target == -1))
    if per_voxel:
        m = m.all(axis=-1, keepdims=True)
    return m


def bce_terms(logits: np.ndarray, target: np.ndarray, dontcare: bool = True):
    """Elementwise sigmoid cross-entropy, its dL/dz and the validity mask."""
    z = np.asarray(logits, dtype=np.float64)
    if z.shape != target.shape:
        raise ShapeMismatch(f"logits {z.shape} vs target {target.shape}")
    mask = _mask(target, dontcare, per_voxel=False)
    t = np.where(mask, target, 0.0)
    elem = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    grad = sigmoid(z) - t
    return np.where(mask, elem, 0.0), np.where(mask, grad, 0.0), mask


def loss_bce(logits, target, dontcare: bool = True) -> tuple[float, np.ndarray]:
    """Mean sigmoid binary cross-entropy over unmasked voxels x labels."""
    logits, target = _unwrap(logits), _unwrap(target)
    elem, grad, mask = bce_terms(logits, target, dontcare)
    count = mask.sum()
    if count == 0:
        raise AllMasked("every target voxel is dontcare")
    return float(elem.sum() / count), grad / count


def categorical_terms(logits: np.ndarray, target: np.ndarray, dontcare: bool = True,
                      implicit_background: bool = True):
    """Per-voxel softmax cross-entropy terms.

    With ``implicit_background`` a fixed zero logit is prepended for the
    background class whose target is ``1 - sum(target)``.
    """
    z = np.asarray(logits, dtype=np.float64)
    if z.shape != target.shape:
        raise ShapeMismatch(f"logits {z.shape} vs target {target.shape}")
    mask = _mask(target, dontcare, per_voxel=True)
    t = np.where(mask, target, 0.0)
    if implicit_background:
        z = np.concatenate([np.zeros(z.shape[:-1] + (1,)), z], axis=-1)
        t = np.concatenate([1.0 - t.sum(axis=-1, keepdims=True), t], axis=-1)
    zs = z - z.max(axis=-1, keepdims=True)
    logp = zs - np.log(np.exp(zs).sum(axis=-1, keepdims=True))
    elem = -(t * logp).sum(axis=-1, keepdims=True)
    grad = np.exp(logp) * t.sum(axis=-1, keepdims=True) - t
    if implicit_background:
        grad = grad[..., 1:]
    return np.where(mask, elem, 0.0), np.where(mask, grad, 0.0), mask


def loss_categorical(logits, target, dontcare: bool = True,
                     implicit_background: bool = True) -> tuple[float, np.ndarray]:
    logits, target = _unwrap(logits), _unwrap(target)
    elem, grad, mask = categorical_terms(logits, target, dontcare, implicit_background)
    count = mask.sum()
    if count == 0:
        raise AllMasked("every target voxel is dontcare")
    return float(elem.sum() / count), grad / count


def probabilities(logits: np.ndarray, categorical: bool) -> np.ndarray:
    """Class probabilities from raw logits (background dropped for softmax)."""
    z = np.asarray(logits, dtype=np.float64)
    if not categorical:
        return sigmoid(z)
    z = np.concatenate([np.zeros(z.shape[:-1] + (1,)), z], axis=-1)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return (e / e.sum(axis=-1, keepdims=True))[..., 1:]


def dice_score(prob, target, threshold: float = 0.5) -> np.ndarray:
    """Per-label Dice of ``prob > threshold`` against ``target > 0.5``."""
    prob, target = _unwrap(prob), _unwrap(target)
    axes = tuple(range(prob.ndim - 1))
    p = prob > threshold
    t = np.nan_to_num(target, nan=0.0) > 0.5
    inter = (p & t).sum(axis=axes)
    total = p.sum(axis=axes) + t.sum(axis=axes)
    return np.where(total > 0, 2.0 * inter / np.maximum(total, 1), 1.0)


def _unwrap(x):
    return x.data if hasattr(x, "data") and hasattr(x, "patch") else np.asarray(x)


# ---------------------------------------------------------------------------
# configuration and samples
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BalanceSpec:
    ratio: float = 0.0
    label_weight: tuple[float, ...] | None = None
    autoweight: bool = False

    def __post_init__(self):
        if not 0 <= self.ratio <= 1:
            raise ValueError("balance ratio must be in [0, 1]")
        if self.label_weight is not None:
            w = np.asarray(self.label_weight, dtype=np.float64)
            if np.any(w < 0) or not np.any(w > 0):
                raise ValueError("label weights must be >= 0 and not all zero")


@dataclass
class TrainConfig:
    num_its: int = 10
    epochs: int = 1
    num_patches: int = 8
    batch_size: int = 16
    intermediate_loss: bool = True
    hard_mining: float = 0.0
    hard_mining_order: str = "loss"
    hard_mining_maxage: int = 3
    augment: AugmentParams = field(default_factory=AugmentParams)
    balance: BalanceSpec = field(default_factory=BalanceSpec)
    dontcare: bool = True
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    parallel: bool = False
    zero_forward: bool = False

    def __post_init__(self):
        if self.num_its < 1 or self.num_patches < 1 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("num_its, num_patches and batch_size must be >= 1, epochs >= 0")
        if not 0 <= self.hard_mining < 1:
            raise ValueError("hard_mining must lie in [0, 1)")
        if self.hard_mining_order not in ("loss", "f1", "balance"):
            raise ValueError(f"unknown hard_mining_order {self.hard_mining_order!r}")


@dataclass(eq=False)
class Sample:
    """One training stack: chain, per-level inputs/targets and crop operators."""

    chain: list[Patch]
    inputs: list[np.ndarray]
    targets: list[np.ndarray | None]
    ops: list[GatherOp]
    image_index: int = 0
    age: int = 0
    last_loss: float = math.nan
    last_dice: float = math.nan
    labels_present: np.ndarray | None = None


@dataclass(eq=False)
class TrainingImage:
    """An image/label pair prepared for repeated patch drawing."""

    image: Volume
    label: Volume
    scheme: Scheme
    dontcare: Volume | None = None
    on_voxels: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def prepare(cls, image: Volume, label: Volume, scheme_cfg: dict) -> "TrainingImage":
        scheme = resolve_scheme(scheme_cfg, image)
        image = normalize(image, scheme.normalize)
        if label.shape != image.shape:
            raise ShapeMismatch(f"label grid {label.shape} != image grid {image.shape}")
        nan = np.isnan(label.data)
        dontcare = None
        if nan.any():
            dontcare = label.replace(nan.any(axis=-1, keepdims=True).astype(np.float32))
            label = label.replace(np.where(nan, 0.0, label.data).astype(np.float32))
        flat = label.data.reshape(-1, label.num_features)
        on = [np.flatnonzero(flat[:, c] > 0.5) for c in range(label.num_features)]
        return cls(image, label, scheme, dontcare, on)


def crop_label(t: TrainingImage, patch: Patch) -> np.ndarray:
    s = t.scheme
    out = crop(t.label, patch, s.interp, s.prefilter_label).data.astype(np.float32)
    if t.dontcare is not None:
        m = crop(t.dontcare, patch, s.interp).data
        out[np.broadcast_to(m > 0, out.shape)] = np.nan
    return out


def _apply_augment(chain: list[Patch], params: AugmentParams, rng) -> list[Patch]:
    if params.is_identity():
        return chain
    if params.independent:
        return [geometry.augment_patch(p, params, rng) for p in chain]
    t = geometry.draw_augment_linear(params, chain[0].ndim, rng)
    pivot = chain[-1].center_world
    return [p.with_affine(geometry.transform_about(p.affine, t, pivot)) for p in chain]


def _balanced_target(t: TrainingImage, balance: BalanceSpec, rng) -> np.ndarray | None:
    vols = np.array([len(v) for v in t.on_voxels], dtype=np.float64)
    if not vols.any():
        return None
    w = np.ones(len(vols)) if balance.label_weight is None else np.asarray(balance.label_weight, float)
    if len(w) != len(vols):
        raise ValueError(f"label_weight has {len(w)} entries for {len(vols)} labels")
    # labels act as spatial probabilities; autoweight divides by label volume
    p = np.where(vols > 0, w * (1.0 if balance.autoweight else vols), 0.0)
    if p.sum() == 0:
        return None
    lab = rng.choice(len(vols), p=p / p.sum())
    flat = t.on_voxels[lab][rng.integers(len(t.on_voxels[lab]))]
    idx = np.array(np.unravel_index(flat, t.image.shape), dtype=np.float64)
    return geometry.apply(t.image.affine, idx)


def make_sample(t: TrainingImage, chain: list[Patch], intermediate: bool = True,
                image_index: int = 0) -> Sample:
    depth = len(chain)
    targets = [crop_label(t, p) if (intermediate or n == depth - 1) else None
               for n, p in enumerate(chain)]
    present = np.nan_to_num(targets[-1]).reshape(-1, targets[-1].shape[-1]).max(axis=0) > 0.5
    return Sample(chain=chain, inputs=crop_inputs(t.scheme, chain, t.image), targets=targets,
                  ops=chain_ops(t.scheme, chain), image_index=image_index, labels_present=present)


def draw_patchset(data: Sequence[TrainingImage], n_per_image: int, balance: BalanceSpec,
                  augment: AugmentParams, rng: np.random.Generator,
                  intermediate: bool = True) -> list[Sample]:
    """Draw ``n_per_image`` patch stacks from every training image."""
    if not data:
        raise ValueError("need at least one training image")
    if balance.ratio > 0 and not any(len(v) for t in data for v in t.on_voxels):
        raise NoLabels("balanced drawing requested but no image has on-label voxels")
    out = []
    for i, t in enumerate(data):
        for _ in range(n_per_image):
            target = _balanced_target(t, balance, rng) if rng.random() < balance.ratio else None
            chain = sample_random_chain(t.scheme, t.image, rng, target=target)
            chain = _apply_augment(chain, augment, rng)
            out.append(make_sample(t, chain, intermediate, image_index=i))
    return out


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------


class Adam:
    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            p = params[k]
            if k not in self.m:
                self.m[k] = np.zeros_like(p, dtype=np.float64)
                self.v[k] = np.zeros_like(p, dtype=np.float64)
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * (g * g)
            p -= (self.lr / bc1 * m / (np.sqrt(v / bc2) + self.eps)).astype(p.dtype)


def level_loss(model: PatchworkModel, logits: np.ndarray, target: np.ndarray, dontcare: bool):
    """Batch loss, gradient w.r.t. the full level output, and per-sample losses.

    Only the leading ``num_labels`` channels enter the loss.
    """
    L = model.num_labels
    z = logits[..., :L]
    if model.spec.categorical:
        elem, grad, mask = categorical_terms(z, target, dontcare)
    else:
        elem, grad, mask = bce_terms(z, target, dontcare)
    count = mask.sum()
    if count == 0:
        raise AllMasked("every target voxel in the batch is dontcare")
    axes = tuple(range(1, elem.ndim))
    per_sample = elem.sum(axis=axes) / np.maximum(mask.sum(axis=axes), 1)
    full = np.zeros(logits.shape, dtype=np.float64)
    full[..., :L] = grad / count
    return float(elem.sum() / count), full, per_sample


def _batch(samples: Sequence[Sample]):
    depth = len(samples[0].inputs)
    inputs = [np.stack([s.inputs[n] for s in samples]) for n in range(depth)]
    ops = [[s.ops[n] for s in samples] for n in range(depth - 1)]
    return inputs, ops


def _train_step(model, samples, cfg: TrainConfig, opt: Adam | None):
    """Forward (+ backward and update when ``opt``); returns per-level losses and per-sample scores."""
    inputs, ops = _batch(samples)
    outs, cache = model.forward(inputs, ops, zero_forward=cfg.zero_forward)
    depth = model.depth
    levels = range(depth) if cfg.intermediate_loss else [depth - 1]
    grads: list = [None] * depth
    losses = [math.nan] * depth
    per_sample = None
    for n in levels:
        target = np.stack([s.targets[n] for s in samples])
        loss, g, ps = level_loss(model, outs[n], target, cfg.dontcare)
        if not np.isfinite(loss):
            raise DivergedTraining(f"non-finite loss at level {n}")
        losses[n], grads[n] = loss, g
        if n == depth - 1:
            per_sample = ps
    if opt is not None:
        pgrads = model.backward(cache, grads)
        opt.step(model.parameters(), pgrads)
    final_t = np.stack([s.targets[-1] for s in samples])
    prob = probabilities(outs[-1][..., :model.num_labels], model.spec.categorical)
    dice = [float(dice_score(prob[b], final_t[b]).mean()) for b in range(len(samples))]
    return losses, per_sample, dice


def score_samples(model: PatchworkModel, samples: Sequence[Sample], cfg: TrainConfig,
                  batch_size: int = 32) -> None:
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        _, ps, dice = _train_step(model, chunk, cfg, None)
        for s, l, dsc in zip(chunk, ps, dice):
            s.last_loss, s.last_dice = float(l), dsc


def hard_mine_select(samples: Sequence[Sample], cfg: TrainConfig) -> list[Sample]:
    """Keep the hardest ``ceil(hard_mining * n)`` samples younger than ``hard_mining_maxage``."""
    if cfg.hard_mining <= 0 or not samples:
        return []
    keep = math.ceil(cfg.hard_mining * len(samples))
    if cfg.hard_mining_order == "loss":
        score = np.array([-s.last_loss for s in samples])
    elif cfg.hard_mining_order == "f1":
        score = np.array([s.last_dice for s in samples])
    else:
        present = np.array([s.labels_present for s in samples], dtype=bool)
        freq = present.mean(axis=0)
        score = np.array([freq[p].min() if p.any() else 1.0 for p in present])
    order = np.argsort(score, kind="stable")
    out = []
    for i in order:
        s = samples[i]
        if s.age >= cfg.hard_mining_maxage:
            continue
        out.append(s)
        if len(out) == keep:
            break
    for s in out:
        s.age += 1
    return out


def _column_means(rows: list[list[float]]) -> list[float]:
    """Per-level means over batches; NaN for levels without a loss."""
    a = np.array(rows, dtype=np.float64)
    ok = np.isfinite(a)
    n = ok.sum(axis=0)
    total = np.where(ok, a, 0.0).sum(axis=0)
    return [float(t / c) if c else math.nan for t, c in zip(total, n)]


@dataclass
class History:
    rows: list[dict] = field(default_factory=list)

    def write_csv(self, path) -> None:
        if not self.rows:
            return
        depth = len(self.rows[0]["loss_per_level"])
        cols = ["iteration"] + [f"mean_loss_level{n}" for n in range(depth)] + \
            ["mean_dice", "retained_hard_samples"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for r in self.rows:
                w.writerow([r["iteration"], *[f"{v:.8g}" for v in r["loss_per_level"]],
                            f"{r['mean_dice']:.8g}", r["retained"]])


def fit(model: PatchworkModel, data: Sequence[TrainingImage], cfg: TrainConfig,
        rng: np.random.Generator | None = None,
        callback: Callable[[int, list[Sample]], None] | None = None) -> History:
    """Outer loop: draw a patch set (+ retained hard samples); inner loop: ``epochs`` of SGD."""
    seed_seq = np.random.SeedSequence(int(rng.integers(2 ** 63)) if rng is not None else 0)
    draw_seeds = seed_seq.spawn(cfg.num_its)
    shuffle_rng = np.random.default_rng(seed_seq.spawn(1)[0])
    opt = Adam(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
    history = History()
    retained: list[Sample] = []

    def draw(i):
        return draw_patchset(data, cfg.num_patches, cfg.balance, cfg.augment,
                             np.random.default_rng(draw_seeds[i]), cfg.intermediate_loss)

    pool = ThreadPoolExecutor(max_workers=1) if cfg.parallel else None
    try:
        pending = pool.submit(draw, 0) if pool else None
        for it in range(cfg.num_its):
            new = pending.result() if pool else draw(it)
            if pool and it + 1 < cfg.num_its:
                pending = pool.submit(draw, it + 1)
            samples = new + retained
            if callback is not None:
                callback(it, samples)
            level_losses = []
            for epoch in range(cfg.epochs):
                perm = shuffle_rng.permutation(len(samples))
                last = epoch == cfg.epochs - 1
                for i in range(0, len(samples), cfg.batch_size):
                    chunk = [samples[j] for j in perm[i:i + cfg.batch_size]]
                    losses, ps, dice = _train_step(model, chunk, cfg, opt)
                    level_losses.append(losses)
                    if last:
                        for s, l, dsc in zip(chunk, ps, dice):
                            s.last_loss, s.last_dice = float(l), dsc
            if cfg.epochs == 0:
                score_samples(model, samples, cfg)
                level_losses = [[math.nan] * model.depth]
            retained = hard_mine_select(samples, cfg)
            row = dict(iteration=it, loss_per_level=_column_means(level_losses),
                       mean_dice=float(np.mean([s.last_dice for s in samples])),
                       retained=len(retained), n_samples=len(samples))
            history.rows.append(row)
            log.info("it %d loss %s dice %.3f retained %d", it,
                     " ".join(f"{v:.4f}" for v in row["loss_per_level"]), row["mean_dice"], len(retained))
    finally:
        if pool:
            pool.shutdown(wait=True, cancel_futures=True)
    return history
