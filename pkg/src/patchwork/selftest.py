"""Built-in numerical self-checks (gradients, adjointness, reconstruction, suppression)."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import geometry
from .gradcheck import check, rel_error
from .infer import IdentityModel, InferConfig, predict
from .model import ModelSpec, PatchworkModel, build_block
from .resample import Canvas, PatchData, canvas_patch, finalize, gather_op, scatter
from .sampler import resolve_scheme, sample_random_chain
from .synthetic import test_image
from .train import loss_bce, loss_categorical
from .model import chain_ops, crop_inputs

FAULTS = ("sign",)


@dataclass
class CheckResult:
    name: str
    ok: bool
    value: float
    limit: float
    seconds: float


def _flip(g, fault):
    return -g if fault == "sign" else g


def check_block(fault=None) -> float:
    rng = np.random.default_rng(1)
    b = build_block(2, 3, 2, hidden=4, global_context=True, dtype=np.float64, rng=rng)
    x = rng.standard_normal((2, 6, 6, 3))
    w = rng.standard_normal((2, 6, 6, 2))
    y, caches = b.forward(x)
    dx, grads = b.backward(caches, w)
    errs = [check(lambda: float((b(x) * w).sum()), x, _flip(dx, fault), max_probes=40, rng=rng)]
    for k, p in b.params.items():
        errs.append(check(lambda: float((b(x) * w).sum()), p, grads[k], max_probes=40, rng=rng))
    return max(errs)


def check_losses(fault=None) -> float:
    rng = np.random.default_rng(2)
    z = rng.standard_normal((4, 4, 3))
    t = (rng.random((4, 4, 3)) > 0.5).astype(np.float64)
    t[0, 0, 1] = np.nan
    _, g = loss_bce(z, t)
    e1 = check(lambda: loss_bce(z, t)[0], z, _flip(g, fault))
    tc = np.zeros((4, 4, 3))
    lab = rng.integers(0, 4, size=(4, 4))
    for c in range(3):
        tc[..., c] = lab == c + 1
    _, g = loss_categorical(z, tc)
    e2 = check(lambda: loss_categorical(z, tc)[0], z, g)
    return max(e1, e2)


def check_end_to_end(fault=None) -> float:
    rng = np.random.default_rng(3)
    scheme_cfg = dict(depth=2, patch_size=8, fov_rel=0.8, destvox_rel=1.0, interp_type="lin")
    img = test_image(32, seed=3)
    spec = ModelSpec(ndim=2, depth=2, input_channels=1, num_labels=1, intermediate_out=2,
                     hidden=4, dtype="float64")
    m = PatchworkModel(spec, scheme_cfg, rng)
    scheme = resolve_scheme(scheme_cfg, img)
    chain = sample_random_chain(scheme, img, rng)
    inputs = [x[None].astype(np.float64) for x in crop_inputs(scheme, chain, img)]
    ops = [[op] for op in chain_ops(scheme, chain)]
    w = [rng.standard_normal((1,) + scheme.patch_shape[n] + (m.out_channels(n),)) for n in range(2)]
    w[0][:] = 0.0  # only the final loss: level-0 gradients must flow through the crop

    def loss():
        outs, _ = m.forward(inputs, ops)
        return float(sum((o * wi).sum() for o, wi in zip(outs, w)))

    _, cache = m.forward(inputs, ops)
    grads = m.backward(cache, w)
    params = m.parameters()
    name = "block0.conv0.W"
    return check(loss, params[name], _flip(grads[name], fault), max_probes=30, rng=rng)


def check_adjoint(fault=None) -> float:
    rng = np.random.default_rng(4)
    worst = 0.0
    for interp in ("NN", "linear"):
        m = geometry.compose(geometry.translation(3.3, -1.7), geometry.from_linear(
            geometry.rotation_2d(0.4) * 0.7))
        op = gather_op((20, 17), m, (11, 13), interp)
        x = rng.standard_normal((20, 17, 2))
        y = rng.standard_normal((11, 13, 2))
        lhs = float((op.apply(x) * y).sum())
        rhs = float((x * op.adjoint(y)).sum())
        if fault == "sign":
            rhs = -rhs
        worst = max(worst, abs(lhs - rhs) / max(abs(lhs), 1e-12))
    return worst


def _direct_resample(image, target, interp):
    u = geometry.apply(geometry.index_map(image.patch, target), geometry.grid_coords(target.shape))
    data = image.data[..., 0].astype(np.float64)
    if interp == "NN":
        idx = np.floor(u + 0.5).astype(int)
        ok = np.all((idx >= 0) & (idx < np.array(image.shape)), axis=1)
        v = np.zeros(len(u))
        v[ok] = data[tuple(idx[ok].T)]
    else:
        v = ndimage.map_coordinates(data, u.T, order=1, mode="constant", cval=0.0)
    return v.reshape(target.shape)


def check_reconstruction(fault=None) -> float:
    img = test_image(64, seed=5)
    worst = 0.0
    for interp in ("NN", "lin"):
        cfg = dict(depth=2, patch_size=16, fov_rel=1.0, destvox_mm=2.0, interp_type=interp)
        out = predict(img, IdentityModel(cfg), InferConfig(generate_type="tree", jitter=0.0))
        ref = _direct_resample(img, canvas_patch(img, [2.0, 2.0]), "NN" if interp == "NN" else "linear")
        if fault == "sign":
            ref = -ref
        worst = max(worst, float(np.abs(out.data[..., 0] - ref).max()))
    return worst


def check_suppression(fault=None) -> float:
    rng = np.random.default_rng(6)
    img = test_image(16)
    cp = canvas_patch(img, [1.0, 1.0])
    worst = 0.0
    for v in rng.uniform(0, 1, 20):
        c = Canvas.empty(cp, 1)
        single = geometry.patch_at(geometry.apply(cp.affine, np.array([[7.0, 7.0]]))[0], np.eye(2), (1, 1))
        scatter(c, PatchData(single, np.full((1, 1, 1), v)))
        out = finalize(c, alpha=1.0).data[7, 7, 0]
        expect = v / 2 if fault != "sign" else -v / 2
        worst = max(worst, abs(out - expect))
    return worst


CHECKS = [
    ("block gradient", check_block, 1e-4),
    ("loss gradient", check_losses, 1e-6),
    ("end-to-end gradient", check_end_to_end, 1e-3),
    ("crop/scatter adjoint", check_adjoint, 1e-10),
    ("reconstruction identity", check_reconstruction, 1e-5),
    ("sparse suppression", check_suppression, 1e-9),
]


def run_selftest(inject_fault: str | None = None) -> list[CheckResult]:
    if inject_fault is not None and inject_fault not in FAULTS:
        raise ValueError(f"unknown fault {inject_fault!r}; choose from {FAULTS}")
    results = []
    for name, fn, limit in CHECKS:
        t0 = time.perf_counter()
        try:
            value = fn(inject_fault)
        except Exception:  # a crashing check is a failing check
            value = float("inf")
        ok = bool(np.isfinite(value) and value <= limit)
        results.append(CheckResult(name, ok, value, limit, time.perf_counter() - t0))
    return results


def format_table(results: list[CheckResult]) -> str:
    lines = [f"{'check':<26}{'result':<8}{'value':>12}{'limit':>10}{'time':>8}"]
    for r in results:
        lines.append(f"{r.name:<26}{'PASS' if r.ok else 'FAIL':<8}{r.value:>12.2e}{r.limit:>10.0e}"
                     f"{r.seconds:>7.2f}s")
    return "\n".join(lines)


__all__ = ["run_selftest", "format_table", "CheckResult", "rel_error"]
