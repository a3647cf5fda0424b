"""Per-level convolutional blocks with manual backprop, and the patchwork forward pass.

Arrays are channels-last with a leading batch axis: ``(B, s_0, ..., s_{d-1}, f)``.
Layers are stateless; ``forward`` returns ``(y, cache)`` and ``backward``
consumes that cache, so one block can be evaluated several times in a pass
(shared weights across levels).
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import IoError, MalformedHeader, ShapeMismatch
from .geometry import Patch
from .resample import GatherOp, PatchData, crop, crop_op
from .volume import Volume, normalize_patch

CHECKPOINT_MAGIC = b"DNPW1"


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """``(B, *spatial, C)`` -> ``(B * prod(spatial), k**d * C)``, column order ``(k, ..., k, C)``."""
    d = x.ndim - 2
    if k == 1:
        return x.reshape(-1, x.shape[-1])
    r = k // 2
    xp = np.pad(x, [(0, 0)] + [(r, r)] * d + [(0, 0)])
    spatial = x.shape[1:-1]
    shifts = []
    for off in np.ndindex(*(k,) * d):
        sl = (slice(None),) + tuple(slice(o, o + s) for o, s in zip(off, spatial)) + (slice(None),)
        shifts.append(xp[sl])
    return np.concatenate(shifts, axis=-1).reshape(-1, k ** d * x.shape[-1])


class Conv:
    """Same-padded stride-1 convolution, weight layout ``(in, k, ..., k, out)``."""

    def __init__(self, key: str, ndim: int, in_ch: int, out_ch: int, kernel: int = 3):
        if kernel % 2 != 1:
            raise ValueError("kernel size must be odd")
        self.key, self.ndim, self.in_ch, self.out_ch, self.kernel = key, ndim, in_ch, out_ch, kernel

    @property
    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        k = self.kernel
        return {f"{self.key}.W": (self.in_ch,) + (k,) * self.ndim + (self.out_ch,),
                f"{self.key}.b": (self.out_ch,)}

    def init(self, params: dict, rng: np.random.Generator, dtype, gain: float = 2.0) -> None:
        fan_in = self.in_ch * self.kernel ** self.ndim
        w_shape = self.param_shapes[f"{self.key}.W"]
        params[f"{self.key}.W"] = (rng.normal(size=w_shape) * np.sqrt(gain / fan_in)).astype(dtype)
        params[f"{self.key}.b"] = np.zeros(self.out_ch, dtype=dtype)

    def forward(self, params: dict, x: np.ndarray):
        if x.shape[-1] != self.in_ch:
            raise ShapeMismatch(f"{self.key}: expected {self.in_ch} channels, got {x.shape[-1]}")
        w = params[f"{self.key}.W"]
        cols = _im2col(x, self.kernel)
        y = cols @ np.moveaxis(w, 0, -2).reshape(-1, self.out_ch) + params[f"{self.key}.b"]
        return y.reshape(x.shape[:-1] + (self.out_ch,)), (cols, x.shape)

    def backward(self, params: dict, cache, g: np.ndarray):
        cols, x_shape = cache
        w = params[f"{self.key}.W"]
        g2 = g.reshape(-1, self.out_ch)
        gw = (cols.T @ g2).reshape(w.shape[1:-1] + (self.in_ch, self.out_ch))
        grads = {f"{self.key}.W": np.moveaxis(gw, -2, 0), f"{self.key}.b": g2.sum(axis=0)}
        # adjoint of a same-padded correlation: correlate with the flipped kernel
        spatial = tuple(range(1, self.ndim + 1))
        wf = np.flip(w, axis=spatial)
        wf = np.moveaxis(wf, 0, -1).reshape(-1, self.in_ch)  # (k, ..., out, in)
        dx = (_im2col(g, self.kernel) @ wf).reshape(x_shape)
        return dx, grads


class ReLU:
    param_shapes: dict = {}

    def init(self, params, rng, dtype, gain=2.0):
        pass

    def forward(self, params, x):
        mask = x > 0
        return x * mask, mask

    def backward(self, params, mask, g):
        return g * mask, {}


class GlobalMean:
    """Appends the spatial mean of every channel as extra constant channels."""

    param_shapes: dict = {}

    def init(self, params, rng, dtype, gain=2.0):
        pass

    def forward(self, params, x):
        spatial = tuple(range(1, x.ndim - 1))
        m = np.broadcast_to(x.mean(axis=spatial, keepdims=True), x.shape)
        return np.concatenate([x, m], axis=-1), x.shape

    def backward(self, params, x_shape, g):
        c = x_shape[-1]
        spatial = tuple(range(1, len(x_shape) - 1))
        n = int(np.prod(x_shape[1:-1]))
        dx = g[..., :c] + g[..., c:].sum(axis=spatial, keepdims=True) / n
        return dx, {}


class Block:
    """A trainable image-to-image map: a sequence of layers with its own parameters."""

    def __init__(self, layers: list, in_channels: int, out_channels: int, ndim: int,
                 dtype=np.float32, rng: np.random.Generator | None = None, spec: dict | None = None):
        self.layers = layers
        self.in_channels, self.out_channels, self.ndim = in_channels, out_channels, ndim
        self.dtype = np.dtype(dtype)
        self.spec = spec or {}
        self.params: dict[str, np.ndarray] = {}
        rng = rng if rng is not None else np.random.default_rng(0)
        for i, layer in enumerate(layers):
            last = i == len(layers) - 1
            layer.init(self.params, rng, self.dtype, gain=1.0 if last else 2.0)

    def forward(self, x: np.ndarray):
        if x.shape[-1] != self.in_channels:
            raise ShapeMismatch(f"block expects {self.in_channels} input channels, got {x.shape[-1]}")
        caches = []
        x = x.astype(self.dtype, copy=False)
        for layer in self.layers:
            x, c = layer.forward(self.params, x)
            caches.append(c)
        return x, caches

    def backward(self, caches, g: np.ndarray):
        grads: dict[str, np.ndarray] = {}
        g = g.astype(self.dtype, copy=False)
        for layer, c in zip(reversed(self.layers), reversed(caches)):
            g, lg = layer.backward(self.params, c, g)
            grads.update(lg)
        return g, grads

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]


def build_block(ndim: int, in_channels: int, out_channels: int, hidden: int = 16,
                n_conv: int = 2, kernel: int = 3, global_context: bool = False,
                dtype=np.float32, rng: np.random.Generator | None = None) -> Block:
    """``n_conv`` x (conv k - relu) followed by a 1x1 conv to ``out_channels``.

    With ``global_context`` the channel means are appended after the first
    ReLU, giving the block a receptive field spanning the whole patch.
    """
    layers: list = []
    ch = in_channels
    for i in range(n_conv):
        layers += [Conv(f"conv{i}", ndim, ch, hidden, kernel), ReLU()]
        ch = hidden
        if global_context and i == 0:
            layers.append(GlobalMean())
            ch = 2 * hidden
    layers.append(Conv("out", ndim, ch, out_channels, 1))
    spec = dict(hidden=hidden, n_conv=n_conv, kernel=kernel, global_context=global_context)
    return Block(layers, in_channels, out_channels, ndim, dtype=dtype, rng=rng, spec=spec)


def block_forward(b: Block, x: PatchData) -> PatchData:
    """Apply ``b`` to a single patch; returns raw logits on the same grid."""
    return PatchData(x.patch, b(x.data[None])[0])


def block_backward(b: Block, x: PatchData, grad_out: np.ndarray):
    """Gradients of ``sum(grad_out * b(x))`` w.r.t. parameters and input."""
    y, caches = b.forward(x.data[None])
    if grad_out.shape != y.shape[1:]:
        raise ShapeMismatch(f"grad_out shape {grad_out.shape} != output shape {y.shape[1:]}")
    dx, grads = b.backward(caches, grad_out[None])
    return grads, dx[0]


# ---------------------------------------------------------------------------
# patchwork model
# ---------------------------------------------------------------------------


@dataclass
class ModelSpec:
    """Hyperparameters sufficient to rebuild a :class:`PatchworkModel`."""

    ndim: int
    depth: int
    input_channels: int
    num_labels: int
    intermediate_out: int = 0
    block_out: list[int] | None = None
    identical_blocks: bool = False
    categorical: bool = False
    hidden: int = 16
    n_conv: int = 2
    kernel: int = 3
    global_context: bool = False
    final_block: bool = False
    forward_type: str = "simple"
    dtype: str = "float32"
    categorial_label: list[int] | None = None

    def __post_init__(self):
        if self.forward_type != "simple":
            raise ValueError(f"forward_type {self.forward_type!r} is not supported (only 'simple')")
        if self.block_out is not None and len(self.block_out) != self.depth:
            raise ValueError("block_out needs one entry per level")


class PatchworkModel:
    """N per-level blocks chained coarse to fine by output forwarding.

    Level ``n`` sees ``[I_n, C_n]`` where ``C_n`` is the parent output
    cropped onto the level-``n`` patch; the first ``num_labels`` output
    channels are the segmentation logits.
    """

    def __init__(self, spec: ModelSpec, scheme_cfg: dict | None = None,
                 rng: np.random.Generator | None = None):
        self.spec = spec
        self.scheme_cfg = dict(scheme_cfg or {})
        rng = rng if rng is not None else np.random.default_rng(0)
        n = spec.depth
        dtype = np.dtype(spec.dtype)
        kw = dict(hidden=spec.hidden, n_conv=spec.n_conv, kernel=spec.kernel,
                  global_context=spec.global_context, dtype=dtype)
        if spec.identical_blocks:
            shared = build_block(spec.ndim, spec.input_channels + self.out_channels(0),
                                 self.out_channels(0), rng=rng, **kw)
            self.blocks = [shared] * n
        else:
            self.blocks = [build_block(spec.ndim, self.in_channels(i), self.out_channels(i), rng=rng, **kw)
                           for i in range(n)]
        self.final_block = None
        if spec.final_block:
            self.final_block = build_block(spec.ndim, self.out_channels(n - 1), spec.num_labels,
                                           rng=rng, **kw)
        self.output_activation = "softmax" if spec.categorical else "sigmoid"

    @property
    def depth(self) -> int:
        return self.spec.depth

    @property
    def num_labels(self) -> int:
        return self.spec.num_labels

    def out_channels(self, level: int) -> int:
        s = self.spec
        if s.identical_blocks:
            return s.num_labels + s.intermediate_out
        if s.block_out is not None:
            return int(s.block_out[level])
        return s.num_labels + (s.intermediate_out if level < s.depth - 1 else 0)

    def in_channels(self, level: int) -> int:
        if self.spec.identical_blocks:
            return self.spec.input_channels + self.out_channels(0)
        return self.spec.input_channels + (self.out_channels(level - 1) if level > 0 else 0)

    def unique_blocks(self) -> list[tuple[str, Block]]:
        named = []
        seen = set()
        for i, b in enumerate(self.blocks):
            if id(b) not in seen:
                seen.add(id(b))
                named.append((f"block{i}", b))
        if self.final_block is not None:
            named.append(("final", self.final_block))
        return named

    def parameters(self) -> dict[str, np.ndarray]:
        """Distinct parameter arrays (shared blocks appear once); views into the blocks."""
        return {f"{name}.{k}": v for name, b in self.unique_blocks() for k, v in b.params.items()}

    def block_name(self, level: int) -> str:
        return "block0" if self.spec.identical_blocks else f"block{level}"

    # -- forward/backward over a batch of chains --------------------------------------

    def forward_level(self, level: int, inputs: np.ndarray, forwarded: np.ndarray | None):
        """Raw block output at ``level`` for a batch; returns ``(X, cache)``."""
        parts = [inputs.astype(self.blocks[level].dtype, copy=False)]
        if forwarded is not None:
            parts.append(forwarded)
        elif self.spec.identical_blocks:
            parts.append(np.zeros(inputs.shape[:-1] + (self.out_channels(0),), dtype=parts[0].dtype))
        x = np.concatenate(parts, axis=-1) if len(parts) > 1 else parts[0]
        y, cache = self.blocks[level].forward(x)
        return y, cache

    def forward(self, inputs: Sequence[np.ndarray], ops: Sequence[Sequence[GatherOp]] | None,
                zero_forward: bool = False):
        """Run all levels. ``ops[n-1][b]`` crops sample ``b``'s level ``n-1`` grid onto level ``n``.

        Returns per-level outputs (the final one passed through ``final_block``
        when present) and a cache for :meth:`backward`.
        """
        n_levels = self.depth
        if len(inputs) != n_levels:
            raise ShapeMismatch(f"got {len(inputs)} level inputs for a depth-{n_levels} model")
        outs, caches = [], []
        prev = None
        for level in range(n_levels):
            fwd = None
            if level > 0:
                fwd = np.stack([op.apply(prev[b]) for b, op in enumerate(ops[level - 1])])
                if zero_forward:
                    fwd = np.zeros_like(fwd)
            y, cache = self.forward_level(level, inputs[level], fwd)
            caches.append(cache)
            outs.append(y)
            prev = y
        final_cache = None
        if self.final_block is not None:
            y, final_cache = self.final_block.forward(outs[-1])
            outs = outs[:-1] + [y]
        return outs, (caches, final_cache, ops, zero_forward, [o.shape for o in outs])

    def backward(self, cache, grads: Sequence[np.ndarray | None]) -> dict[str, np.ndarray]:
        """Parameter gradients given ``dL/dX_n`` per level (``None`` for no loss)."""
        caches, final_cache, ops, zero_forward, shapes = cache
        n_levels = self.depth
        pgrads: dict[str, np.ndarray] = {}

        def add(prefix, g):
            for k, v in g.items():
                key = f"{prefix}.{k}"
                pgrads[key] = pgrads[key] + v if key in pgrads else v

        g_next = None  # gradient flowing into X_n from level n+1 through the crop
        for level in reversed(range(n_levels)):
            g = grads[level]
            if g is None and g_next is None:
                continue
            if level == n_levels - 1 and self.final_block is not None and g is not None:
                g, fg = self.final_block.backward(final_cache, g)
                add("final", fg)
            if g is None:
                g = np.zeros(shapes[level][:-1] + (self.out_channels(level),), dtype=self.blocks[level].dtype)
            if g_next is not None:
                g = g + g_next
            dx, bg = self.blocks[level].backward(caches[level], g)
            add(self.block_name(level), bg)
            g_next = None
            if level > 0 and not zero_forward:
                f_in = self.spec.input_channels
                dfwd = dx[..., f_in:]
                g_next = np.stack([op.adjoint(dfwd[b]) for b, op in enumerate(ops[level - 1])])
                g_next = g_next.astype(self.blocks[level].dtype, copy=False)
        return pgrads


# ---------------------------------------------------------------------------
# chain inputs
# ---------------------------------------------------------------------------


def crop_inputs(scheme, chain: Sequence[Patch], image: Volume) -> list[np.ndarray]:
    """``I_n``: the image cropped onto every chain patch."""
    out = []
    for p in chain:
        data = crop(image, p, scheme.interp, scheme.prefilter_data).data
        if scheme.normalize == "patch_m0s1":
            data = normalize_patch(data)
        out.append(data)
    return out


def chain_ops(scheme, chain: Sequence[Patch]) -> list[GatherOp]:
    """Parent-to-child crop operators ``p_{n-1} -> p_n``."""
    return [crop_op(p, c, scheme.interp) for p, c in zip(chain, chain[1:])]


def patchwork_forward(m: PatchworkModel, chain: Sequence[Patch], image: Volume, scheme,
                      zero_forward: bool = False) -> list[PatchData]:
    """Per-level outputs ``X_n`` for a single chain."""
    if len(chain) != m.depth:
        raise ShapeMismatch(f"chain has {len(chain)} levels, model depth is {m.depth}")
    inputs = [x[None] for x in crop_inputs(scheme, chain, image)]
    ops = [[op] for op in chain_ops(scheme, chain)]
    outs, _ = m.forward(inputs, ops, zero_forward=zero_forward)
    return [PatchData(p, o[0]) for p, o in zip(chain, outs)]


def patchwork_backward(m: PatchworkModel, chain: Sequence[Patch], image: Volume, scheme,
                       grad_per_level: Sequence[np.ndarray | None]) -> dict[str, np.ndarray]:
    inputs = [x[None] for x in crop_inputs(scheme, chain, image)]
    ops = [[op] for op in chain_ops(scheme, chain)]
    _, cache = m.forward(inputs, ops)
    grads = [None if g is None else g[None] for g in grad_per_level]
    return m.backward(cache, grads)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(model: PatchworkModel, path, extra: dict | None = None) -> None:
    """``DNPW1`` | uint32 header length | JSON header | float32 LE tensors."""
    params = model.parameters()
    header = {
        "scheme": model.scheme_cfg,
        "model": model.spec.__dict__,
        "extra": extra or {},
        "tensors": [{"name": k, "shape": list(v.shape)} for k, v in params.items()],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    try:
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)
            for v in params.values():
                fh.write(np.ascontiguousarray(v, dtype="<f4").tobytes())
    except OSError as exc:
        raise IoError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path) -> tuple[PatchworkModel, dict]:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read checkpoint {path}: {exc}") from exc
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise MalformedHeader(f"{path} is not a patchwork checkpoint")
    off = len(CHECKPOINT_MAGIC)
    (n,) = struct.unpack("<I", raw[off:off + 4])
    header = json.loads(raw[off + 4:off + 4 + n])
    off += 4 + n
    model = PatchworkModel(ModelSpec(**header["model"]), header["scheme"])
    params = model.parameters()
    for t in header["tensors"]:
        shape = tuple(t["shape"])
        count = int(np.prod(shape))
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=off).reshape(shape)
        off += 4 * count
        if t["name"] not in params or params[t["name"]].shape != shape:
            raise MalformedHeader(f"checkpoint tensor {t['name']} {shape} does not fit the model")
        params[t["name"]][...] = arr
    return model, header.get("extra", {})
