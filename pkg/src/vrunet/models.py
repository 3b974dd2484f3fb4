"""Classifier and residual U-shaped segmenter built from :mod:`vrunet.ops`.

Both networks are described by an :class:`ArchSpec` and stored as an ordered
mapping of named :class:`~vrunet.ops.Kernel` objects (:class:`ModelParams`).
Forward passes record a tape of backward closures, so one call to
:func:`backward` gives the exact gradient of every parameter.

Classifier, per stage and block::

    conv KxK -> relu -> depthwise KxK -> relu      (blocks_per_stage times)
    maxpool(pool)
    flatten -> dense(dense_units) -> relu -> dense(1) -> sigmoid

Segmenter, encoder stage ``i``::

    conv KxK -> relu -> separable KxK -> relu      (blocks_per_stage times)
    maxpool(pool)                                  (all but the deepest stage)

decoder stage ``i`` (deepest-1 down to 0)::

    transposed conv 2x2/2  (or nearest 2x + pointwise)  -> crop to skip size
    + encoder features of stage i                  (if decoder_residual)
    conv KxK -> relu

head: pointwise 1x1 -> sigmoid per pixel.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Literal

import numpy as np

from . import ops
from .ops import Kernel, ShapeError


class BuildError(ValueError):
    """An ArchSpec that cannot be turned into a network."""


@dataclass(frozen=True)
class ArchSpec:
    kind: Literal["classifier", "segmenter"]
    input_hw: tuple[int, int]
    stage_channels: tuple[int, ...]
    blocks_per_stage: int = 1
    use_depthwise: bool = True
    use_separable: bool = True
    decoder_residual: bool = True
    pool: tuple[int, int] = (2, 2)
    kernel_size: int = 3
    dense_units: int = 64
    in_channels: int = 1
    upsample: Literal["transposed", "nearest"] = "transposed"

    def __post_init__(self):
        object.__setattr__(self, "input_hw", tuple(int(v) for v in self.input_hw))
        object.__setattr__(self, "stage_channels", tuple(int(v) for v in self.stage_channels))
        object.__setattr__(self, "pool", tuple(int(v) for v in self.pool))

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ArchSpec":
        return cls.from_dict(json.loads(text))

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise BuildError(f"unknown ArchSpec keys: {sorted(extra)}")
        return cls(**d)

    @classmethod
    def classifier(cls, input_hw, stage_channels=(16, 32, 64), **kw) -> "ArchSpec":
        kw.setdefault("pool", (2, 2))
        return cls("classifier", tuple(input_hw), tuple(stage_channels), **kw)

    @classmethod
    def segmenter(cls, input_hw, stage_channels=(16, 32, 64), **kw) -> "ArchSpec":
        kw.setdefault("pool", (3, 2))
        return cls("segmenter", tuple(input_hw), tuple(stage_channels), **kw)


@dataclass
class ModelParams:
    spec: ArchSpec
    layers: dict[str, Kernel] = field(default_factory=dict)
    dtype: np.dtype = np.dtype(np.float32)

    @property
    def n_params(self) -> int:
        return sum(ops.param_count(k) for k in self.layers.values())

    @property
    def digest(self) -> str:
        h = hashlib.sha256(self.spec.to_json().encode())
        for name, k in self.layers.items():
            h.update(name.encode())
            for a in k.arrays():
                h.update(np.ascontiguousarray(a, dtype="<f4").tobytes())
        return h.hexdigest()


def count_params(model: ModelParams) -> int:
    return model.n_params


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------

def _validate(spec: ArchSpec):
    if not spec.stage_channels:
        raise BuildError("stage_channels must be nonempty")
    if any(c < 1 for c in spec.stage_channels):
        raise BuildError(f"stage_channels must be positive, got {spec.stage_channels}")
    if any(b <= a for a, b in zip(spec.stage_channels, spec.stage_channels[1:])):
        raise BuildError(f"stage_channels must be strictly increasing, got {spec.stage_channels}")
    if spec.blocks_per_stage < 1 or spec.kernel_size < 1 or spec.in_channels < 1:
        raise BuildError("blocks_per_stage, kernel_size and in_channels must be >= 1")
    if min(spec.input_hw) < 1:
        raise BuildError(f"input_hw must be positive, got {spec.input_hw}")
    window, stride = spec.pool
    if window < 1 or stride < 1:
        raise BuildError(f"pool window and stride must be >= 1, got {spec.pool}")


def stage_sizes(spec: ArchSpec) -> list[tuple[int, int]]:
    """Spatial size at the input of each stage."""
    _, stride = spec.pool
    h, w = spec.input_hw
    sizes = [(h, w)]
    n_pools = len(spec.stage_channels) - (1 if spec.kind == "segmenter" else 0)
    for _ in range(n_pools):
        h, w = ops.out_size(h, 0, stride, "same"), ops.out_size(w, 0, stride, "same")
        sizes.append((h, w))
    return sizes


def _init(shape, fan_in, fan_out, rng, scheme, dtype):
    if scheme == "zeros":
        return np.zeros(shape, dtype=dtype)
    if scheme == "he":
        limit = np.sqrt(6.0 / fan_in)
    else:
        limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class _Builder:
    def __init__(self, seed, dtype, zeros):
        self.rng = np.random.default_rng(seed)
        self.dtype = np.dtype(dtype)
        self.zeros = zeros
        self.layers: dict[str, Kernel] = {}

    def _w(self, shape, fan_in, fan_out, scheme):
        return _init(shape, fan_in, fan_out, self.rng, "zeros" if self.zeros else scheme, self.dtype)

    def add(self, name, kind, k, c_in, c_out, scheme="he"):
        if kind == "standard":
            w = self._w((k, k, c_in, c_out), k * k * c_in, k * k * c_out, scheme)
        elif kind == "depthwise":
            w = self._w((k, k, c_in), k * k, k * k, scheme)
        else:
            w = self._w((1, 1, c_in, c_out), c_in, c_out, scheme)
        bias_n = c_in if kind == "depthwise" else c_out
        self.layers[name] = Kernel(kind, w, np.zeros(bias_n, dtype=self.dtype))


def build_classifier(spec: ArchSpec, seed: int = 0, dtype=np.float32, zero_init: bool = False) -> ModelParams:
    if spec.kind != "classifier":
        raise BuildError(f"build_classifier needs kind='classifier', got {spec.kind!r}")
    _validate(spec)
    sizes = stage_sizes(spec)
    b = _Builder(seed, dtype, zero_init)
    k, c_prev = spec.kernel_size, spec.in_channels
    for i, c in enumerate(spec.stage_channels):
        if min(sizes[i]) < 1:
            raise BuildError(f"stage {i}: input collapsed to {sizes[i]}")
        for j in range(spec.blocks_per_stage):
            b.add(f"s{i}.b{j}.conv", "standard", k, c_prev, c)
            if spec.use_depthwise:
                b.add(f"s{i}.b{j}.dw", "depthwise", k, c, c)
            c_prev = c
    h, w = sizes[-1]
    b.add("head.fc1", "pointwise", 1, h * w * c_prev, spec.dense_units)
    b.add("head.fc2", "pointwise", 1, spec.dense_units, 1, scheme="glorot")
    return ModelParams(spec, b.layers, np.dtype(dtype))


def build_segmenter(spec: ArchSpec, seed: int = 0, dtype=np.float32, zero_init: bool = False) -> ModelParams:
    if spec.kind != "segmenter":
        raise BuildError(f"build_segmenter needs kind='segmenter', got {spec.kind!r}")
    _validate(spec)
    if spec.upsample not in ("transposed", "nearest"):
        raise BuildError(f"unknown upsample mode {spec.upsample!r}")
    sizes = stage_sizes(spec)
    for i in range(len(spec.stage_channels) - 1):
        (h, w), (dh, dw) = sizes[i], sizes[i + 1]
        if not (0 <= 2 * dh - h <= 1 and 0 <= 2 * dw - w <= 1):
            raise BuildError(f"decoder stage {i}: 2x upsample of {dh}x{dw} cannot join encoder features {h}x{w}")
    b = _Builder(seed, dtype, zero_init)
    k, c_prev = spec.kernel_size, spec.in_channels
    chans = spec.stage_channels
    for i, c in enumerate(chans):
        for j in range(spec.blocks_per_stage):
            b.add(f"enc{i}.b{j}.conv", "standard", k, c_prev, c)
            if spec.use_separable:
                b.add(f"enc{i}.b{j}.sep_dw", "depthwise", k, c, c)
                b.add(f"enc{i}.b{j}.sep_pw", "pointwise", 1, c, c)
            else:
                b.add(f"enc{i}.b{j}.conv2", "standard", k, c, c)
            c_prev = c
    for i in reversed(range(len(chans) - 1)):
        if spec.upsample == "transposed":
            b.add(f"dec{i}.up", "standard", 2, chans[i + 1], chans[i])
        else:
            b.add(f"dec{i}.up_pw", "pointwise", 1, chans[i + 1], chans[i])
        b.add(f"dec{i}.conv", "standard", k, chans[i], chans[i])
    b.add("head.out", "pointwise", 1, chans[0], 1, scheme="glorot")
    return ModelParams(spec, b.layers, np.dtype(dtype))


def build(spec: ArchSpec, seed: int = 0, dtype=np.float32, zero_init: bool = False) -> ModelParams:
    if spec.kind == "classifier":
        return build_classifier(spec, seed, dtype, zero_init)
    if spec.kind == "segmenter":
        return build_segmenter(spec, seed, dtype, zero_init)
    raise BuildError(f"unknown model kind {spec.kind!r}")


# ---------------------------------------------------------------------------
# parameter vectors
# ---------------------------------------------------------------------------

def to_vector(model: ModelParams) -> np.ndarray:
    parts = [a.ravel() for k in model.layers.values() for a in k.arrays()]
    return np.concatenate(parts).astype(model.dtype) if parts else np.zeros(0, model.dtype)


def from_vector(model: ModelParams, theta: np.ndarray) -> ModelParams:
    if theta.size != model.n_params:
        raise ValueError(f"vector has {theta.size} entries, model needs {model.n_params}")
    out, pos = {}, 0
    for name, k in model.layers.items():
        new = []
        for a in k.arrays():
            new.append(theta[pos:pos + a.size].reshape(a.shape).astype(model.dtype))
            pos += a.size
        out[name] = k.like(new[0], new[1] if len(new) > 1 else None)
    return ModelParams(model.spec, out, model.dtype)


def _grads_to_vector(model: ModelParams, grads: dict[str, Kernel]) -> np.ndarray:
    parts = []
    for name, k in model.layers.items():
        g = grads.get(name)
        for a, ga in zip(k.arrays(), g.arrays() if g is not None else [None] * 2):
            parts.append(np.zeros(a.size, model.dtype) if ga is None else ga.ravel())
    return np.concatenate(parts).astype(model.dtype)


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------

@dataclass
class Cache:
    tape: list[Callable[[np.ndarray, dict], np.ndarray]]
    logits_shape: tuple


def _conv(tape, x, k, name, op="conv2d", stride=1):
    if op == "conv2d":
        y = ops.conv2d_forward(x, k, stride, "same")
    elif op == "depthwise":
        y = ops.depthwise_forward(x, k, stride, "same")
    elif op == "pointwise":
        y = ops.pointwise_forward(x, k)
    elif op == "transposed_conv":
        y = ops.transposed_conv_forward(x, k, stride)
    else:
        y = ops.dense_forward(x, k)

    def back(g, grads):
        gx, gk = ops.layer_backward(op, x, g, {"k": k, "stride": stride, "pad": "same"})
        grads[name] = gk
        return gx

    tape.append(back)
    return y


def _relu(tape, x):
    tape.append(lambda g, grads: ops.activation_backward(x, g, "relu"))
    return ops.relu(x)


def _pool(tape, x, window, stride):
    y, arg = ops.maxpool_forward(x, window, stride, "same")
    tape.append(lambda g, grads: ops.maxpool_backward(x, arg, g, window, stride, "same"))
    return y


def _check_input(model: ModelParams, x: np.ndarray):
    spec = model.spec
    if x.ndim != 4 or tuple(x.shape[1:3]) != spec.input_hw or x.shape[3] != spec.in_channels:
        raise ShapeError(f"{spec.kind} expects input (n, {spec.input_hw[0]}, {spec.input_hw[1]}, "
                         f"{spec.in_channels}), got {tuple(x.shape)}")


def _classifier_logits(model: ModelParams, x: np.ndarray, tape: list) -> np.ndarray:
    spec, L = model.spec, model.layers
    window, stride = spec.pool
    h = x
    for i in range(len(spec.stage_channels)):
        for j in range(spec.blocks_per_stage):
            h = _relu(tape, _conv(tape, h, L[f"s{i}.b{j}.conv"], f"s{i}.b{j}.conv"))
            if spec.use_depthwise:
                h = _relu(tape, _conv(tape, h, L[f"s{i}.b{j}.dw"], f"s{i}.b{j}.dw", op="depthwise"))
        h = _pool(tape, h, window, stride)
    h = _relu(tape, _conv(tape, h, L["head.fc1"], "head.fc1", op="dense"))
    return _conv(tape, h, L["head.fc2"], "head.fc2", op="pointwise")


def _segmenter_logits(model: ModelParams, x: np.ndarray, tape: list) -> np.ndarray:
    spec, L = model.spec, model.layers
    window, stride = spec.pool
    depth = len(spec.stage_channels)
    skip_grads: dict[int, np.ndarray] = {}
    skips = []
    h = x
    for i in range(depth):
        for j in range(spec.blocks_per_stage):
            p = f"enc{i}.b{j}"
            h = _relu(tape, _conv(tape, h, L[f"{p}.conv"], f"{p}.conv"))
            if spec.use_separable:
                h = _conv(tape, h, L[f"{p}.sep_dw"], f"{p}.sep_dw", op="depthwise")
                h = _conv(tape, h, L[f"{p}.sep_pw"], f"{p}.sep_pw", op="pointwise")
            else:
                h = _conv(tape, h, L[f"{p}.conv2"], f"{p}.conv2")
            h = _relu(tape, h)
        if i < depth - 1:
            skips.append(h)
            if spec.decoder_residual:
                tape.append(lambda g, grads, i=i: g + skip_grads.pop(i))
            h = _pool(tape, h, window, stride)
    for i in reversed(range(depth - 1)):
        if spec.upsample == "transposed":
            u = _conv(tape, h, L[f"dec{i}.up"], f"dec{i}.up", op="transposed_conv", stride=2)
        else:
            tape.append(lambda g, grads: ops.upsample2x_backward(g))
            u = _conv(tape, ops.upsample2x_nearest(h), L[f"dec{i}.up_pw"], f"dec{i}.up_pw", op="pointwise")
        sh, sw = skips[i].shape[1:3]
        full = u.shape

        def uncrop(g, grads, full=full):
            out = np.zeros(full, dtype=g.dtype)
            out[:, :g.shape[1], :g.shape[2]] = g
            return out

        tape.append(uncrop)
        u = u[:, :sh, :sw]
        if spec.decoder_residual:
            def split(g, grads, i=i):
                skip_grads[i] = g
                return g

            tape.append(split)
            u = u + skips[i]
        h = _relu(tape, _conv(tape, u, L[f"dec{i}.conv"], f"dec{i}.conv"))
    return _conv(tape, h, L["head.out"], "head.out", op="pointwise")


def forward_cached(model: ModelParams, x: np.ndarray) -> tuple[np.ndarray, Cache]:
    """Probabilities plus the tape needed by :func:`backward`."""
    _check_input(model, x)
    x = x.astype(model.dtype, copy=False)
    tape: list = []
    if model.spec.kind == "classifier":
        logits = _classifier_logits(model, x, tape)
    else:
        logits = _segmenter_logits(model, x, tape)
    probs = ops.sigmoid(logits)
    if model.spec.kind == "classifier":
        probs = probs.reshape(x.shape[0], 1)
    return probs, Cache(tape, logits.shape)


def forward(model: ModelParams, x: np.ndarray) -> np.ndarray:
    """Classifier: (n, 1) lesion probabilities. Segmenter: (n, H, W, 1) probability map."""
    return forward_cached(model, x)[0]


def backward(model: ModelParams, cache: Cache, grad_logits: np.ndarray) -> np.ndarray:
    """Flat parameter gradient (``to_vector`` order) given d(loss)/d(logits).

    ``grad_logits`` is taken w.r.t. the pre-sigmoid output and may be passed in
    the shape :func:`forward` returns.
    """
    g = np.asarray(grad_logits).reshape(cache.logits_shape)
    grads: dict[str, Kernel] = {}
    for step in reversed(cache.tape):
        g = step(g, grads)
    return _grads_to_vector(model, grads)


def input_gradient(model: ModelParams, cache: Cache, grad_logits: np.ndarray) -> np.ndarray:
    g = np.asarray(grad_logits).reshape(cache.logits_shape)
    grads: dict[str, Kernel] = {}
    for step in reversed(cache.tape):
        g = step(g, grads)
    return g
