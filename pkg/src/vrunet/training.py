"""Loss, optimizer, early stopping, the epoch loop and checkpoint files."""
from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .models import ArchSpec, ModelParams, backward, forward_cached, from_vector, to_vector

CLAMP = 1e-7


def bce_loss(pred: np.ndarray, target: np.ndarray, eps: float = CLAMP) -> float:
    """Mean binary cross-entropy over every element."""
    pred, target = np.asarray(pred), np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError(f"pred shape {pred.shape} != target shape {target.shape}")
    p = np.clip(pred.astype(np.float64), eps, 1 - eps)
    t = target.astype(np.float64)
    return float(-np.mean(t * np.log(p) + (1 - t) * np.log1p(-p)))


def bce_grad(pred: np.ndarray, target: np.ndarray, eps: float = CLAMP) -> np.ndarray:
    pred, target = np.asarray(pred), np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError(f"pred shape {pred.shape} != target shape {target.shape}")
    p = np.clip(pred, eps, 1 - eps)
    return ((p - target) / (p * (1 - p)) / pred.size).astype(pred.dtype)


def bce_sigmoid_grad(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Gradient of mean BCE w.r.t. the logit feeding a sigmoid that produced ``pred``.

    Equals ``bce_grad * p * (1 - p)`` without the clamp-induced blow-up.
    """
    return ((pred - target) / pred.size).astype(pred.dtype)


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: Optional[np.ndarray] = None
    v: Optional[np.ndarray] = None


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update. Returns new params; ``state`` is updated in place."""
    if params.shape != grads.shape:
        raise ValueError(f"params length {params.shape} != grads length {grads.shape}")
    if state.m is None:
        state.m = np.zeros_like(params)
        state.v = np.zeros_like(params)
    elif state.m.shape != params.shape:
        raise ValueError("Adam state does not match the parameter vector")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    state.m = b1 * state.m + (1 - b1) * grads
    state.v = b2 * state.v + (1 - b2) * grads * grads
    m_hat = state.m / (1 - b1 ** state.step)
    v_hat = state.v / (1 - b2 ** state.step)
    update = state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return (params - update).astype(params.dtype), state


@dataclass
class EarlyStopState:
    patience: int = 10
    min_delta: float = 0.0
    best_val_loss: float = math.inf
    epochs_since_improvement: int = 0


def early_stop_update(state: EarlyStopState, val_loss: float) -> tuple[EarlyStopState, bool]:
    if val_loss < state.best_val_loss - state.min_delta:
        state.best_val_loss = val_loss
        state.epochs_since_improvement = 0
    else:
        state.epochs_since_improvement += 1
    return state, state.epochs_since_improvement >= state.patience


def loss_and_grads(model: ModelParams, x: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    pred, cache = forward_cached(model, x)
    y = y.reshape(pred.shape).astype(pred.dtype)
    loss = bce_loss(pred, y)
    grads = backward(model, cache, bce_sigmoid_grad(pred, y))
    return loss, grads


def train_epoch(model: ModelParams, batches: Iterable[tuple[np.ndarray, np.ndarray]],
                opt: AdamState) -> tuple[ModelParams, float]:
    """One pass over ``batches``; one Adam step per batch. Returns the new model and mean loss."""
    theta = to_vector(model)
    losses = []
    for x, y in batches:
        cur = from_vector(model, theta)
        loss, g = loss_and_grads(cur, x, y)
        theta, opt = adam_step(theta, g, opt)
        losses.append(loss)
    return from_vector(model, theta), float(np.mean(losses)) if losses else float("nan")


def evaluate_loss(model: ModelParams, batches: Iterable[tuple[np.ndarray, np.ndarray]]) -> float:
    from .models import forward

    total, count = 0.0, 0
    for x, y in batches:
        p = forward(model, x)
        total += bce_loss(p, y.reshape(p.shape)) * p.size
        count += p.size
    return total / count if count else float("nan")


def iterate_batches(x: np.ndarray, y: np.ndarray, batch_size: int = 16, rng: Optional[np.random.Generator] = None):
    idx = np.arange(len(x)) if rng is None else rng.permutation(len(x))
    for s in range(0, len(x), batch_size):
        b = idx[s:s + batch_size]
        yield x[b], y[b]


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_loss: float


@dataclass
class FitResult:
    model: ModelParams
    history: list[EpochLog] = field(default_factory=list)
    stopped_epoch: Optional[int] = None


def fit(model: ModelParams, x: np.ndarray, y: np.ndarray, *, lr: float, epochs: int,
        batch_size: int = 16, x_val: Optional[np.ndarray] = None, y_val: Optional[np.ndarray] = None,
        patience: int = 10, min_delta: float = 0.0, seed: int = 0, restore_best: bool = True) -> FitResult:
    """Train with Adam and early stopping on validation loss (training loss if no val set)."""
    rng = np.random.default_rng(seed)
    opt = AdamState(learning_rate=lr)
    stopper = EarlyStopState(patience=patience, min_delta=min_delta)
    result = FitResult(model)
    best = model
    for epoch in range(1, epochs + 1):
        model, train_loss = train_epoch(model, iterate_batches(x, y, batch_size, rng), opt)
        if x_val is not None and len(x_val):
            val_loss = evaluate_loss(model, iterate_batches(x_val, y_val, 64))
        else:
            val_loss = train_loss
        result.history.append(EpochLog(epoch, train_loss, val_loss))
        improved_before = stopper.best_val_loss
        stopper, stop = early_stop_update(stopper, val_loss)
        if stopper.best_val_loss < improved_before:
            best = model
        if stop:
            result.stopped_epoch = epoch
            break
    result.model = best if restore_best else model
    return result


# ---------------------------------------------------------------------------
# checkpoint files
#
#   offset  size  field
#   0       4     magic b"VRUW"
#   4       2     format version (uint16, currently 1)
#   6       1     bytes per parameter: 4 (float32) or 8 (float64)
#   7       1     reserved, 0
#   8       32    sha256 digest of the canonical ArchSpec JSON
#   40      4     length L of the ArchSpec JSON (uint32)
#   44      L     ArchSpec JSON, UTF-8
#   44+L    8     parameter count N (uint64)
#   52+L    N*b   parameter vector, little-endian
#
# All integers little-endian.
# ---------------------------------------------------------------------------

MAGIC = b"VRUW"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: ModelParams, path, dtype=np.float32) -> None:
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise CheckpointError(f"unsupported checkpoint dtype {dtype}")
    spec_json = model.spec.to_json().encode("utf-8")
    theta = to_vector(model).astype(dtype.newbyteorder("<"))
    header = struct.pack("<4sHBB32sI", MAGIC, VERSION, dtype.itemsize, 0,
                         hashlib.sha256(spec_json).digest(), len(spec_json))
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(spec_json)
        fh.write(struct.pack("<Q", theta.size))
        fh.write(theta.tobytes())


def load_checkpoint(path, spec: Optional[ArchSpec] = None, dtype=None) -> ModelParams:
    from .models import build

    data = Path(path).read_bytes()
    if len(data) < 44 or data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a VRUW checkpoint")
    _, version, itemsize, _, digest, n_json = struct.unpack_from("<4sHBB32sI", data, 0)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    spec_json = data[44:44 + n_json]
    if hashlib.sha256(spec_json).digest() != digest:
        raise CheckpointError(f"{path}: ArchSpec digest mismatch")
    stored = ArchSpec.from_json(spec_json.decode("utf-8"))
    if spec is not None and spec.to_json() != stored.to_json():
        raise CheckpointError(f"{path}: checkpoint was written for a different ArchSpec")
    (n,) = struct.unpack_from("<Q", data, 44 + n_json)
    body = data[52 + n_json:]
    if itemsize not in (4, 8) or len(body) != n * itemsize:
        raise CheckpointError(f"{path}: expected {n} parameters of {itemsize} bytes, got {len(body)} bytes")
    theta = np.frombuffer(body, dtype="<f4" if itemsize == 4 else "<f8")
    dtype = np.dtype(dtype) if dtype is not None else np.dtype(f"f{itemsize}")
    template = build(stored, seed=0, dtype=dtype)
    if theta.size != template.n_params:
        raise CheckpointError(f"{path}: {theta.size} parameters, ArchSpec needs {template.n_params}")
    return from_vector(template, theta.astype(dtype))


def spec_digest(spec: ArchSpec) -> str:
    return hashlib.sha256(spec.to_json().encode()).hexdigest()


def write_log(history: list[EpochLog], path, stopped_epoch: Optional[int] = None) -> None:
    lines = ["epoch\ttrain_loss\tval_loss"]
    lines += [f"{h.epoch}\t{h.train_loss:.8g}\t{h.val_loss:.8g}" for h in history]
    if stopped_epoch is not None:
        lines.append(f"# early_stop\t{stopped_epoch}")
    Path(path).write_text("\n".join(lines) + "\n")


__all__ = [
    "AdamState", "EarlyStopState", "EpochLog", "FitResult", "adam_step", "bce_grad", "bce_loss",
    "bce_sigmoid_grad", "early_stop_update", "evaluate_loss", "fit", "iterate_batches", "load_checkpoint",
    "loss_and_grads", "save_checkpoint", "spec_digest", "train_epoch", "write_log",
]
