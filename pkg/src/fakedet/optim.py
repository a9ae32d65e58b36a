"""Binary cross-entropy, Adam, and the epoch training loop.

The loop runs a shuffled training pass (training mode, dropout and batch
statistics live) followed by a full validation pass (inference mode, no
parameter mutation) per epoch, and keeps a copy of the best
validation-loss parameters alongside the final ones.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tt
from .tensor import Tensor

BCE_CLAMP = 1e-7


class TrainingDivergence(Exception):
    """Non-finite loss; carries the epoch and batch ordinal."""

    def __init__(self, message: str, epoch: int, batch: int):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch


def bce_loss(pred: Tensor, labels) -> Tensor:
    """Mean of -[y ln p + (1-y) ln(1-p)] with p clamped to
    [1e-7, 1 - 1e-7]; pred is [B, 1], labels are 0/1 of length B."""
    if pred.ndim != 2 or pred.shape[1] != 1:
        raise ValueError(f"pred must be [B, 1], got {pred.shape}")
    y = labels.data if isinstance(labels, Tensor) else np.asarray(labels)
    if y.shape != (pred.shape[0],):
        raise ValueError(f"labels shape {y.shape} != ({pred.shape[0]},)")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    y = y.astype(pred.dtype)
    p = tt.clip(pred.reshape(pred.shape[0]), BCE_CLAMP, 1.0 - BCE_CLAMP)
    term = Tensor(y) * tt.log(p) + Tensor(1.0 - y) * tt.log(tt.sub(1.0, p))
    return tt.neg(tt.reduce_mean(term))


@dataclass
class AdamState:
    """Per-parameter moment buffers plus the shared step counter."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("betas must lie in [0, 1)")
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.t < 0:
            raise ValueError("step counter must be non-negative")

    @classmethod
    def init(cls, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8) -> "AdamState":
        return cls(lr=lr, beta1=beta1, beta2=beta2, eps=eps, t=0,
                   m=[np.zeros_like(p.data) for p in params],
                   v=[np.zeros_like(p.data) for p in params])


def adam_step(params, grads, state: AdamState):
    """One bias-corrected Adam update, in place on params and state."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads, and state buffers disagree in length")
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.data.shape}")
        m[:] = state.beta1 * m + (1.0 - state.beta1) * g
        v[:] = state.beta2 * v + (1.0 - state.beta2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


@dataclass(frozen=True)
class TrainRecord:
    epoch: int
    train_acc: float
    train_loss: float
    val_acc: float
    val_loss: float
    seconds: float


def _run_pass(model, batches, training, rng_base, adam, params):
    """One full pass; returns (accuracy, mean loss, batches seen)."""
    total, correct, loss_sum = 0, 0, 0.0
    count = 0
    for i, batch in enumerate(batches):
        count += 1
        rng_key = None if rng_base is None else rng_base + (i,)
        probs = model.forward(batch.images, training=training, rng_key=rng_key)
        loss = bce_loss(probs, batch.labels)
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingDivergence(
                f"non-finite loss {value} (epoch pass batch {i})", epoch=-1, batch=i)
        b = batch.images.shape[0]
        total += b
        loss_sum += value * b
        pred = probs.data[:, 0] >= 0.5
        y = batch.labels.data if isinstance(batch.labels, Tensor) else np.asarray(batch.labels)
        correct += int(np.sum(pred == (y == 1)))
        if training:
            for p in params:
                p.zero_grad()
            loss.backward()
            adam_step(params, [p.grad for p in params], adam)
    if total == 0:
        raise ValueError("empty batch stream")
    return correct / total, loss_sum / total, count


def fit(model, train_stream, val_stream, epochs: int, adam: AdamState | None = None,
        *, dropout_seed: int = 0, hook=None):
    """Train for ``epochs`` epochs and return (records, best).

    ``train_stream(epoch)`` must yield that epoch's (already shuffled and
    augmented) batches; ``val_stream()`` yields the fixed validation
    batches. ``best`` is a parameter/buffer snapshot from the epoch with
    the lowest validation loss, or None when epochs == 0. The model is
    left holding its final-epoch parameters.
    """
    params = model.parameters()
    if adam is None:
        adam = AdamState.init(params)
    records: list[TrainRecord] = []
    best = None
    best_loss = np.inf
    for epoch in range(epochs):
        start = time.perf_counter()
        try:
            train_acc, train_loss, _ = _run_pass(
                model, train_stream(epoch), True, (dropout_seed, epoch), adam, params)
        except TrainingDivergence as e:
            raise TrainingDivergence(
                f"non-finite training loss at epoch {epoch + 1}, batch {e.batch}",
                epoch=epoch + 1, batch=e.batch) from None
        with tt.no_grad():
            val_acc, val_loss, _ = _run_pass(model, val_stream(), False, None, None, None)
        record = TrainRecord(epoch + 1, train_acc, train_loss, val_acc, val_loss,
                             time.perf_counter() - start)
        records.append(record)
        if val_loss < best_loss:
            best_loss = val_loss
            best = {
                "epoch": epoch + 1,
                "params": {n: t.data.copy() for n, t in model.named_parameters().items()},
                "buffers": {n: b.copy() for n, b in model.named_buffers().items()},
            }
        if hook is not None:
            hook(record)
    return records, best


CURVES_HEADER = "epoch,train_acc,train_loss,val_acc,val_loss,seconds"


def write_curves(path, records: list[TrainRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(CURVES_HEADER + "\n")
        for r in records:
            f.write(f"{r.epoch},{r.train_acc:.6f},{r.train_loss:.6f},"
                    f"{r.val_acc:.6f},{r.val_loss:.6f},{r.seconds:.3f}\n")


def read_curves(path) -> list[TrainRecord]:
    with open(path, "r", encoding="utf-8") as f:
        lines = [ln.strip() for ln in f if ln.strip()]
    if not lines or lines[0] != CURVES_HEADER:
        raise ValueError(f"{path}: expected header {CURVES_HEADER!r}")
    records = []
    for ln in lines[1:]:
        parts = ln.split(",")
        if len(parts) != 6:
            raise ValueError(f"{path}: malformed row {ln!r}")
        records.append(TrainRecord(int(parts[0]), *(float(v) for v in parts[1:])))
    return records
