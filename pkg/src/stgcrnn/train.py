"""RMSE training with Adam, step-decay learning rate and early stopping."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import diffnum as dn
from .data import WindowSet
from .errors import ContractError, PoisonedStateError, TrainingAborted
from .model import GCRNNModel, forward

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    base_lr: float = 0.001
    decay_every: int = 10
    decay_ratio: float = 0.1
    min_lr: float = 2.0e-06
    batch_size: int = 64
    max_epochs: int = 100
    patience: int = 50
    hidden_units: int = 64
    num_layers: int = 2
    seed: int = 0
    clip_norm: float | None = None
    valid_fraction: float = 0.1

    def __post_init__(self):
        for name in ("base_lr", "decay_every", "decay_ratio", "min_lr", "batch_size",
                     "hidden_units", "num_layers"):
            if not getattr(self, name) > 0:
                raise ContractError(f"{name} must be positive")
        if self.max_epochs < 0 or self.patience < 0:
            raise ContractError("max_epochs and patience must be non-negative")
        if self.min_lr > self.base_lr:
            raise ContractError("min_lr must not exceed base_lr")


@dataclass
class OptimizerState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params) -> "OptimizerState":
        return cls([np.zeros_like(p.value) for p in params], [np.zeros_like(p.value) for p in params])


def lr_schedule(epoch: int, config: TrainConfig | None = None) -> float:
    """``max(base_lr * decay_ratio ** (epoch // decay_every), min_lr)``."""
    c = config or TrainConfig()
    if epoch < 0:
        raise ContractError("epoch must be non-negative")
    # dividing by an exact power of 1/ratio keeps 1e-3 -> 1e-4 -> 1e-5 exact
    lr = c.base_lr / (1.0 / c.decay_ratio) ** (epoch // c.decay_every)
    return max(lr, c.min_lr)


def rmse_loss(pred: dn.Tensor, target) -> dn.Tensor:
    target = dn.as_tensor(target)
    if pred.shape != target.shape:
        raise ContractError(f"prediction {pred.shape} and target {target.shape} differ")
    return dn.sqrt(dn.mean(dn.square(dn.sub(pred, target))))


def adam_step(params, state: OptimizerState, lr: float, grads=None):
    """One Adam update in place.  Refuses to touch anything if a gradient is NaN."""
    if grads is None:
        grads = [np.zeros_like(p.value) if p.grad is None else p.grad for p in params]
    if len(grads) != len(params) or len(state.m) != len(params):
        raise ContractError("params, grads and optimizer state disagree in length")
    for p, g in zip(params, grads):
        if g.shape != p.shape:
            raise ContractError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise PoisonedStateError(f"non-finite gradient for {p.name or 'parameter'}; step refused")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1 ** state.t, 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        p.value -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def clip_gradients(params, max_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    norm = math.sqrt(sum(float(np.square(g).sum()) for g in grads))
    if norm > max_norm:
        for g in grads:
            g *= max_norm / norm
    return norm


def batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled index batches; a trailing batch of one element is dropped."""
    order = rng.permutation(n)
    out = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(out) > 1 and len(out[-1]) == 1:
        out.pop()
    return out


def to_model_layout(arr: np.ndarray) -> np.ndarray:
    """(B, T, N, F) -> (T, N, B, F)."""
    return np.ascontiguousarray(arr.transpose(1, 2, 0, 3))


def predict_windows(model: GCRNNModel, windows: WindowSet, batch_size: int = 64) -> np.ndarray:
    """Autoregressive predictions (B, T', N) in the model's (normalized) space."""
    if len(windows) == 0:
        return np.zeros((0, model.config.horizon, windows.inputs.shape[2]))
    return np.concatenate([model.predict(windows.inputs[i:i + batch_size])
                           for i in range(0, len(windows), batch_size)])


def evaluate_loss(model: GCRNNModel, windows: WindowSet, batch_size: int = 64) -> float:
    pred = predict_windows(model, windows, batch_size)
    return float(np.sqrt(np.mean(np.square(pred - windows.targets[..., 0]))))


@dataclass
class FitResult:
    model: GCRNNModel
    history: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_valid: float = math.inf
    stopped_early: bool = False


def fit(model: GCRNNModel, train_set: WindowSet, valid_set: WindowSet, config: TrainConfig,
        on_epoch: Callable[[dict], None] | None = None,
        on_improve: Callable[[int, GCRNNModel], None] | None = None) -> FitResult:
    """Train with teacher forcing; keep the parameters with the lowest validation RMSE.

    Stops after ``max_epochs`` or once ``patience`` consecutive epochs fail to
    strictly lower the validation RMSE.
    """
    if config.max_epochs == 0:
        raise ContractError("nothing to train: max_epochs is 0")
    if len(train_set) == 0 or len(valid_set) == 0:
        raise ContractError("training and validation sets must be non-empty")
    params = model.parameters()
    state = OptimizerState.for_params(params)
    rng = np.random.default_rng(config.seed)
    result = FitResult(model)
    best_state = model.state_dict()
    wait = 0
    for epoch in range(config.max_epochs):
        lr = lr_schedule(epoch, config)
        started = time.perf_counter()
        total, count = 0.0, 0
        for idx in batches(len(train_set), config.batch_size, rng):
            x = to_model_layout(train_set.inputs[idx])
            y = to_model_layout(train_set.targets[idx])
            model.zero_grad()
            with dn.fresh_record():
                loss = rmse_loss(forward(model, x, y), y)
                dn.backward(loss)
            if config.clip_norm is not None:
                clip_gradients(params, config.clip_norm)
            adam_step(params, state, lr)
            total += loss.item() * len(idx)
            count += len(idx)
        seconds = time.perf_counter() - started
        valid = evaluate_loss(model, valid_set, config.batch_size)
        if not math.isfinite(valid):
            raise TrainingAborted(f"validation RMSE is {valid} at epoch {epoch} (lr={lr}, "
                                  f"last train RMSE={loss.item()})")
        improved = valid < result.best_valid
        record = {"epoch": epoch, "train_rmse": total / count, "valid_rmse": valid, "lr": lr,
                  "improved": improved, "seconds": seconds}
        result.history.append(record)
        log.info("epoch %d lr=%.2e train=%.5f valid=%.5f%s (%.1fs)", epoch, lr, record["train_rmse"],
                 valid, " *" if improved else "", seconds)
        if on_epoch is not None:
            on_epoch(record)
        if improved:
            result.best_valid, result.best_epoch, wait = valid, epoch, 0
            best_state = model.state_dict()
            if on_improve is not None:
                on_improve(epoch, model)
        else:
            wait += 1
            if wait > config.patience:
                result.stopped_early = True
                break
    model.load_state_dict(best_state)
    return result


def history_line(record: dict) -> str:
    return json.dumps(record, sort_keys=True)
