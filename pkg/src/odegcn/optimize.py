"""Adam, mini-batch training with early stopping, and first-order MAML.

Models are driven through a small duck-typed interface: ``init_params(rng)``,
``loss_and_grad(flat, samples)`` and ``loss(flat, samples)``, where
``samples`` supports ``len()`` and ``take(index_array)``.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or gradient."""


class TrainingInterrupted(Exception):
    """Raised from :func:`train` on interrupt; carries the best parameters and partial history."""

    def __init__(self, best, history):
        super().__init__("training interrupted")
        self.best = best
        self.history = history


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 64
    patience: int = 30
    max_epochs: int = 500
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    loss_kind: str = "mse"
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.patience < 1:
            raise ValueError("patience must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be non-negative")
        if not self.adam_epsilon > 0:
            raise ValueError("adam_epsilon must be positive")
        self.loss_kind = str(self.loss_kind).lower()


@dataclass
class MamlConfig:
    inner_lr: float = 0.00005
    outer_lr: float = 0.0005
    iterations: int = 200
    inner_steps: int = 1

    def __post_init__(self):
        if self.inner_lr < 0 or not self.outer_lr > 0:
            raise ValueError("MAML learning rates must be positive")
        if self.iterations < 0 or self.inner_steps < 1:
            raise ValueError("invalid MAML iteration counts")


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, size: int) -> "AdamState":
        return cls(np.zeros(size), np.zeros(size), 0)


def adam_step(state: AdamState, params: np.ndarray, grad: np.ndarray, cfg: TrainConfig) -> np.ndarray:
    """Bias-corrected Adam update; advances ``state`` and returns new parameters."""
    grad = np.asarray(grad, dtype=float)
    if grad.shape != params.shape or state.m.shape != params.shape:
        raise ValueError(f"shape mismatch: params {params.shape}, grad {grad.shape}, state {state.m.shape}")
    if not np.all(np.isfinite(grad)):
        raise DivergenceError("non-finite gradient entries")
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    state.step += 1
    state.m = b1 * state.m + (1.0 - b1) * grad
    state.v = b2 * state.v + (1.0 - b2) * grad * grad
    m_hat = state.m / (1.0 - b1 ** state.step)
    v_hat = state.v / (1.0 - b2 ** state.step)
    return params - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.adam_epsilon)


@dataclass
class History:
    epochs: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False

    def append(self, epoch, train_loss, val_loss):
        self.epochs.append(epoch)
        self.train_loss.append(train_loss)
        self.val_loss.append(val_loss)

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_loss"])
            for row in zip(self.epochs, self.train_loss, self.val_loss):
                w.writerow([row[0], repr(row[1]), repr(row[2])])


def train(model, train_set, val_set, cfg: TrainConfig, init=None, on_step=None):
    """Mini-batch Adam with validation early stopping.

    Samples are reshuffled every epoch from ``cfg.seed``. After each epoch the
    full training and validation losses are recorded; training stops once
    ``cfg.patience`` epochs pass without a strictly lower validation loss.
    Returns ``(best_params, history)`` where ``best_params`` had the lowest
    validation loss seen.

    ``on_step(params)`` is called after every optimizer update.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValueError("training and validation sets must be nonempty")
    rng = np.random.default_rng(cfg.seed)
    drawn = model.init_params(rng)  # always drawn so the shuffle stream ignores ``init``
    params = drawn if init is None else np.array(init, dtype=float)
    state = AdamState.zeros(params.size)
    history = History()
    best = params.copy()
    best_val = math.inf
    since_best = 0
    m = len(train_set)
    try:
        for epoch in range(1, cfg.max_epochs + 1):
            order = rng.permutation(m)
            for start in range(0, m, cfg.batch_size):
                batch = train_set.take(order[start:start + cfg.batch_size])
                if not batch.valid.any():
                    continue
                loss, grad = model.loss_and_grad(params, batch, cfg.loss_kind)
                if not math.isfinite(loss):
                    raise DivergenceError(f"non-finite training loss at epoch {epoch}")
                params = adam_step(state, params, grad, cfg)
                if on_step is not None:
                    on_step(params)
            tr = model.loss(params, train_set, cfg.loss_kind)
            va = model.loss(params, val_set, cfg.loss_kind)
            if not (math.isfinite(tr) and math.isfinite(va)):
                raise DivergenceError(f"non-finite loss at epoch {epoch}: train={tr}, val={va}")
            history.append(epoch, tr, va)
            if va < best_val:
                best_val, best, since_best = va, params.copy(), 0
                history.best_epoch = epoch
            else:
                since_best += 1
                if since_best >= cfg.patience:
                    history.stopped_early = True
                    log.debug("early stop at epoch %d (best %d)", epoch, history.best_epoch)
                    break
    except KeyboardInterrupt:
        raise TrainingInterrupted(best, history) from None
    return best, history


def split_task(task):
    """Support (first half) and query (second half) of a task's samples."""
    k = len(task)
    if k < 2:
        raise ValueError(f"task with {k} samples cannot be split into support and query halves")
    half = k // 2
    return task.take(np.arange(half)), task.take(np.arange(half, k))


def maml_init(model, tasks, cfg: MamlConfig, init=None, seed: int = 0, loss_kind=None) -> np.ndarray:
    """First-order MAML meta-initialization.

    Each iteration adapts the current parameters on every task's support
    half with ``inner_steps`` gradient steps, takes the query-half gradient
    at the adapted parameters, and moves the meta-parameters by plain
    gradient descent along the task-averaged query gradient.
    """
    params = model.init_params(np.random.default_rng(seed)) if init is None else np.array(init, dtype=float)
    splits = [split_task(t) for t in tasks]
    if not splits and cfg.iterations:
        raise ValueError("MAML needs at least one task")
    for _ in range(cfg.iterations):
        meta_grad = np.zeros_like(params)
        for support, query in splits:
            adapted = params
            for _ in range(cfg.inner_steps):
                _, g = model.loss_and_grad(adapted, support, loss_kind)
                adapted = adapted - cfg.inner_lr * g
            _, gq = model.loss_and_grad(adapted, query, loss_kind)
            meta_grad += gq
        meta_grad /= len(splits)
        if not np.all(np.isfinite(meta_grad)):
            raise DivergenceError("non-finite MAML meta-gradient")
        params = params - cfg.outer_lr * meta_grad
    return params


def chunk_tasks(samples, count: int):
    """Split a sample set into ``count`` contiguous tasks."""
    idx = np.array_split(np.arange(len(samples)), count)
    return [samples.take(i) for i in idx if len(i) > 0]
