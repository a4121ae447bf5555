"""Offline multi-subject training: AdamW on MSE with early stopping."""
from __future__ import annotations

import csv
import hashlib
import io
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Callable

import numpy as np

from . import tensor as tn
from .dataset import LosoFold, assert_no_leakage, stack_inputs, stack_targets, train_val_split
from .model import ModelConfig, ModelParams, forward, init_params
from .tensor import ConfigError, RngState, Tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "adamw"
    lr: float = 3e-4
    weight_decay: float = 1e-2
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    batch_size: int = 128
    max_epochs: int = 1000
    patience: int = 50
    seed: int = 0
    dtype: str = "float32"
    record_timing: bool = False

    def errors(self) -> list[str]:
        errs = []
        if self.optimizer not in ("adamw", "adam"):
            errs.append(f"train.optimizer must be 'adamw' or 'adam', got {self.optimizer!r}")
        if not self.lr > 0:
            errs.append(f"train.lr must be > 0, got {self.lr}")
        if self.weight_decay < 0:
            errs.append(f"train.weight_decay must be >= 0, got {self.weight_decay}")
        if self.patience < 1:
            errs.append(f"train.patience must be >= 1, got {self.patience}")
        if self.batch_size < 1:
            errs.append(f"train.batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 1:
            errs.append(f"train.max_epochs must be >= 1, got {self.max_epochs}")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            errs.append(f"train.betas must be two values in [0, 1), got {self.betas}")
        if self.dtype not in ("float32", "float64"):
            errs.append(f"train.dtype must be 'float32' or 'float64', got {self.dtype!r}")
        return errs

    def validate(self) -> "TrainConfig":
        errs = self.errors()
        if errs:
            raise ConfigError("; ".join(errs))
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        d = dict(d)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)


# ----------------------------------------------------------------- optimizer


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "OptimizerState":
        return cls(
            {k: np.zeros_like(t.data) for k, t in params.items()},
            {k: np.zeros_like(t.data) for k, t in params.items()},
        )


def decays(name: str, value: np.ndarray) -> bool:
    """Weight decay applies to weight matrices/kernels only, never to gains or biases."""
    return value.ndim >= 2


def adam_step(params: ModelParams, state: OptimizerState, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
    """Adam with classic (coupled) L2: ``g += wd * theta`` before the moments."""
    b1, b2 = betas
    state.step += 1
    t = state.step
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        if weight_decay and decays(name, p.data):
            g = g + weight_decay * p.data
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        mhat = m / c1
        vhat = v / c2
        p.data -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(p.data.dtype, copy=False)


def adamw_step(params: ModelParams, state: OptimizerState, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-2):
    """Decoupled decay ``theta -= lr * wd * theta`` followed by a plain Adam step."""
    if weight_decay:
        for name, p in params.items():
            if p.grad is not None and decays(name, p.data):
                p.data *= p.data.dtype.type(1.0 - lr * weight_decay)
    adam_step(params, state, lr, betas, eps, 0.0)


def optimizer_step(params, state, cfg, lr=None) -> None:
    fn = adamw_step if cfg.optimizer == "adamw" else adam_step
    fn(params, state, cfg.lr if lr is None else lr, cfg.betas, cfg.eps, cfg.weight_decay)


def global_grad_norm(params: ModelParams) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            g = p.grad.astype(np.float64, copy=False)
            total += float(np.dot(g.ravel(), g.ravel()))
    return math.sqrt(total)


def grad_clip_norm(params: ModelParams, threshold: float) -> tuple[float, bool]:
    """Rescale all grads in place when their global L2 norm exceeds ``threshold``.

    Returns (pre-clip norm, whether clipping happened).
    """
    if not threshold > 0:
        raise ConfigError(f"clip threshold must be > 0, got {threshold}")
    norm = global_grad_norm(params)
    if norm > threshold:
        # shrink by a few ulps of the grad dtype so that per-element rounding
        # after the rescale cannot push the norm back above the threshold
        eps = max((np.finfo(p.grad.dtype).eps for p in params if p.grad is not None), default=0.0)
        scale = threshold / norm * (1.0 - 4.0 * float(eps))
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * p.grad.dtype.type(scale)
        return norm, True
    return norm, False


# ----------------------------------------------------------------- logging / early stopping


@dataclass
class TrainLog:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)
    best_epoch: int = -1
    data_order_digest: str = ""

    @property
    def best_val_loss(self) -> float:
        return self.val_loss[self.best_epoch] if self.best_epoch >= 0 else float("inf")

    def to_csv(self, timing: bool = False) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", "seconds"])
        for i, (tr, va) in enumerate(zip(self.train_loss, self.val_loss)):
            w.writerow([i + 1, repr(tr), repr(va), f"{self.seconds[i]:.3f}" if timing else ""])
        return buf.getvalue()


class EarlyStopper:
    """Tracks the best validation loss; signals a stop after ``patience`` epochs without gain."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = float("inf")
        self.best_epoch = -1
        self.bad_epochs = 0

    def update(self, epoch: int, val_loss: float) -> tuple[bool, bool]:
        """Returns (improved, should_stop)."""
        if val_loss < self.best:
            self.best, self.best_epoch, self.bad_epochs = val_loss, epoch, 0
            return True, False
        self.bad_epochs += 1
        return False, self.bad_epochs >= self.patience


# ----------------------------------------------------------------- loops


def mse_value(params: ModelParams, model_cfg: ModelConfig, x: np.ndarray, y: np.ndarray, batch_size=256) -> float:
    """Eval-mode MSE over a set of cycles, accumulated in float64."""
    if x.shape[0] == 0:
        return float("nan")
    total = 0.0
    with tn.no_grad():
        for i in range(0, x.shape[0], batch_size):
            pred = forward(params, x[i : i + batch_size].astype(params.dtype), model_cfg).data
            diff = pred.astype(np.float64) - y[i : i + batch_size]
            total += float(np.sum(diff * diff))
    return total / y.size


def train_step(params, model_cfg, xb, yb, rng, training=True) -> float:
    """Forward + backward on one batch; returns the batch loss."""
    pred = forward(params, xb, model_cfg, training=training, rng=rng)
    loss = tn.mse_loss(pred, yb)
    tn.backward(loss, list(params))
    return float(loss.data)


def fit(
    fold: LosoFold,
    data,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    init: ModelParams | None = None,
    on_epoch_end: Callable[[int, ModelParams, float], None] | None = None,
    val_loss_fn: Callable[[ModelParams], float] | None = None,
) -> tuple[ModelParams, TrainLog]:
    """Train on the fold's training pool and keep the best-validation parameters.

    ``data`` is a list of :class:`SubjectDataset` (the held-out subject may be
    present; it is filtered out and never batched) or a ``(train, val)`` pair
    of segment lists.
    """
    model_cfg.validate()
    train_cfg.validate()
    if isinstance(data, tuple):
        train_segs, val_segs = data
    else:
        pool = [s for sub in data if sub.subject_id in fold.train_subjects for s in sub.segments]
        split_rng = np.random.default_rng([train_cfg.seed, 1])
        train_segs, val_segs = train_val_split(fold, pool, split_rng)
    if not train_segs:
        raise ConfigError("empty training set")
    assert_no_leakage(train_segs, fold.test_subject)
    assert_no_leakage(val_segs, fold.test_subject)

    dtype = np.dtype(train_cfg.dtype)
    xtr, ytr = stack_inputs(train_segs).astype(dtype), stack_targets(train_segs).astype(dtype)
    xva, yva = stack_inputs(val_segs) if val_segs else xtr[:0], stack_targets(val_segs) if val_segs else ytr[:0]

    params = (init.astype(dtype) if init is not None else init_params(model_cfg, RngState(train_cfg.seed), dtype))
    state = OptimizerState.zeros_like(params)
    drop_rng = RngState(train_cfg.seed).spawn(2)
    shuffle = np.random.default_rng([train_cfg.seed, 3])
    stopper = EarlyStopper(train_cfg.patience)
    log_ = TrainLog()
    digest = hashlib.sha256()
    best = params.copy()
    n = xtr.shape[0]
    for epoch in range(train_cfg.max_epochs):
        t0 = time.perf_counter()
        order = shuffle.permutation(n)
        digest.update(order.astype(np.int64).tobytes())
        total = 0.0
        for i in range(0, n, train_cfg.batch_size):
            idx = order[i : i + train_cfg.batch_size]
            loss = train_step(params, model_cfg, xtr[idx], ytr[idx], drop_rng)
            optimizer_step(params, state, train_cfg)
            total += loss * len(idx)
        train_loss = total / n
        if val_loss_fn is not None:
            val_loss = float(val_loss_fn(params))
        elif xva.shape[0]:
            val_loss = mse_value(params, model_cfg, xva, yva)
        else:
            val_loss = mse_value(params, model_cfg, xtr, ytr)
        log_.train_loss.append(train_loss)
        log_.val_loss.append(val_loss)
        log_.seconds.append(time.perf_counter() - t0)
        improved, stop = stopper.update(epoch, val_loss)
        if improved:
            best = params.copy()
            log_.best_epoch = epoch
        if on_epoch_end is not None:
            on_epoch_end(epoch, params, val_loss)
        log.debug("epoch %d train %.6g val %.6g", epoch + 1, train_loss, val_loss)
        if stop:
            break
    log_.data_order_digest = digest.hexdigest()
    return best, log_
