"""Few-shot subject personalization and calibration-ratio sweeps."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .dataset import (
    CALIBRATION_RATIOS,
    SubjectDataset,
    select_calibration,
    stack_inputs,
    stack_targets,
)
from .metrics import MetricsReport, aggregate, evaluate_cycles
from .model import ModelConfig, ModelParams, predict
from .tensor import ConfigError, RngState
from .train import (
    OptimizerState,
    TrainConfig,
    global_grad_norm,
    grad_clip_norm,
    mse_value,
    optimizer_step,
    train_step,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AdaptConfig:
    lr: float = 5e-5
    steps: int = 40
    clip_threshold: float = 1.0
    optimizer: str = "adamw"
    weight_decay: float = 1e-2
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    batch_size: int = 128
    training_mode: bool = True

    def errors(self) -> list[str]:
        errs = []
        if self.steps < 1:
            errs.append(f"adapt.steps must be >= 1, got {self.steps}")
        if self.lr < 0:
            errs.append(f"adapt.lr must be >= 0, got {self.lr}")
        if not self.clip_threshold > 0:
            errs.append(f"adapt.clip_threshold must be > 0, got {self.clip_threshold}")
        if self.optimizer not in ("adamw", "adam"):
            errs.append(f"adapt.optimizer must be 'adamw' or 'adam', got {self.optimizer!r}")
        if self.batch_size < 1:
            errs.append(f"adapt.batch_size must be >= 1, got {self.batch_size}")
        return errs

    def validate(self) -> "AdaptConfig":
        errs = self.errors()
        if errs:
            raise ConfigError("; ".join(errs))
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AdaptConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown adapt config keys: {sorted(unknown)}")
        d = dict(d)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)

    def as_train_config(self) -> TrainConfig:
        return TrainConfig(
            optimizer=self.optimizer, lr=max(self.lr, 1e-300), weight_decay=self.weight_decay,
            betas=self.betas, eps=self.eps, batch_size=self.batch_size,
        )


@dataclass
class AdaptResult:
    params: ModelParams
    pre_loss: float
    post_loss: float
    trace: list[float] = field(default_factory=list)
    grad_norms: list[float] = field(default_factory=list)
    clipped_norms: list[float] = field(default_factory=list)
    aborted: bool = False


class AdaptationError(RuntimeError):
    pass


def few_shot_adapt(
    theta0: ModelParams,
    calibration,
    model_cfg: ModelConfig,
    cfg: AdaptConfig = AdaptConfig(),
    seed: int = 0,
) -> AdaptResult:
    """Fine-tune a copy of ``theta0`` on calibration cycles for ``cfg.steps`` updates.

    Every parameter is trained; optimizer moments start from zero. Each step
    runs forward -> MSE -> backward -> global-norm clip -> optimizer update.
    With at most ``batch_size`` calibration cycles every step sees all of
    them; otherwise steps walk seeded shuffled mini-batches. A non-finite loss
    aborts and returns ``theta0`` unchanged.
    """
    cfg.validate()
    segs = list(getattr(calibration, "selected", calibration))
    if not segs:
        raise AdaptationError("empty calibration set")
    x = stack_inputs(segs).astype(theta0.dtype)
    y = stack_targets(segs).astype(theta0.dtype)
    params = theta0.copy()
    state = OptimizerState.zeros_like(params)
    tcfg = cfg.as_train_config()
    drop_rng = RngState(seed).spawn(11)
    shuffle = np.random.default_rng([seed, 12])
    pre = mse_value(theta0, model_cfg, x, y)
    result = AdaptResult(params, pre, pre)
    n = x.shape[0]
    batches: list[np.ndarray] = []
    for _ in range(cfg.steps):
        if n <= cfg.batch_size:
            idx = np.arange(n)
        else:
            if not batches:
                order = shuffle.permutation(n)
                batches = [order[i : i + cfg.batch_size] for i in range(0, n, cfg.batch_size)]
            idx = batches.pop(0)
        loss = train_step(params, model_cfg, x[idx], y[idx], drop_rng, training=cfg.training_mode)
        if not math.isfinite(loss):
            log.warning("non-finite adaptation loss at step %d; returning the unadapted model", len(result.trace))
            return AdaptResult(theta0, pre, pre, result.trace + [loss], result.grad_norms, result.clipped_norms, True)
        norm, _ = grad_clip_norm(params, cfg.clip_threshold)
        result.grad_norms.append(norm)
        result.clipped_norms.append(global_grad_norm(params))
        optimizer_step(params, state, tcfg, lr=cfg.lr)
        result.trace.append(loss)
    result.post_loss = mse_value(params, model_cfg, x, y)
    return result


@dataclass
class SweepRow:
    ratio: float
    seed: int
    n_calibration: int
    n_eval: int
    pre_loss: float
    post_loss: float
    eval_mse: float
    report: MetricsReport
    cycles: list = field(repr=False, default_factory=list)
    eval_ids: list[str] = field(repr=False, default_factory=list)
    calibration_ids: list[str] = field(repr=False, default_factory=list)


def evaluate_params(params: ModelParams, model_cfg: ModelConfig, segments, muscles=None):
    """Eval-mode predictions on ``segments`` -> (mse, per-cycle metrics, report)."""
    x = stack_inputs(segments)
    y = stack_targets(segments)
    pred = predict(params, x, model_cfg).astype(np.float64)
    mse = float(np.mean((pred - y) ** 2))
    cycles = evaluate_cycles(y, pred, segments)
    return mse, cycles, aggregate(cycles, muscles)


def calibration_sweep(
    theta0: ModelParams,
    test: SubjectDataset,
    model_cfg: ModelConfig,
    ratios=CALIBRATION_RATIOS,
    policy: str = "first",
    seeds=(0,),
    cfg: AdaptConfig = AdaptConfig(),
    muscles=None,
) -> list[SweepRow]:
    """Zero-shot row plus one adapted row per (ratio, seed).

    Metrics at a ratio are computed on that ratio's non-calibration cycles only.
    """
    ratio_list = [0.0] + sorted({float(r) for r in ratios if r != 0})
    for r in ratio_list[1:]:
        if not any(math.isclose(r, a) for a in CALIBRATION_RATIOS):
            raise ConfigError(f"calibration ratio {r} not in {CALIBRATION_RATIOS}")
    rows: list[SweepRow] = []
    zero = None
    for seed in seeds:
        for ratio in ratio_list:
            if ratio == 0.0:
                if zero is None:
                    zero = evaluate_params(theta0, model_cfg, test.segments, muscles)
                mse, cycles, report = zero
                rows.append(
                    SweepRow(0.0, seed, 0, len(test.segments), float("nan"), float("nan"), mse, report, cycles,
                             [s.uid for s in test.segments], [])
                )
                continue
            sel = select_calibration(test.segments, ratio, policy, np.random.default_rng([seed, 21]))
            if set(sel.selected_cycle_ids) & set(sel.remaining_eval_cycle_ids):
                raise AssertionError("calibration and evaluation cycles overlap")
            res = few_shot_adapt(theta0, sel, model_cfg, cfg, seed=seed)
            if sel.remaining:
                mse, cycles, report = evaluate_params(res.params, model_cfg, sel.remaining, muscles)
            else:
                raise ConfigError(f"ratio {ratio} leaves no cycles for evaluation")
            rows.append(
                SweepRow(ratio, seed, len(sel.selected), len(sel.remaining), res.pre_loss, res.post_loss, mse,
                         report, cycles, sel.remaining_eval_cycle_ids, sel.selected_cycle_ids)
            )
    return rows
