"""Optimization and evaluation: rectified Adam, MAE training loop with
validation-based early stopping, forecasting metrics, and the
hyperparameter sweep / embedding ablation drivers.

The loop trains on z-score-normalized targets; reported metrics are always
computed after inverting the normalization, so optimization scale and
reporting scale stay separate. Per-epoch batch order comes from a
permutation seeded by (seed, epoch), and gradient accumulation order is
fixed by the tape, so a seed pins the whole history bit for bit.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field, replace
from itertools import product
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from . import reference
from .autodiff import Tape, Tensor
from .data import NormStats, SampleSet, invert_zscore, iterate_batches
from .errors import ConfigurationError, NumericError
from .model import ModelConfig, ModelParams, forward, mae_loss

EVAL_BATCH = 256  # fixed evaluation chunking keeps reported metrics bit-stable


@dataclass
class TrainConfig:
    epochs: int = 400
    batch_size: int = 64
    lr: float = 1e-3
    patience: int = 40
    seed: int = 0
    shuffle: bool = True
    clip_grad_norm: float | None = None
    mape_mask_threshold: float = 1e-3

    def __post_init__(self):
        if self.patience < 1:
            raise ConfigurationError(f"patience must be >= 1, got {self.patience}")
        if not self.lr > 0:
            raise ConfigurationError(f"lr must be positive, got {self.lr}")
        if self.epochs < 1:
            raise ConfigurationError(f"epochs must be >= 1, got {self.epochs}")


# ---------------------------------------------------------------------------
# rectified Adam
# ---------------------------------------------------------------------------

@dataclass
class RAdamState:
    """Per-parameter moment estimates plus the shared step counter."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def radam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray],
               state: RAdamState) -> Mapping[str, Tensor]:
    """One rectified-Adam update, in place, in fixed parameter order.

    While the variance rectification term rho_t is <= 4 the update falls
    back to bias-corrected momentum (lr * m_hat); beyond that the step is
    scaled by the rectification factor over the bias-corrected second
    moment.
    """
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1 ** t
    bias2 = 1.0 - b2 ** t
    rho_inf = 2.0 / (1.0 - b2) - 1.0
    rho = rho_inf - 2.0 * t * (b2 ** t) / bias2
    if rho > 4.0:
        rect = math.sqrt(((rho - 4.0) * (rho - 2.0) * rho_inf)
                         / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho))
    else:
        rect = None

    for name, tensor in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter '{name}'")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(tensor.data)
            state.v[name] = np.zeros_like(tensor.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / bias1
        if rect is None:
            tensor.data -= state.lr * m_hat
        else:
            v_hat = np.sqrt(v / bias2)
            tensor.data -= state.lr * rect * m_hat / (v_hat + state.eps)
    return params


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

@dataclass
class MetricsReport:
    """MAE / RMSE / masked MAPE on the raw scale.

    ``mape`` is a percentage, or None when every target fell under the
    mask threshold (undefined, never reported as 0).
    """

    mae: float
    rmse: float
    mape: float | None
    mape_mask_threshold: float
    masked_count: int
    total_count: int

    def __post_init__(self):
        # mean |e| <= sqrt(mean e^2) always; allow only rounding slack
        assert self.mae <= self.rmse + 1e-12, (self.mae, self.rmse)

    def to_dict(self) -> dict:
        return {
            "mae": self.mae,
            "rmse": self.rmse,
            "mape_percent": self.mape,
            "mape_mask_threshold": self.mape_mask_threshold,
            "masked_targets": self.masked_count,
            "total_targets": self.total_count,
        }


def evaluate_metrics(yhat_raw: np.ndarray, y_raw: np.ndarray,
                     mask_threshold: float = 1e-3) -> MetricsReport:
    """MAE = mean|e|, RMSE = sqrt(mean e^2), MAPE over targets with
    |y| >= mask_threshold only."""
    yhat = np.asarray(yhat_raw, dtype=np.float64)
    y = np.asarray(y_raw, dtype=np.float64)
    if yhat.shape != y.shape:
        raise ConfigurationError(f"metric shapes differ: {yhat.shape} vs {y.shape}")
    err = yhat - y
    mae = float(np.mean(np.abs(err)))
    rmse = float(np.sqrt(np.mean(err * err)))
    keep = np.abs(y) >= mask_threshold
    if keep.any():
        mape = float(100.0 * np.mean(np.abs(err[keep]) / np.abs(y[keep])))
    else:
        mape = None
    return MetricsReport(mae=mae, rmse=rmse, mape=mape,
                         mape_mask_threshold=mask_threshold,
                         masked_count=int(y.size - keep.sum()),
                         total_count=int(y.size))


# ---------------------------------------------------------------------------
# early stopping
# ---------------------------------------------------------------------------

@dataclass
class EarlyStopState:
    patience: int
    best: float = math.inf
    best_epoch: int = -1
    epochs_seen: int = 0
    epochs_since_best: int = 0


def early_stop_update(state: EarlyStopState, val_mae: float) -> str:
    """Feed one validation value; returns 'continue' or 'stop'.

    Improvement means strictly lower by more than 1e-9; stop once
    ``patience`` consecutive epochs brought none.
    """
    if not math.isfinite(val_mae):
        raise NumericError(f"validation MAE is not finite: {val_mae}")
    if state.best - val_mae > 1e-9:
        state.best = val_mae
        state.best_epoch = state.epochs_seen
        state.epochs_since_best = 0
    else:
        state.epochs_since_best += 1
    state.epochs_seen += 1
    return "stop" if state.epochs_since_best >= state.patience else "continue"


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_mae: float
    val_rmse: float
    val_mape: float | None
    seconds: float


@dataclass
class TrainResult:
    params: ModelParams            # checkpoint with the lowest validation MAE
    history: list
    best_val_mae: float
    best_epoch: int
    stopped_early: bool
    diverged: bool

    @property
    def epochs_ran(self) -> int:
        return len(self.history)


def predict_split(params: ModelParams, split: SampleSet,
                  batch_size: int = EVAL_BATCH) -> tuple[np.ndarray, np.ndarray]:
    """Eval-mode forecasts for a whole split; returns normalized (yhat, y)."""
    preds, targets = [], []
    for x, y, tf in iterate_batches(split, batch_size, shuffle=False):
        preds.append(forward(x, tf, params, mode="eval").data)
        targets.append(y)
    return np.concatenate(preds, axis=0), np.concatenate(targets, axis=0)


def evaluate_split(params: ModelParams, split: SampleSet, stats: NormStats,
                   mask_threshold: float = 1e-3,
                   batch_size: int = EVAL_BATCH) -> MetricsReport:
    """Raw-scale metrics for a split (predictions are inverse-normalized)."""
    yhat, y = predict_split(params, split, batch_size=batch_size)
    return evaluate_metrics(invert_zscore(yhat, stats), invert_zscore(y, stats),
                            mask_threshold=mask_threshold)


def train(params: ModelParams, train_set: SampleSet, val_set: SampleSet,
          config: TrainConfig, stats: NormStats) -> TrainResult:
    """Shuffled-batch MAE training with RAdam and validation early stopping.

    The checkpoint with the lowest validation MAE is retained (any strict
    improvement updates it; the early-stop patience counter uses its own
    1e-9 tolerance). A non-finite loss or gradient aborts the run and
    returns the last good checkpoint, flagged ``diverged``.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise ConfigurationError("train and validation splits must be non-empty")
    opt = RAdamState(lr=config.lr)
    stopper = EarlyStopState(patience=config.patience)
    names = params.names()
    dropout_rng = np.random.default_rng((config.seed, 0xD0))

    best = params.copy()
    best_val = math.inf
    best_epoch = -1
    history: list[EpochRecord] = []
    stopped_early = False
    diverged = False

    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        losses = []
        try:
            for x, y, tf in iterate_batches(train_set, config.batch_size,
                                            shuffle=config.shuffle,
                                            seed=(config.seed, epoch)):
                with Tape() as tape:
                    yhat = forward(x, tf, params, mode="train", rng=dropout_rng)
                    loss = mae_loss(yhat, Tensor(y))
                grad_map = tape.gradient(loss, wrt=[params.tensors[n] for n in names])
                grads = {n: grad_map[params.tensors[n]] for n in names}
                if config.clip_grad_norm is not None:
                    _clip_global_norm(grads, config.clip_grad_norm)
                radam_step(params.tensors, grads, opt)
                losses.append(loss.item())
            val = evaluate_split(params, val_set, stats,
                                 mask_threshold=config.mape_mask_threshold)
        except NumericError:
            diverged = True
            break
        record = EpochRecord(epoch=epoch, train_loss=float(np.mean(losses)),
                             val_mae=val.mae, val_rmse=val.rmse, val_mape=val.mape,
                             seconds=time.perf_counter() - t0)
        history.append(record)
        if val.mae < best_val:
            best_val = val.mae
            best_epoch = epoch
            best = params.copy()
        if early_stop_update(stopper, val.mae) == "stop":
            stopped_early = True
            break

    return TrainResult(params=best, history=history, best_val_mae=best_val,
                       best_epoch=best_epoch, stopped_early=stopped_early,
                       diverged=diverged)


def _clip_global_norm(grads: dict, max_norm: float) -> None:
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total > max_norm:
        factor = max_norm / total
        for g in grads.values():
            g *= factor


def write_history_csv(history: Iterable[EpochRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_mae", "val_rmse", "val_mape", "seconds"])
        for rec in history:
            writer.writerow([rec.epoch, repr(rec.train_loss), repr(rec.val_mae),
                             repr(rec.val_rmse),
                             "" if rec.val_mape is None else repr(rec.val_mape),
                             f"{rec.seconds:.6f}"])


# ---------------------------------------------------------------------------
# hyperparameter sweep
# ---------------------------------------------------------------------------

@dataclass
class SweepResult:
    d_model: int
    n_layers: int
    n_heads: int
    lr: float
    val_mae: float
    val_rmse: float
    val_mape: float | None
    train_loss: float
    epochs_ran: int
    seconds: float


def grid_search(base_config: ModelConfig, grid: dict, train_set: SampleSet,
                val_set: SampleSet, stats: NormStats, train_config: TrainConfig,
                budget_epochs: int | None = None) -> list[SweepResult]:
    """Train every valid grid combination and rank by validation MAE.

    ``grid`` may hold lists under 'd_model', 'n_layers' ('L'), 'n_heads'
    ('h') and 'lr'; missing axes default to the base configuration.
    Combinations where the head count does not divide d_model are skipped.
    """
    axes = {
        "d_model": grid.get("d_model", [base_config.d_model]),
        "n_layers": grid.get("n_layers", grid.get("L", [base_config.n_layers])),
        "n_heads": grid.get("n_heads", grid.get("h", [base_config.n_heads])),
        "lr": grid.get("lr", [train_config.lr]),
    }
    if any(len(v) == 0 for v in axes.values()):
        raise ConfigurationError("sweep grid axes must be non-empty")

    results = []
    for d_model, n_layers, n_heads, lr in product(*axes.values()):
        if d_model % n_heads != 0 or d_model <= base_config.input_steps:
            continue
        config = replace(base_config, d_model=d_model, n_layers=n_layers, n_heads=n_heads)
        tc = replace(train_config, lr=lr,
                     epochs=budget_epochs or train_config.epochs)
        t0 = time.perf_counter()
        run = train(ModelParams(config), train_set, val_set, tc, stats)
        last = run.history[-1] if run.history else None
        best_rec = min(run.history, key=lambda r: r.val_mae, default=None)
        results.append(SweepResult(
            d_model=d_model, n_layers=n_layers, n_heads=n_heads, lr=lr,
            val_mae=run.best_val_mae,
            val_rmse=best_rec.val_rmse if best_rec else math.inf,
            val_mape=best_rec.val_mape if best_rec else None,
            train_loss=last.train_loss if last else math.inf,
            epochs_ran=run.epochs_ran,
            seconds=time.perf_counter() - t0))
    results.sort(key=lambda r: r.val_mae)
    return results


def write_sweep_csv(results: Iterable[SweepResult], path) -> None:
    opt = reference.BEST_HYPERPARAMETERS
    with open(path, "w", newline="") as fh:
        fh.write(f"# full-scale reference optimum: d_model={opt['d_model']} "
                 f"L={opt['n_layers']} h={opt['n_heads']}\n")
        writer = csv.writer(fh)
        writer.writerow(["d_model", "L", "h", "lr", "val_mae", "val_rmse",
                         "val_mape", "train_loss", "epochs", "seconds"])
        for r in results:
            writer.writerow([r.d_model, r.n_layers, r.n_heads, repr(r.lr),
                             repr(r.val_mae), repr(r.val_rmse),
                             "" if r.val_mape is None else repr(r.val_mape),
                             repr(r.train_loss), r.epochs_ran, f"{r.seconds:.3f}"])


# ---------------------------------------------------------------------------
# embedding ablation
# ---------------------------------------------------------------------------

ABLATION_VARIANTS = tuple(
    (te, pe) for te in (False, True) for pe in ("none", "fixed", "learnable"))


@dataclass
class AblationResult:
    time_embedding: bool
    positional_mode: str
    val_mae: float
    val_rmse: float
    val_mape: float | None
    seconds: float


def run_embedding_ablation(base_config: ModelConfig, train_set: SampleSet,
                           val_set: SampleSet, stats: NormStats,
                           train_config: TrainConfig) -> list[AblationResult]:
    """Train the six {time embedding off/on} x {positional none/fixed/learnable}
    variants under identical budgets."""
    rows = []
    for te, pe in ABLATION_VARIANTS:
        config = replace(base_config, use_time_embedding=te, positional_mode=pe)
        t0 = time.perf_counter()
        run = train(ModelParams(config), train_set, val_set, train_config, stats)
        best_rec = min(run.history, key=lambda r: r.val_mae, default=None)
        rows.append(AblationResult(
            time_embedding=te, positional_mode=pe,
            val_mae=run.best_val_mae,
            val_rmse=best_rec.val_rmse if best_rec else math.inf,
            val_mape=best_rec.val_mape if best_rec else None,
            seconds=time.perf_counter() - t0))
    return rows


def write_ablation_csv(rows: Iterable[AblationResult], path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("# reference_* columns are published full-scale PeMSD4 results, "
                 "not desk-scale targets\n")
        writer = csv.writer(fh)
        writer.writerow(["time_embedding", "positional_embedding", "val_mae",
                         "val_rmse", "val_mape", "reference_mae", "reference_rmse",
                         "reference_mape", "seconds"])
        for r in rows:
            ref = reference.EMBEDDING_ABLATION_PEMSD4[(r.time_embedding, r.positional_mode)]
            writer.writerow([r.time_embedding, r.positional_mode,
                             repr(r.val_mae), repr(r.val_rmse),
                             "" if r.val_mape is None else repr(r.val_mape),
                             ref["mae"], ref["rmse"], ref["mape"],
                             f"{r.seconds:.3f}"])
