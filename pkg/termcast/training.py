"""
Training loop, metrics, historical-average baseline and synthetic data.

All flow-valued comparisons are done in original units when a
NormalizationParams is supplied.
"""

import logging
import math
from typing import List, Optional, Protocol, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field
from tqdm import tqdm

from termcast.components import InputInstance, InstanceBatch, PreparedDataset, stack_instances
from termcast.config import (
    DAYS_PER_WEEK,
    SECONDS_PER_DAY,
    SYNTH_PERSISTENCE,
    SYNTH_START_TIME,
    SYNTH_TRANSFER,
    ModelConfig,
    TrainConfig,
)
from termcast.errors import EmptyInputError, InvalidArgumentError, NumericsError, ShapeError
from termcast.flow_grid import FlowSeries, FlowTensor, NormalizationParams, check_interval, interval_slot
from termcast.nn_core import Adam, Tape, make_rng
from termcast.termcast_model import TermCastModel

logger = logging.getLogger(__name__)

PREDICT_CHUNK = 256


class Predictor(Protocol):
    def predict(self, data: InstanceBatch) -> np.ndarray: ...


class EvalReport(BaseModel):
    rmse: float = Field(ge=0.0)
    mae: float = Field(ge=0.0)
    per_epoch_losses: List[float] = Field(default_factory=list)
    seed: int = 0
    epochs_ran: int = 0


# ============= Metrics =============

def _as_array(flows) -> np.ndarray:
    if isinstance(flows, np.ndarray):
        return flows.astype(np.float64, copy=False)
    return np.stack([f.values if isinstance(f, FlowTensor) else np.asarray(f, dtype=np.float64) for f in flows])


def _errors(pred, truth) -> np.ndarray:
    if len(pred) != len(truth):
        raise ShapeError(f"prediction count {len(pred)} does not match truth count {len(truth)}")
    if len(pred) == 0:
        raise EmptyInputError("no predictions to score")
    p, t = _as_array(pred), _as_array(truth)
    if p.shape != t.shape:
        raise ShapeError(f"prediction shape {p.shape} does not match truth shape {t.shape}")
    return p - t


def rmse(pred: Union[np.ndarray, Sequence[FlowTensor]], truth: Union[np.ndarray, Sequence[FlowTensor]]) -> float:
    """Root of the mean squared elementwise error over all tensors."""
    return float(np.sqrt(np.mean(_errors(pred, truth) ** 2)))


def mae(pred: Union[np.ndarray, Sequence[FlowTensor]], truth: Union[np.ndarray, Sequence[FlowTensor]]) -> float:
    """Mean absolute elementwise error over all tensors."""
    return float(np.mean(np.abs(_errors(pred, truth))))


# ============= Evaluation =============

def _as_batch(instances: Union[InstanceBatch, Sequence[InputInstance]]) -> InstanceBatch:
    if isinstance(instances, InstanceBatch):
        return instances
    return stack_instances(list(instances))


def predict_all(model: Predictor, batch: InstanceBatch) -> np.ndarray:
    """Normalized predictions for every row, computed in fixed-size chunks."""
    parts = [model.predict(batch.subset(np.arange(i, min(i + PREDICT_CHUNK, len(batch)))))
             for i in range(0, len(batch), PREDICT_CHUNK)]
    return np.concatenate(parts)


def evaluate(
    model: Predictor,
    test_instances: Union[InstanceBatch, Sequence[InputInstance]],
    norm: Optional[NormalizationParams] = None,
) -> EvalReport:
    """
    Score a model on instances, rescaling both sides back to flow counts.

    Args:
        model: Anything with ``predict(InstanceBatch) -> [B, 2, H, W]``
        test_instances: Normalized instances
        norm: Training-portion normalization; None keeps normalized units

    Returns:
        EvalReport with rmse and mae
    """
    batch = _as_batch(test_instances)
    pred, truth = predict_all(model, batch), batch.target
    if norm is not None:
        pred, truth = norm.invert(pred), norm.invert(truth)
    return EvalReport(rmse=rmse(pred, truth), mae=mae(pred, truth), seed=getattr(model, "seed", 0))


def ha_baseline(
    train_series: FlowSeries,
    test_instances: Sequence[InputInstance],
    norm: Optional[NormalizationParams] = None,
) -> EvalReport:
    """
    Historical average: mean of the training tensors in the target's
    (time-of-day, weekday) slot, falling back to the overall training mean.

    ``train_series`` and the instances must be in the same units.
    """
    if len(train_series) == 0:
        raise EmptyInputError("historical average needs a non-empty training series")
    if not test_instances:
        raise EmptyInputError("historical average needs test instances")

    slots = {}
    for i in range(len(train_series)):
        slots.setdefault(interval_slot(train_series, i), []).append(i)
    slot_means = {key: train_series.values[idx].mean(axis=0) for key, idx in slots.items()}
    fallback = train_series.values.mean(axis=0)

    pred = np.stack([slot_means.get((inst.time_of_day, inst.day_of_week), fallback) for inst in test_instances])
    truth = np.stack([inst.target for inst in test_instances])
    if norm is not None:
        pred, truth = norm.invert(pred), norm.invert(truth)
    missing = sum((inst.time_of_day, inst.day_of_week) not in slot_means for inst in test_instances)
    if missing:
        logger.warning("%d test targets fell back to the global training mean", missing)
    return EvalReport(rmse=rmse(pred, truth), mae=mae(pred, truth))


# ============= Training =============

def validation_split(count: int, fraction: float) -> int:
    """Number of trailing instances held out for validation (0 when nothing would remain to fit)."""
    n_val = int(math.floor(count * fraction))
    return 0 if n_val >= count else n_val


def train(
    model,
    train_instances: Union[InstanceBatch, Sequence[InputInstance]],
    cfg: TrainConfig,
    norm: Optional[NormalizationParams] = None,
    show_progress: bool = False,
):
    """
    Minimize the batch-mean TERMCast loss with Adam.

    The chronological tail ``cfg.validation_fraction`` of the instances is the
    validation set. Parameters from the best validation-RMSE epoch are
    restored at the end; training stops after ``cfg.early_stop_patience``
    epochs without improvement. With no validation instances the final
    parameters are kept and the report scores the fitting set.

    Args:
        model: TermCastModel to train in place
        train_instances: Normalized training instances in chronological order
        cfg: Epochs, batch size, learning rate, shuffle seed, patience
        norm: Reports validation metrics in original units when given
        show_progress: Show a tqdm bar over epochs

    Returns:
        (model, EvalReport on the validation set)
    """
    data = _as_batch(train_instances) if len(train_instances) else None
    if data is None:
        raise EmptyInputError("cannot train on an empty instance set")
    n_val = validation_split(len(data), cfg.validation_fraction)
    n_fit = len(data) - n_val
    fit = data.subset(np.arange(n_fit))
    val = data.subset(np.arange(n_fit, len(data))) if n_val else None

    rng = make_rng(cfg.seed)
    optimizer = Adam(model.trainable_parameters(), lr=cfg.lr)
    losses: List[float] = []
    best_rmse, best_state, since_best = math.inf, None, 0
    epochs_ran = 0

    bar = tqdm(range(cfg.epochs), desc="epochs", disable=not show_progress)
    for epoch in bar:
        order = rng.permutation(n_fit)
        total = 0.0
        for start in range(0, n_fit, cfg.batch_size):
            batch = fit.subset(order[start:start + cfg.batch_size])
            optimizer.zero_grad()
            with Tape() as tape:
                out = model.forward(batch)
                batch_loss = model.loss(out, batch.target)
            value = batch_loss.item()
            if not math.isfinite(value):
                raise NumericsError(f"loss became {value} at epoch {epoch}")
            tape.backward(batch_loss)
            optimizer.step()
            total += value * len(batch)
        losses.append(total / n_fit)
        epochs_ran = epoch + 1

        if val is None:
            bar.set_postfix(loss=f"{losses[-1]:.5f}")
            continue
        val_rmse = evaluate(model, val, norm).rmse
        bar.set_postfix(loss=f"{losses[-1]:.5f}", val_rmse=f"{val_rmse:.4f}")
        logger.debug("epoch %d: loss=%.6f val_rmse=%.6f", epoch, losses[-1], val_rmse)
        if val_rmse < best_rmse:
            best_rmse, best_state, since_best = val_rmse, model.state_dict(), 0
        else:
            since_best += 1
            if since_best >= cfg.early_stop_patience:
                logger.info("Early stop after %d epochs (best val RMSE %.4f)", epochs_ran, best_rmse)
                break

    if best_state is not None:
        model.load_state_dict(best_state)
    report = evaluate(model, val if val is not None else fit, norm)
    return model, report.model_copy(update={"per_epoch_losses": losses, "seed": cfg.seed, "epochs_ran": epochs_ran})


def fit_and_evaluate(
    dataset: PreparedDataset,
    model_config: ModelConfig,
    cfg: TrainConfig,
    seed: int,
    show_progress: bool = False,
):
    """
    Initialize a model from ``seed``, train it, and score it on the test split.

    The seed drives both parameter initialization and the batch order.

    Returns:
        (trained model, test EvalReport carrying the training losses)
    """
    model_config = model_config.for_series(
        dataset.series.height, dataset.series.width, dataset.series.intervals_per_day)
    model = TermCastModel(model_config, seed=seed)
    model, fit_report = train(model, dataset.train_instances, cfg.model_copy(update={"seed": seed}),
                              norm=dataset.norm, show_progress=show_progress)
    report = evaluate(model, dataset.test_instances, dataset.norm)
    logger.info("%s/%s seed=%d: test RMSE %.4f MAE %.4f after %d epochs", model_config.variant.value,
                model_config.fusion.value, seed, report.rmse, report.mae, fit_report.epochs_ran)
    return model, report.model_copy(update={
        "per_epoch_losses": fit_report.per_epoch_losses, "seed": seed, "epochs_ran": fit_report.epochs_ran})


# ============= Synthetic Data =============

def synth_generate(
    seed: int,
    height: int,
    width: int,
    weeks: int,
    interval_hours: float = 1.0,
    daily_amp: float = 8.0,
    weekly_amp: float = 4.0,
    noise_std: float = 1.0,
    start_time: int = SYNTH_START_TIME,
    base_range: Tuple[float, float] = (10.0, 20.0),
    persistence: Tuple[float, float] = SYNTH_PERSISTENCE,
    transfer: float = SYNTH_TRANSFER,
) -> FlowSeries:
    """
    Seeded flow series with daily and weekly periodicity.

    value = base + daily_amp * sin(2*pi*tod/ipd + phase) + weekly_amp * dayfactor[dow]
    + noise, clipped at 0. base, phase and dayfactor are drawn per region and
    channel. The noise is Gaussian with standard deviation noise_std in every
    series and carries over between adjacent intervals (see _flow_anomalies);
    persistence=(0, 0) with transfer=0 gives independent noise.

    Args:
        seed: PRNG seed
        height: Grid rows
        width: Grid columns
        weeks: Series length in weeks (>= 3)
        interval_hours: Interval length; must divide a day
        daily_amp: Amplitude of the daily sinusoid
        weekly_amp: Scale of the per-weekday offsets
        noise_std: Gaussian noise standard deviation
        start_time: Epoch seconds of interval 0
        base_range: Range of the per-region base level
        persistence: Range of the per-series lag-one noise coefficient, in [0, 1)
        transfer: Share of a region's previous outflow anomaly that enters
            its linked region as inflow anomaly

    Returns:
        FlowSeries of weeks * intervals_per_week tensors
    """
    if weeks < 3:
        raise InvalidArgumentError(f"synthetic data needs at least 3 weeks, got {weeks}")
    if height < 1 or width < 1:
        raise InvalidArgumentError(f"grid must be at least 1x1, got {height}x{width}")
    if noise_std < 0:
        raise InvalidArgumentError(f"noise_std must be >= 0, got {noise_std}")
    low, high = persistence
    if not 0.0 <= low <= high < 1.0:
        raise InvalidArgumentError(f"persistence must satisfy 0 <= low <= high < 1, got {persistence}")
    if transfer < 0:
        raise InvalidArgumentError(f"transfer must be >= 0, got {transfer}")
    interval_duration = int(round(interval_hours * 3600))
    check_interval(interval_duration)

    rng = make_rng(seed)
    grid = (2, height, width)
    base = rng.uniform(base_range[0], base_range[1], size=grid)
    phase = rng.uniform(0.0, 2.0 * np.pi, size=grid)
    dayfactor = rng.uniform(-1.0, 1.0, size=(DAYS_PER_WEEK,) + grid)

    ipd = SECONDS_PER_DAY // interval_duration
    length = weeks * DAYS_PER_WEEK * ipd
    times = start_time + np.arange(length, dtype=np.int64) * interval_duration
    tod = (times % SECONDS_PER_DAY) // interval_duration
    dow = (times // SECONDS_PER_DAY + 3) % DAYS_PER_WEEK  # 1970-01-01 was a Thursday

    angle = 2.0 * np.pi * tod[:, None, None, None] / ipd + phase
    values = base + daily_amp * np.sin(angle) + weekly_amp * dayfactor[dow]
    if noise_std > 0:
        values = values + noise_std * _flow_anomalies(rng, length, grid, persistence, transfer)
    values = np.clip(values, 0.0, None)
    logger.info("Generated synthetic series: %d intervals on a %dx%d grid", length, height, width)
    return FlowSeries(values, interval_duration, start_time)


def _flow_anomalies(rng: np.random.Generator, length: int, grid: Tuple[int, int, int],
                    persistence: Tuple[float, float], transfer: float) -> np.ndarray:
    """
    Unit-variance anomalies of shape (length,) + grid.

    Every (channel, region) series is AR(1) with its own coefficient drawn from
    ``persistence``. Inflow additionally receives ``transfer`` times the previous
    outflow anomaly of a linked region, links being a seeded permutation of the
    regions. Each series is rescaled to unit standard deviation.
    """
    rho = rng.uniform(persistence[0], persistence[1], size=grid)
    links = rng.permutation(grid[1] * grid[2])
    shocks = rng.normal(0.0, 1.0, size=(length,) + grid)

    noise = np.empty_like(shocks)
    noise[0] = shocks[0] / np.sqrt(1.0 - rho ** 2)
    for t in range(1, length):
        prev = noise[t - 1]
        noise[t] = rho * prev + shocks[t]
        noise[t, 0] += transfer * prev[1].reshape(-1)[links].reshape(grid[1:])
    std = noise.std(axis=0)
    return noise / np.where(std > 0, std, 1.0)
