"""Closeness / period / trend instance construction with temporal extra features."""

import logging
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from termcast.config import CLOSENESS_LEN, DAYS_PER_WEEK, TRAIN_FRACTION
from termcast.errors import EmptyInputError, ShapeError
from termcast.flow_grid import (
    FlowSeries,
    FlowTensor,
    NormalizationParams,
    interval_slot,
    minmax_fit,
    normalize_series,
    slot_position,
    split_train_test,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class ExtraFeatures:
    """One-hot time-of-day block followed by a one-hot weekday block."""

    vector: np.ndarray
    intervals_per_day: int

    @property
    def time_of_day(self) -> int:
        return int(np.argmax(self.vector[: self.intervals_per_day]))

    @property
    def day_of_week(self) -> int:
        return int(np.argmax(self.vector[self.intervals_per_day:]))


@dataclass(frozen=True, eq=False)
class InputInstance:
    """One sample: 6 closeness, 7 period, 7 trend tensors and the target.

    ``period[t]`` and ``trend[t]`` are the same time of day as closeness slot
    t one day / one week earlier; slot 7 is the target's own slot.
    """

    closeness: np.ndarray  # [6, 2, H, W]
    period: np.ndarray  # [7, 2, H, W]
    trend: np.ndarray  # [7, 2, H, W]
    extra: ExtraFeatures
    target: np.ndarray  # [2, H, W]
    target_interval_index: int
    closeness_indices: Tuple[int, ...]
    period_indices: Tuple[int, ...]
    trend_indices: Tuple[int, ...]
    slot_positions: Tuple[int, ...]  # periodic positions of the closeness slots
    time_of_day: int
    day_of_week: int

    @property
    def target_tensor(self) -> FlowTensor:
        return FlowTensor(self.target, self.target_interval_index)


@dataclass(frozen=True, eq=False)
class InstanceBatch:
    closeness: np.ndarray  # [B, 6, 2, H, W]
    period: np.ndarray  # [B, 7, 2, H, W]
    trend: np.ndarray  # [B, 7, 2, H, W]
    extra: np.ndarray  # [B, intervals_per_day + 7]
    target: np.ndarray  # [B, 2, H, W]
    slot_positions: np.ndarray  # [B, 6]
    target_indices: np.ndarray  # [B]

    def __len__(self) -> int:
        return self.target.shape[0]

    def subset(self, indices) -> "InstanceBatch":
        """Rows ``indices`` of every field, in the given order."""
        indices = np.asarray(indices, dtype=np.int64)
        return InstanceBatch(
            closeness=self.closeness[indices],
            period=self.period[indices],
            trend=self.trend[indices],
            extra=self.extra[indices],
            target=self.target[indices],
            slot_positions=self.slot_positions[indices],
            target_indices=self.target_indices[indices],
        )


@dataclass(frozen=True)
class PreparedDataset:
    """Normalized series plus train/test instances sharing one normalization."""

    series: FlowSeries
    train_series: FlowSeries
    norm: NormalizationParams
    train_instances: List[InputInstance]
    test_instances: List[InputInstance]


def encode_extra(target_interval_index: int, series: FlowSeries) -> ExtraFeatures:
    """
    Encode the target's time-of-day and weekday as concatenated one-hots.

    Args:
        target_interval_index: Interval index within ``series``
        series: Source series (only its calendar metadata is used)

    Returns:
        ExtraFeatures of length intervals_per_day + 7
    """
    ipd = series.intervals_per_day
    time_of_day, day_of_week = interval_slot(series, target_interval_index)
    vector = np.zeros(ipd + DAYS_PER_WEEK, dtype=np.float64)
    vector[time_of_day] = 1.0
    vector[ipd + day_of_week] = 1.0
    return ExtraFeatures(vector, ipd)


def instance_count(length: int, intervals_per_week: int, closeness_len: int = CLOSENESS_LEN) -> int:
    return max(0, length - (intervals_per_week + closeness_len))


def build_instances(series: FlowSeries, closeness_len: int = CLOSENESS_LEN) -> List[InputInstance]:
    """
    Build one instance per target index with a full week of history.

    Target i needs closeness i-6..i-1, period (i-7+t) - day and trend
    (i-7+t) - week for t = 1..7. Targets lacking that history are skipped;
    a series too short for any target yields an empty list.

    Args:
        series: Source flow series (normally already normalized)
        closeness_len: Number of closeness tensors

    Returns:
        Instances ordered by target index
    """
    ipd, ipw = series.intervals_per_day, series.intervals_per_week
    values = series.values
    first = closeness_len + ipw
    instances = []
    for i in range(first, len(series)):
        slots = np.arange(i - closeness_len, i + 1)  # closeness slots then the target
        period_idx = slots - ipd
        trend_idx = slots - ipw
        time_of_day, day_of_week = interval_slot(series, i)
        instances.append(InputInstance(
            closeness=values[slots[:-1]],
            period=values[period_idx],
            trend=values[trend_idx],
            extra=encode_extra(i, series),
            target=values[i],
            target_interval_index=i,
            closeness_indices=tuple(int(s) for s in slots[:-1]),
            period_indices=tuple(int(s) for s in period_idx),
            trend_indices=tuple(int(s) for s in trend_idx),
            slot_positions=tuple(slot_position(series, int(s)) for s in slots[:-1]),
            time_of_day=time_of_day,
            day_of_week=day_of_week,
        ))
    logger.debug("Built %d instances from a series of length %d", len(instances), len(series))
    return instances


def stack_instances(instances: Sequence[InputInstance]) -> InstanceBatch:
    """Stack instances into batched arrays."""
    if not instances:
        raise EmptyInputError("cannot stack an empty instance list")
    shapes = {inst.target.shape for inst in instances}
    if len(shapes) != 1:
        raise ShapeError(f"instances have mixed grid shapes: {sorted(shapes)}")
    return InstanceBatch(
        closeness=np.stack([inst.closeness for inst in instances]),
        period=np.stack([inst.period for inst in instances]),
        trend=np.stack([inst.trend for inst in instances]),
        extra=np.stack([inst.extra.vector for inst in instances]),
        target=np.stack([inst.target for inst in instances]),
        slot_positions=np.array([inst.slot_positions for inst in instances], dtype=np.int64),
        target_indices=np.array([inst.target_interval_index for inst in instances], dtype=np.int64),
    )


def split_instances(instances: Sequence[InputInstance], train_length: int) -> Tuple[List[InputInstance], List[InputInstance]]:
    """Instances whose target lies in the first ``train_length`` intervals train; the rest test."""
    train = [inst for inst in instances if inst.target_interval_index < train_length]
    test = [inst for inst in instances if inst.target_interval_index >= train_length]
    return train, test


def prepare_dataset(series: FlowSeries, train_fraction: float = TRAIN_FRACTION) -> PreparedDataset:
    """
    Split chronologically, fit min-max on the training part, build instances.

    Test targets may draw their closeness/period/trend history from the
    training portion; no test value enters the normalization fit.
    """
    raw_train, _ = split_train_test(series, train_fraction)
    norm = minmax_fit(raw_train)
    normalized = normalize_series(series, norm)
    train_series = normalize_series(raw_train, norm)
    train, test = split_instances(build_instances(normalized), len(raw_train))
    logger.info("Prepared dataset: %d train / %d test instances, norm=[%g, %g]",
                len(train), len(test), norm.min, norm.max)
    return PreparedDataset(normalized, train_series, norm, train, test)
