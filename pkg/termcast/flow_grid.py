"""Grid inflow/outflow construction, normalization, splitting and persistence."""

import logging
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from tqdm import tqdm

from termcast.config import DAYS_PER_WEEK, SECONDS_PER_DAY
from termcast.errors import (
    EmptyInputError,
    FormatError,
    InvalidArgumentError,
    InvalidGridError,
    InvalidIntervalError,
    MalformedTrajectoryError,
    ShapeError,
)

logger = logging.getLogger(__name__)

UFS_MAGIC = b"UFS1"
_UFS_HEADER = struct.Struct("<4sIIIIQ")
CSV_COLUMNS = ["traj_id", "timestamp", "lon", "lat"]
# Timestamps must fit in int64
TIMESTAMP_LIMIT = 2.0 ** 63

# 1970-01-01 was a Thursday; weekday 0 is Monday
_EPOCH_WEEKDAY = 3


# ============= Domain Types =============

def _frozen(values) -> np.ndarray:
    """Read-only float64 view; caller-owned writable arrays are copied first."""
    values = np.asarray(values, dtype=np.float64)
    if values.flags.writeable:
        values = values.copy()
        values.setflags(write=False)
    return values


@dataclass(frozen=True)
class TrajectoryPoint:
    lon: float
    lat: float
    timestamp: int

    def __post_init__(self):
        if not (math.isfinite(self.lon) and math.isfinite(self.lat)):
            raise MalformedTrajectoryError(f"non-finite coordinate ({self.lon}, {self.lat})")


@dataclass(frozen=True)
class Trajectory:
    points: Tuple[TrajectoryPoint, ...]

    def __post_init__(self):
        object.__setattr__(self, "points", tuple(self.points))
        if not self.points:
            raise MalformedTrajectoryError("trajectory has no points")

    @classmethod
    def from_arrays(cls, lons: Sequence[float], lats: Sequence[float], timestamps: Sequence[int]) -> "Trajectory":
        return cls(tuple(TrajectoryPoint(float(x), float(y), int(t)) for x, y, t in zip(lons, lats, timestamps)))

    def arrays(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        lons = np.array([p.lon for p in self.points], dtype=np.float64)
        lats = np.array([p.lat for p in self.points], dtype=np.float64)
        ts = np.array([p.timestamp for p in self.points], dtype=np.int64)
        return lons, lats, ts


@dataclass(frozen=True)
class RegionGrid:
    """H x W rectangular partition of ``bounds = (lon_min, lon_max, lat_min, lat_max)``.

    Row 0 is the southernmost band, column 0 the westernmost. Points on the
    max edge belong to the last row/column.
    """

    height: int
    width: int
    bounds: Tuple[float, float, float, float]

    def __post_init__(self):
        validate_grid(self)

    @property
    def shape(self) -> Tuple[int, int, int]:
        return (2, self.height, self.width)

    def locate(self, lons: np.ndarray, lats: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Vectorized region lookup: (rows, cols, inside mask)."""
        lon_min, lon_max, lat_min, lat_max = self.bounds
        lons = np.asarray(lons, dtype=np.float64)
        lats = np.asarray(lats, dtype=np.float64)
        inside = (lons >= lon_min) & (lons <= lon_max) & (lats >= lat_min) & (lats <= lat_max)
        cols = np.floor((lons - lon_min) / (lon_max - lon_min) * self.width).astype(np.int64)
        rows = np.floor((lats - lat_min) / (lat_max - lat_min) * self.height).astype(np.int64)
        cols = np.clip(cols, 0, self.width - 1)
        rows = np.clip(rows, 0, self.height - 1)
        return rows, cols, inside


def validate_grid(grid: RegionGrid) -> None:
    if grid.height < 1 or grid.width < 1:
        raise InvalidGridError(f"grid must be at least 1x1, got {grid.height}x{grid.width}")
    if len(grid.bounds) != 4:
        raise InvalidGridError("bounds must be (lon_min, lon_max, lat_min, lat_max)")
    lon_min, lon_max, lat_min, lat_max = grid.bounds
    if not all(math.isfinite(b) for b in grid.bounds) or not (lon_max > lon_min and lat_max > lat_min):
        raise InvalidGridError(f"bounds {grid.bounds} do not form a nonempty rectangle")


def region_of(grid: RegionGrid, lon: float, lat: float) -> Optional[Tuple[int, int]]:
    """Region (h, w) containing the point, or None when out of bounds."""
    rows, cols, inside = grid.locate(np.array([lon]), np.array([lat]))
    if not inside[0]:
        return None
    return int(rows[0]), int(cols[0])


@dataclass(frozen=True, eq=False)
class FlowTensor:
    """One interval's flows: channel 0 inflow, channel 1 outflow."""

    values: np.ndarray
    interval_index: int = 0

    def __post_init__(self):
        values = _frozen(self.values)
        if values.ndim != 3 or values.shape[0] != 2:
            raise ShapeError(f"flow tensor must be 2xHxW, got {values.shape}")
        object.__setattr__(self, "values", values)

    @property
    def inflow(self) -> np.ndarray:
        return self.values[0]

    @property
    def outflow(self) -> np.ndarray:
        return self.values[1]


@dataclass(frozen=True, eq=False)
class FlowSeries:
    """Contiguous interval-indexed flow tensors, stored as one [L, 2, H, W] array."""

    values: np.ndarray
    interval_duration: int
    start_time: int

    def __post_init__(self):
        values = _frozen(self.values)
        if values.ndim != 4 or values.shape[1] != 2:
            raise ShapeError(f"flow series must be Lx2xHxW, got {values.shape}")
        check_interval(self.interval_duration)
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return self.values.shape[0]

    def __getitem__(self, index: int) -> FlowTensor:
        return FlowTensor(self.values[index], interval_index=index)

    @property
    def tensors(self) -> List[FlowTensor]:
        return [self[i] for i in range(len(self))]

    @property
    def height(self) -> int:
        return self.values.shape[2]

    @property
    def width(self) -> int:
        return self.values.shape[3]

    @property
    def intervals_per_day(self) -> int:
        return SECONDS_PER_DAY // self.interval_duration

    @property
    def intervals_per_week(self) -> int:
        return DAYS_PER_WEEK * self.intervals_per_day

    def interval_start(self, index: int) -> int:
        return self.start_time + index * self.interval_duration

    def with_values(self, values: np.ndarray) -> "FlowSeries":
        return FlowSeries(values, self.interval_duration, self.start_time)


@dataclass(frozen=True)
class NormalizationParams:
    min: float
    max: float

    def __post_init__(self):
        if self.max < self.min:
            raise InvalidArgumentError(f"max {self.max} < min {self.min}")

    @property
    def span(self) -> float:
        return self.max - self.min

    def apply(self, values: np.ndarray) -> np.ndarray:
        values = np.asarray(values, dtype=np.float64)
        if self.span == 0:
            return np.zeros_like(values)
        return (values - self.min) / self.span

    def invert(self, values: np.ndarray) -> np.ndarray:
        values = np.asarray(values, dtype=np.float64)
        return values * self.span + self.min


def check_interval(interval_duration: int) -> None:
    if interval_duration <= 0 or SECONDS_PER_DAY % interval_duration:
        raise InvalidIntervalError(f"interval of {interval_duration}s does not divide a day")


# ============= Flow Counting =============

def _trajectory_regions(traj: Trajectory, grid: RegionGrid) -> Tuple[np.ndarray, np.ndarray]:
    """Flat region id per point (-1 out of bounds) and the timestamps."""
    lons, lats, ts = traj.arrays()
    if np.any(np.diff(ts) < 0):
        raise MalformedTrajectoryError("trajectory timestamps are not ordered")
    rows, cols, inside = grid.locate(lons, lats)
    regions = np.where(inside, rows * grid.width + cols, -1)
    return regions, ts


def _count_transitions(prev: np.ndarray, cur: np.ndarray, height: int, width: int) -> np.ndarray:
    """Inflow/outflow counts from region-id pairs; -1 marks out of bounds."""
    flows = np.zeros((2, height * width), dtype=np.float64)
    moved = prev != cur
    entering = cur[moved & (cur >= 0)]
    leaving = prev[moved & (prev >= 0)]
    np.add.at(flows[0], entering, 1.0)
    np.add.at(flows[1], leaving, 1.0)
    return flows.reshape(2, height, width)


def compute_inflow_outflow(trajectories: Iterable[Trajectory], grid: RegionGrid, interval_index: int = 0) -> FlowTensor:
    """
    Count region crossings for one interval's trajectory set.

    A consecutive point pair adds one inflow to the region it enters and one
    outflow to the region it leaves; an out-of-bounds endpoint contributes
    nothing on its own side.

    Args:
        trajectories: Trajectories observed in the interval
        grid: Region partition
        interval_index: Index stamped on the result

    Returns:
        FlowTensor of shape 2xHxW
    """
    validate_grid(grid)
    prev_parts, cur_parts = [], []
    for traj in trajectories:
        regions, _ = _trajectory_regions(traj, grid)
        prev_parts.append(regions[:-1])
        cur_parts.append(regions[1:])
    if prev_parts:
        prev, cur = np.concatenate(prev_parts), np.concatenate(cur_parts)
    else:
        prev = cur = np.zeros(0, dtype=np.int64)
    return FlowTensor(_count_transitions(prev, cur, grid.height, grid.width), interval_index)


def build_flow_series(
    trajectories: Iterable[Trajectory],
    grid: RegionGrid,
    start_time: int,
    end_time: int,
    interval_duration: int,
    workers: int = 1,
    show_progress: bool = False,
) -> FlowSeries:
    """
    Bin trajectory transitions into a contiguous interval series.

    A pair (g_{j-1}, g_j) belongs to the interval containing g_j's timestamp;
    pairs completing outside [start_time, end_time) are dropped. The range is
    covered by ceil((end - start) / interval_duration) intervals.

    Args:
        trajectories: All trajectories in the range
        grid: Region partition
        start_time: Epoch seconds of interval 0
        end_time: Exclusive end, epoch seconds
        interval_duration: Interval length in seconds (must divide 86400)
        workers: Thread count for per-interval counting
        show_progress: Show a tqdm bar over intervals

    Returns:
        FlowSeries with one tensor per interval
    """
    check_interval(interval_duration)
    validate_grid(grid)
    if end_time <= start_time:
        raise InvalidIntervalError(f"end_time {end_time} must be after start_time {start_time}")
    length = -(-(end_time - start_time) // interval_duration)

    prev_parts, cur_parts, bin_parts = [], [], []
    for traj in trajectories:
        regions, ts = _trajectory_regions(traj, grid)
        if len(regions) < 2:
            continue
        prev_parts.append(regions[:-1])
        cur_parts.append(regions[1:])
        bin_parts.append((ts[1:] - start_time) // interval_duration)

    if prev_parts:
        prev, cur, bins = (np.concatenate(p) for p in (prev_parts, cur_parts, bin_parts))
        keep = (bins >= 0) & (bins < length) & (prev != cur)
        prev, cur, bins = prev[keep], cur[keep], bins[keep]
        order = np.argsort(bins, kind="stable")
        prev, cur, bins = prev[order], cur[order], bins[order]
    else:
        prev = cur = bins = np.zeros(0, dtype=np.int64)

    bounds = np.searchsorted(bins, np.arange(length + 1))

    def count(i: int) -> np.ndarray:
        lo, hi = bounds[i], bounds[i + 1]
        return _count_transitions(prev[lo:hi], cur[lo:hi], grid.height, grid.width)

    indices = tqdm(range(length), desc="intervals", disable=not show_progress)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            tensors = list(pool.map(count, indices))
    else:
        tensors = [count(i) for i in indices]

    values = np.stack(tensors) if tensors else np.zeros((0, 2, grid.height, grid.width))
    logger.debug("Binned %d transitions into %d intervals", len(bins), length)
    return FlowSeries(values, interval_duration, start_time)


# ============= Normalization =============

def minmax_fit(train: FlowSeries) -> NormalizationParams:
    """Fit min/max over every entry of the training series."""
    if len(train) == 0 or train.values.size == 0:
        raise EmptyInputError("cannot fit normalization on an empty series")
    return NormalizationParams(float(train.values.min()), float(train.values.max()))


def minmax_apply(x: FlowTensor, p: NormalizationParams) -> FlowTensor:
    return FlowTensor(p.apply(x.values), x.interval_index)


def minmax_invert(x: FlowTensor, p: NormalizationParams) -> FlowTensor:
    return FlowTensor(p.invert(x.values), x.interval_index)


def normalize_series(series: FlowSeries, p: NormalizationParams) -> FlowSeries:
    return series.with_values(p.apply(series.values))


# ============= Splitting =============

def split_train_test(series: FlowSeries, train_fraction: float) -> Tuple[FlowSeries, FlowSeries]:
    """Chronological split: the first floor(L * fraction) intervals train."""
    if not 0.0 < train_fraction < 1.0:
        raise InvalidArgumentError(f"train_fraction must be in (0, 1), got {train_fraction}")
    n_train = int(math.floor(len(series) * train_fraction))
    train = FlowSeries(series.values[:n_train], series.interval_duration, series.start_time)
    test = FlowSeries(series.values[n_train:], series.interval_duration, series.interval_start(n_train))
    return train, test


def concat_series(first: FlowSeries, second: FlowSeries) -> FlowSeries:
    """Rejoin two adjacent series (inverse of split_train_test)."""
    if first.interval_duration != second.interval_duration:
        raise InvalidArgumentError("series have different interval durations")
    if first.interval_start(len(first)) != second.start_time:
        raise InvalidArgumentError("series are not adjacent")
    if first.values.shape[1:] != second.values.shape[1:]:
        raise ShapeError("series have different grid shapes")
    return FlowSeries(np.concatenate([first.values, second.values]), first.interval_duration, first.start_time)


# ============= Calendar =============

def interval_slot(series: FlowSeries, index: int) -> Tuple[int, int]:
    """(time-of-day slot, weekday with Monday = 0) of an interval, in UTC."""
    t = series.interval_start(index)
    time_of_day = (t % SECONDS_PER_DAY) // series.interval_duration
    day_of_week = (t // SECONDS_PER_DAY + _EPOCH_WEEKDAY) % DAYS_PER_WEEK
    return int(time_of_day), int(day_of_week)


def slot_position(series: FlowSeries, index: int) -> int:
    """Absolute periodic position of an interval; equals its time-of-day slot modulo intervals_per_day."""
    first_slot, _ = interval_slot(series, 0)
    return first_slot + index


# ============= Persistence =============

def write_flow_series(series: FlowSeries, path: Union[str, Path]) -> None:
    """Write the little-endian ``UFS1`` format (float32 payload)."""
    length, _, height, width = series.values.shape
    for name, value in (("length", length), ("height", height), ("width", width),
                         ("interval duration", series.interval_duration)):
        if not 0 <= value < 2 ** 32:
            raise FormatError(f"UFS1 cannot store {name} {value} (must fit in u32)")
    if not 0 <= int(series.start_time) < 2 ** 64:
        raise FormatError(f"UFS1 cannot store start time {series.start_time} (must be in [0, 2^64))")
    header = _UFS_HEADER.pack(UFS_MAGIC, length, height, width, series.interval_duration, series.start_time)
    payload = np.ascontiguousarray(series.values, dtype="<f4").tobytes()
    with open(path, "wb") as f:
        f.write(header)
        f.write(payload)


def read_flow_series(path: Union[str, Path]) -> FlowSeries:
    data = Path(path).read_bytes()
    if len(data) < _UFS_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, length, height, width, interval_duration, start_time = _UFS_HEADER.unpack_from(data)
    if magic != UFS_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    count = length * 2 * height * width
    expected = _UFS_HEADER.size + 4 * count
    if len(data) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(data)}")
    values = np.frombuffer(data, dtype="<f4", count=count, offset=_UFS_HEADER.size)
    return FlowSeries(values.astype(np.float64).reshape(length, 2, height, width), interval_duration, start_time)


def read_trajectories_csv(path: Union[str, Path]) -> List[Trajectory]:
    """
    Read ``traj_id,timestamp,lon,lat`` rows into trajectories.

    Rows are grouped by traj_id in file order. Any unparseable row raises
    MalformedTrajectoryError naming its 1-based file line.
    """
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False)
    except pd.errors.EmptyDataError:
        return []
    except pd.errors.ParserError as e:
        raise MalformedTrajectoryError(f"cannot parse CSV: {e}") from None

    if list(df.columns) != CSV_COLUMNS:
        raise MalformedTrajectoryError(f"expected header {','.join(CSV_COLUMNS)}", line=1)
    if df.empty:
        return []

    timestamps = pd.to_numeric(df["timestamp"], errors="coerce")
    lons = pd.to_numeric(df["lon"], errors="coerce")
    lats = pd.to_numeric(df["lat"], errors="coerce")
    bad = (
        timestamps.isna() | lons.isna() | lats.isna() | (df["traj_id"].str.strip() == "")
        | ~np.isfinite(lons.fillna(0)) | ~np.isfinite(lats.fillna(0))
        | (timestamps.fillna(0) % 1 != 0) | (timestamps.abs().fillna(0) >= TIMESTAMP_LIMIT)
    )
    if bad.any():
        row = int(np.flatnonzero(bad.to_numpy())[0])
        raise MalformedTrajectoryError(f"malformed row {df.iloc[row].tolist()}", line=row + 2)

    trajectories = []
    frame = pd.DataFrame({"traj_id": df["traj_id"], "timestamp": timestamps.astype(np.int64), "lon": lons, "lat": lats})
    for traj_id, group in frame.groupby("traj_id", sort=False):
        ts = group["timestamp"].to_numpy()
        if np.any(np.diff(ts) < 0):
            row = int(group.index[np.flatnonzero(np.diff(ts) < 0)[0] + 1])
            raise MalformedTrajectoryError(f"timestamps of trajectory {traj_id} are not ordered", line=row + 2)
        trajectories.append(Trajectory.from_arrays(group["lon"].to_numpy(), group["lat"].to_numpy(), ts))
    return trajectories
