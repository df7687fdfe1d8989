import numpy as np
import pytest

from termcast.config import SYNTH_START_TIME
from termcast.errors import (
    EmptyInputError,
    FormatError,
    InvalidArgumentError,
    InvalidGridError,
    InvalidIntervalError,
    MalformedTrajectoryError,
)
from termcast.flow_grid import (
    FlowSeries,
    FlowTensor,
    NormalizationParams,
    RegionGrid,
    Trajectory,
    build_flow_series,
    compute_inflow_outflow,
    concat_series,
    interval_slot,
    minmax_apply,
    minmax_fit,
    minmax_invert,
    read_flow_series,
    read_trajectories_csv,
    region_of,
    split_train_test,
    write_flow_series,
)

from conftest import hourly_series


def _cell(lon, lat, height=4, width=4, extent=4.0):
    """Independent region lookup for a [0, extent]^2 grid."""
    if not (0.0 <= lon <= extent and 0.0 <= lat <= extent):
        return None
    row = min(int(lat / extent * height), height - 1)
    col = min(int(lon / extent * width), width - 1)
    return row, col


def brute_force_flows(trajectories, height=4, width=4, extent=4.0):
    out = np.zeros((2, height, width))
    for traj in trajectories:
        cells = [_cell(p.lon, p.lat, height, width, extent) for p in traj.points]
        for prev, cur in zip(cells, cells[1:]):
            if prev == cur:
                continue
            if cur is not None:
                out[0][cur] += 1
            if prev is not None:
                out[1][prev] += 1
    return out


def random_trajectories(rng, count, t_max=1000, low=-0.5, high=4.5):
    trajectories = []
    for _ in range(count):
        n = int(rng.integers(1, 8))
        ts = np.sort(rng.integers(0, t_max, size=n))
        trajectories.append(Trajectory.from_arrays(rng.uniform(low, high, n), rng.uniform(low, high, n), ts))
    return trajectories


# ============= Regions =============

def test_region_of_rows_start_in_the_south(grid4):
    assert region_of(grid4, 0.5, 0.5) == (0, 0)
    assert region_of(grid4, 3.5, 0.5) == (0, 3)
    assert region_of(grid4, 0.5, 3.5) == (3, 0)


def test_region_of_max_edge_and_outside(grid4):
    assert region_of(grid4, 4.0, 4.0) == (3, 3)
    assert region_of(grid4, 5.0, 1.0) is None
    assert region_of(grid4, 1.0, -0.1) is None


@pytest.mark.parametrize("height,width,bounds", [
    (0, 4, (0.0, 1.0, 0.0, 1.0)),
    (4, 4, (1.0, 1.0, 0.0, 1.0)),
    (4, 4, (0.0, 1.0, 2.0, 1.0)),
])
def test_invalid_grid(height, width, bounds):
    with pytest.raises(InvalidGridError):
        RegionGrid(height, width, bounds)


# ============= Counting =============

def test_empty_trajectory_set_gives_zero_tensor(grid4):
    flows = compute_inflow_outflow([], grid4)
    assert flows.values.shape == (2, 4, 4)
    assert not flows.values.any()


def test_single_move_counts_one_inflow_and_one_outflow(grid4):
    traj = Trajectory.from_arrays([0.5, 1.5], [0.5, 0.5], [0, 10])
    flows = compute_inflow_outflow([traj], grid4)
    assert flows.outflow[0, 0] == 1
    assert flows.inflow[0, 1] == 1
    assert flows.values.sum() == 2


def test_staying_in_one_region_counts_nothing(grid4):
    traj = Trajectory.from_arrays([1.2, 1.8], [1.2, 1.7], [0, 10])
    assert not compute_inflow_outflow([traj], grid4).values.any()


def test_out_of_bounds_counts_only_inside_side(grid4):
    traj = Trajectory.from_arrays([0.5, 9.0, 0.5], [0.5, 0.5, 1.5], [0, 10, 20])
    flows = compute_inflow_outflow([traj], grid4)
    assert flows.outflow[0, 0] == 1
    assert flows.inflow[1, 0] == 1
    assert flows.values.sum() == 2


def test_unordered_timestamps_rejected(grid4):
    traj = Trajectory.from_arrays([0.5, 1.5], [0.5, 0.5], [10, 0])
    with pytest.raises(MalformedTrajectoryError):
        compute_inflow_outflow([traj], grid4)


def test_inflow_outflow_matches_brute_force(grid4):
    rng = np.random.default_rng(7)
    for _ in range(200):
        trajectories = random_trajectories(rng, int(rng.integers(0, 101)))
        flows = compute_inflow_outflow(trajectories, grid4)
        np.testing.assert_array_equal(flows.values, brute_force_flows(trajectories))


def test_conservation_when_all_points_inside(grid4):
    rng = np.random.default_rng(3)
    trajectories = random_trajectories(rng, 60, low=0.0, high=4.0)
    flows = compute_inflow_outflow(trajectories, grid4)
    assert flows.inflow.sum() == flows.outflow.sum()


# ============= Series =============

def test_build_series_without_trajectories(grid4):
    series = build_flow_series([], grid4, 0, 24 * 3600, 3600)
    assert len(series) == 24
    assert not series.values.any()


def test_two_days_hourly(grid4):
    series = build_flow_series([], grid4, 0, 2 * 86400, 3600)
    assert len(series) == 48
    assert series.intervals_per_day == 24
    assert series.intervals_per_week == 168


def test_non_divisor_interval_rejected(grid4):
    with pytest.raises(InvalidIntervalError):
        build_flow_series([], grid4, 0, 86400, 7000)


def test_end_before_start_rejected(grid4):
    with pytest.raises(InvalidIntervalError):
        build_flow_series([], grid4, 100, 100, 3600)


@pytest.mark.parametrize("workers", [1, 3])
def test_series_matches_per_interval_oracle(grid4, workers):
    rng = np.random.default_rng(11)
    trajectories = random_trajectories(rng, 50, t_max=4 * 3600)
    series = build_flow_series(trajectories, grid4, 0, 4 * 3600, 3600, workers=workers)

    expected = np.zeros((4, 2, 4, 4))
    for traj in trajectories:
        cells = [_cell(p.lon, p.lat) for p in traj.points]
        for j in range(1, len(cells)):
            prev, cur = cells[j - 1], cells[j]
            if prev == cur:
                continue
            k = traj.points[j].timestamp // 3600
            if cur is not None:
                expected[k, 0][cur] += 1
            if prev is not None:
                expected[k, 1][prev] += 1
    np.testing.assert_array_equal(series.values, expected)
    np.testing.assert_array_equal(series.values.sum(axis=0), brute_force_flows(trajectories))


# ============= Normalization and Splits =============

def test_minmax_fit_constant():
    params = minmax_fit(FlowSeries(np.full((3, 2, 2, 2), 5.0), 3600, 0))
    assert (params.min, params.max) == (5.0, 5.0)


def test_minmax_fit_extrema():
    values = np.full((4, 2, 2, 2), 6.0)
    values[1, 0, 0, 1] = 2.0
    values[3, 1, 1, 0] = 10.0
    params = minmax_fit(FlowSeries(values, 3600, 0))
    assert (params.min, params.max) == (2.0, 10.0)


def test_minmax_fit_matches_scan():
    values = np.random.default_rng(0).uniform(0, 50, size=(10, 2, 3, 3))
    params = minmax_fit(FlowSeries(values, 3600, 0))
    assert params.min == values.min()
    assert params.max == values.max()


def test_minmax_fit_empty():
    with pytest.raises(EmptyInputError):
        minmax_fit(FlowSeries(np.zeros((0, 2, 2, 2)), 3600, 0))


def test_minmax_apply_and_invert():
    params = NormalizationParams(2.0, 10.0)
    x = FlowTensor(np.full((2, 1, 1), 6.0))
    assert minmax_apply(x, params).values[0, 0, 0] == 0.5

    rng = np.random.default_rng(1)
    y = FlowTensor(rng.uniform(-5, 20, size=(2, 3, 3)))
    np.testing.assert_allclose(minmax_invert(minmax_apply(y, params), params).values, y.values, atol=1e-9)


def test_degenerate_normalization():
    params = NormalizationParams(3.0, 3.0)
    assert minmax_apply(FlowTensor(np.full((2, 1, 1), 3.0)), params).values[0, 0, 0] == 0.0
    assert minmax_invert(FlowTensor(np.zeros((2, 1, 1))), params).values[0, 0, 0] == 3.0


@pytest.mark.parametrize("length,fraction,expected", [(100, 0.8, (80, 20)), (10, 0.85, (8, 2)), (5, 0.5, (2, 3))])
def test_split_lengths(length, fraction, expected):
    train, test = split_train_test(hourly_series(length), fraction)
    assert (len(train), len(test)) == expected


@pytest.mark.parametrize("fraction", [0.0, 1.0, -0.2, 1.5])
def test_split_rejects_bad_fraction(fraction):
    with pytest.raises(InvalidArgumentError):
        split_train_test(hourly_series(10), fraction)


def test_split_is_a_partition():
    series = hourly_series(37, 2, 3)
    joined = concat_series(*split_train_test(series, 0.7))
    np.testing.assert_array_equal(joined.values, series.values)
    assert joined.start_time == series.start_time


# ============= Calendar and Files =============

def test_interval_slot_from_monday():
    series = hourly_series(48)
    assert interval_slot(series, 0) == (0, 0)
    assert interval_slot(series, 25) == (1, 1)


def test_ufs1_rewrite_is_byte_identical(tmp_path, small_series):
    first, second = tmp_path / "a.ufs", tmp_path / "b.ufs"
    write_flow_series(small_series, first)
    loaded = read_flow_series(first)
    write_flow_series(loaded, second)
    assert first.read_bytes() == second.read_bytes()
    assert len(loaded) == len(small_series)
    assert loaded.interval_duration == small_series.interval_duration
    assert loaded.start_time == SYNTH_START_TIME
    np.testing.assert_allclose(loaded.values, small_series.values, rtol=1e-6)


def test_ufs1_bad_magic(tmp_path, small_series):
    path = tmp_path / "bad.ufs"
    write_flow_series(small_series, path)
    data = bytearray(path.read_bytes())
    data[:4] = b"XXXX"
    path.write_bytes(bytes(data))
    with pytest.raises(FormatError):
        read_flow_series(path)


def test_ufs1_truncated(tmp_path, small_series):
    path = tmp_path / "short.ufs"
    write_flow_series(small_series, path)
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(FormatError):
        read_flow_series(path)


@pytest.mark.parametrize("start_time", [-3600, 2 ** 64])
def test_ufs1_rejects_unstorable_start_time(tmp_path, start_time):
    series = FlowSeries(np.zeros((2, 2, 1, 1)), 3600, start_time)
    path = tmp_path / "flows.ufs"
    with pytest.raises(FormatError, match="start time"):
        write_flow_series(series, path)
    assert not path.exists()


def test_read_trajectories_csv(tmp_path):
    path = tmp_path / "traj.csv"
    path.write_text("traj_id,timestamp,lon,lat\n"
                    "a,0,0.5,0.5\n"
                    "a,60,1.5,0.5\n"
                    "b,10,2.5,2.5\n")
    trajectories = read_trajectories_csv(path)
    assert [len(t.points) for t in trajectories] == [2, 1]
    assert trajectories[0].points[1].timestamp == 60


def test_read_trajectories_csv_reports_line(tmp_path):
    path = tmp_path / "traj.csv"
    path.write_text("traj_id,timestamp,lon,lat\n"
                    "a,0,0.5,0.5\n"
                    "a,60,abc,0.5\n")
    with pytest.raises(MalformedTrajectoryError) as info:
        read_trajectories_csv(path)
    assert info.value.line == 3
    assert "line 3" in str(info.value)


def test_read_trajectories_csv_header_only(tmp_path):
    path = tmp_path / "empty.csv"
    path.write_text("traj_id,timestamp,lon,lat\n")
    assert read_trajectories_csv(path) == []


@pytest.mark.parametrize("timestamp", ["1e30", "-9300000000000000000", "inf"])
def test_read_trajectories_csv_rejects_out_of_range_timestamp(tmp_path, timestamp):
    path = tmp_path / "traj.csv"
    path.write_text("traj_id,timestamp,lon,lat\n"
                    "a,0,0.5,0.5\n"
                    f"a,{timestamp},0.5,0.5\n")
    with pytest.raises(MalformedTrajectoryError) as info:
        read_trajectories_csv(path)
    assert info.value.line == 3
