import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rollcast.dynamics import (
    DAYS_PER_YEAR, ClimatologyTable, GridSpec, Trajectory, TrajectoryFormatError, anomalies, compute_climatology,
    day_of_year, read_trajectory, simulate_channel, simulate_l63, split_dataset, write_trajectory,
)


# ---------------------------------------------------------------- grid
def test_grid_validation():
    GridSpec.uniform(4, 8)
    with pytest.raises(ValueError, match="increasing"):
        GridSpec(2, 4, (10.0, -10.0))
    with pytest.raises(ValueError, match="inside"):
        GridSpec(2, 4, (-90.0, 0.0))
    lats = GridSpec.uniform(16, 32).latitudes
    assert np.allclose(lats, -np.asarray(lats)[::-1]) and max(abs(v) for v in lats) < 90


def test_day_of_year_no_leap():
    assert day_of_year(np.array([0, 364, 365, 730 + 5])).tolist() == [0, 364, 0, 5]


# ---------------------------------------------------------------- Lorenz-63
def test_l63_origin_attracts_for_rho_zero():
    traj = simulate_l63(rho=0.0, y0=(1.0, 1.0, 1.0), dt=0.01, n_steps=3000)
    y = traj.states[:, :, 0, 0]
    assert np.max(np.abs(y[-1])) < 1e-6
    assert np.all(np.diff(np.linalg.norm(y, axis=1))[100:] < 0)


def test_l63_z_axis_invariant():
    traj = simulate_l63(y0=(0.0, 0.0, 5.0), dt=0.01, n_steps=500)
    y = traj.states[:, :, 0, 0]
    assert np.all(y[:, :2] == 0.0)
    ratios = y[1:, 2] / y[:-1, 2]
    assert np.allclose(ratios, ratios[0], rtol=1e-12) and ratios[0] < 1


def test_l63_twin_runs_separate():
    a = simulate_l63(y0=(1.0, 1.0, 1.0), dt=0.01, n_steps=2500).states[:, :, 0, 0]
    b = simulate_l63(y0=(1.0 + 1e-9, 1.0, 1.0), dt=0.01, n_steps=2500).states[:, :, 0, 0]
    sep = np.linalg.norm(a - b, axis=1)
    assert sep.max() / 1e-9 >= 1e3


def test_l63_rk4_order():
    """Max error over one time unit, all three runs compared on the coarse time grid."""
    y0 = (1.0, 2.0, 20.0)
    dt = 0.01
    n = int(round(1.0 / dt))

    def path(refine):
        return simulate_l63(y0=y0, dt=dt / refine, n_steps=n * refine, record_every=refine).states[:, :, 0, 0]

    ref = path(8)
    factor = np.max(np.abs(path(1) - ref)) / np.max(np.abs(path(2) - ref))
    assert 8 <= factor <= 32


def test_l63_blowup_reports_step():
    with pytest.raises(FloatingPointError, match="step"):
        simulate_l63(y0=(1e150, 1e150, 1e150), dt=1.0, n_steps=50)


# ---------------------------------------------------------------- channel
def test_channel_needs_four_sites():
    with pytest.raises(ValueError, match="4 sites"):
        simulate_channel(GridSpec.uniform(2, 3), n_days=2)


def test_channel_determinism():
    grid = GridSpec.uniform(2, 8)
    a = simulate_channel(grid, n_days=30, seed=1, spinup_days=10)
    b = simulate_channel(grid, n_days=30, seed=1, spinup_days=10)
    c = simulate_channel(grid, n_days=30, seed=2, spinup_days=10)
    assert a.states.tobytes() == b.states.tobytes()
    assert not np.array_equal(a.states, c.states)


def test_channel_annual_spectral_peak():
    years = 12
    traj = simulate_channel(GridSpec.uniform(4, 8), F0=8.0, A=2.0, dt=0.01, n_days=years * DAYS_PER_YEAR, seed=0, steps_per_day=5)
    series = traj.states.mean(axis=(1, 2, 3))
    power = np.abs(np.fft.rfft(series - series.mean())) ** 2
    assert int(np.argmax(power[1:])) + 1 == years  # frequency index of a 365-day period


def test_channel_without_forcing_cycle_has_flat_climatology():
    grid = GridSpec.uniform(4, 8)

    def cycle_amplitude(A):
        traj = simulate_channel(grid, F0=8.0, A=A, n_days=8 * DAYS_PER_YEAR, seed=3, steps_per_day=5)
        table = compute_climatology(traj, 31).values.mean(axis=(1, 2, 3))
        return np.abs(np.fft.rfft(table)[1])

    assert cycle_amplitude(0.0) < 0.2 * cycle_amplitude(2.0)


# ---------------------------------------------------------------- climatology
def _doy_trajectory(fn, years=3, grid=None):
    grid = grid or GridSpec.uniform(2, 3)
    days = np.arange(years * DAYS_PER_YEAR)
    vals = fn(day_of_year(days).astype(float))
    states = np.broadcast_to(vals[:, None, None, None], (len(days),) + grid.shape).copy()
    return Trajectory(grid, 0, states)


def test_climatology_constant():
    traj = _doy_trajectory(lambda d: np.full_like(d, 2.5))
    for window in (1, 11, 31):
        assert np.all(compute_climatology(traj, window).values == 2.5)


def test_climatology_window_one_reproduces_doy_function():
    fn = lambda d: np.sin(d / 17.0) + d / 100.0  # noqa: E731
    traj = _doy_trajectory(fn)
    table = compute_climatology(traj, 1).values[:, 0, 0, 0]
    assert np.array_equal(table, fn(np.arange(365.0)))


def test_climatology_sinusoid_gain():
    traj = _doy_trajectory(lambda d: np.sin(2 * np.pi * d / 365.0))
    table = compute_climatology(traj, 11).values[:, 0, 0, 0]
    gain = np.sin(11 * np.pi / 365) / (11 * np.sin(np.pi / 365))
    expected = gain * np.sin(2 * np.pi * np.arange(365) / 365.0)
    assert np.allclose(table, expected, atol=1e-12)
    # brute-force circular average
    base = np.sin(2 * np.pi * np.arange(365) / 365.0)
    brute = np.array([np.mean([base[(d + k) % 365] for k in range(-5, 6)]) for d in range(365)])
    assert np.allclose(table, brute, atol=1e-12)


def test_climatology_idempotent():
    rng = np.random.default_rng(0)
    grid = GridSpec.uniform(2, 3)
    raw = Trajectory(grid, 0, rng.standard_normal((2 * DAYS_PER_YEAR, 1, 2, 3)))
    table = compute_climatology(raw, 1)
    replay = Trajectory(grid, 0, table.at(np.arange(3 * DAYS_PER_YEAR)))
    again = compute_climatology(replay, 1)
    assert np.array_equal(again.values, table.values)


def test_climatology_needs_two_years():
    with pytest.raises(ValueError, match="two years"):
        compute_climatology(_doy_trajectory(lambda d: d, years=1))


def test_climatology_rejects_even_window():
    with pytest.raises(ValueError, match="odd"):
        compute_climatology(_doy_trajectory(lambda d: d), 10)


# ---------------------------------------------------------------- anomalies
def test_anomalies_of_climatology_are_zero():
    traj = _doy_trajectory(lambda d: np.cos(d / 9.0))
    clim = compute_climatology(traj, 1)
    assert np.all(anomalies(traj, clim).values == 0.0)


def test_anomalies_with_zero_climatology():
    rng = np.random.default_rng(1)
    grid = GridSpec.uniform(2, 3)
    traj = Trajectory(grid, 7, rng.standard_normal((40, 1, 2, 3)))
    zero = ClimatologyTable(grid, np.zeros((365, 1, 2, 3)), 1)
    assert np.array_equal(anomalies(traj, zero).values, traj.states)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(0, 1000))
def test_anomaly_reconstruction_bitwise(seed, start):
    """Anomalies are exactly ``x - c``; adding ``c`` back is exact up to the two roundings."""
    rng = np.random.default_rng(seed)
    grid = GridSpec.uniform(2, 3)
    traj = Trajectory(grid, start, rng.standard_normal((50, 1, 2, 3)) * 10)
    clim = ClimatologyTable(grid, rng.standard_normal((365, 1, 2, 3)), 1)
    anom = anomalies(traj, clim).values
    c = clim.at(traj.days)
    assert np.array_equal(anom, traj.states - c)
    back = anom + c
    bound = np.spacing(np.maximum(np.abs(anom), np.abs(traj.states)))
    assert np.all(np.abs(back - traj.states) <= bound)


def test_anomaly_reconstruction_exact_on_dyadic_values():
    grid = GridSpec.uniform(2, 3)
    rng = np.random.default_rng(7)
    traj = Trajectory(grid, 0, rng.integers(-64, 64, (40, 1, 2, 3)) / 8.0)
    clim = ClimatologyTable(grid, rng.integers(-64, 64, (365, 1, 2, 3)) / 16.0, 1)
    anom = anomalies(traj, clim).values
    assert np.array_equal(anom + clim.at(traj.days), traj.states)


def test_anomalies_grid_mismatch():
    traj = _doy_trajectory(lambda d: d)
    other = ClimatologyTable(GridSpec.uniform(3, 3), np.zeros((365, 1, 3, 3)), 1)
    with pytest.raises(ValueError, match="grids differ"):
        anomalies(traj, other)


# ---------------------------------------------------------------- split
def _random_years(years, seed=0):
    rng = np.random.default_rng(seed)
    return Trajectory(GridSpec.uniform(2, 4), 0, rng.standard_normal((years * DAYS_PER_YEAR, 1, 2, 4)))


def test_split_lengths():
    train, test, clim = split_dataset(_random_years(12), (1, 10), (11, 12))
    assert len(train) == 3650 and len(test) == 730
    assert test.start_day == 3650
    assert np.array_equal(clim.values, compute_climatology(train, 11).values)


def test_split_rejects_overlap_and_empty():
    traj = _random_years(12)
    with pytest.raises(ValueError, match="overlap"):
        split_dataset(traj, (1, 10), (10, 12))
    with pytest.raises(ValueError, match="required"):
        split_dataset(traj, (1, 12), ())


def test_split_test_before_train():
    train, test, clim = split_dataset(_random_years(12), (3, 12), (1, 2))
    assert len(test) == 730 and np.array_equal(clim.values, compute_climatology(train, 11).values)


def test_split_no_leakage():
    a = _random_years(12, seed=0)
    states = a.states.copy()
    states[3650:] += 100.0
    b = Trajectory(a.grid, 0, states)
    assert np.array_equal(split_dataset(a, (1, 10), (11, 12)).climatology.values, split_dataset(b, (1, 10), (11, 12)).climatology.values)


# ---------------------------------------------------------------- file format
def test_trajectory_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    traj = Trajectory(GridSpec.uniform(3, 4, n_vars=2), 17, rng.standard_normal((9, 2, 3, 4)))
    write_trajectory(tmp_path / "t.rctj", traj)
    back = read_trajectory(tmp_path / "t.rctj")
    assert back.grid == traj.grid and back.start_day == 17
    assert back.states.tobytes() == traj.states.tobytes()


def test_trajectory_truncated_and_magic(tmp_path):
    traj = Trajectory(GridSpec.uniform(2, 4), 0, np.ones((3, 1, 2, 4)))
    write_trajectory(tmp_path / "t.rctj", traj)
    blob = (tmp_path / "t.rctj").read_bytes()
    (tmp_path / "cut.rctj").write_bytes(blob[:-8])
    with pytest.raises(TrajectoryFormatError, match="truncated"):
        read_trajectory(tmp_path / "cut.rctj")
    (tmp_path / "bad.rctj").write_bytes(b"NOPE" + blob[4:])
    with pytest.raises(TrajectoryFormatError, match="RCTJ"):
        read_trajectory(tmp_path / "bad.rctj")
