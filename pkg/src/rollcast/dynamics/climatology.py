"""Day-of-year climatology, anomalies and leakage-free train/test splitting."""
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .grid import DAYS_PER_YEAR, Trajectory, day_of_year


@dataclass(frozen=True, eq=False)
class ClimatologyTable:
    grid: object
    values: np.ndarray  # (365, V, H, W)
    window: int

    def at(self, day_index):
        """Climatology for absolute day indices (any shape)."""
        return self.values[day_of_year(np.asarray(day_index))]

    def as_trajectory(self):
        return Trajectory(self.grid, 0, self.values)


@dataclass(frozen=True, eq=False)
class AnomalySeries:
    grid: object
    start_day: int
    values: np.ndarray


def circular_moving_average(table, window):
    """Centered moving average over axis 0, wrapping around the year."""
    if window % 2 != 1 or window < 1:
        raise ValueError(f"window must be a positive odd integer, got {window}")
    if window == 1:
        return table.copy()
    half = window // 2
    acc = np.zeros_like(table)
    for k in range(-half, half + 1):
        acc += np.roll(table, k, axis=0)
    return acc / window


def compute_climatology(trajectories, window=11):
    """Cross-year day-of-year mean smoothed by a centered circular window.

    ``trajectories`` is one :class:`Trajectory` or a sequence sharing a grid.
    """
    if isinstance(trajectories, Trajectory):
        trajectories = [trajectories]
    if not trajectories:
        raise ValueError("no trajectories given")
    grid = trajectories[0].grid
    if any(t.grid != grid for t in trajectories):
        raise ValueError("trajectories are on different grids")
    total = sum(len(t) for t in trajectories)
    if total < 2 * DAYS_PER_YEAR:
        raise ValueError(f"climatology needs at least two years of data, got {total} days")

    # mean taken about the first sample of each day so repeated values average exactly
    ref = np.full((DAYS_PER_YEAR,) + grid.shape, np.nan)
    acc = np.zeros((DAYS_PER_YEAR,) + grid.shape)
    count = np.zeros(DAYS_PER_YEAR)
    for traj in trajectories:
        for doy, state in zip(traj.doy, traj.states):
            if count[doy] == 0:
                ref[doy] = state
            else:
                acc[doy] += state - ref[doy]
            count[doy] += 1
    if np.any(count == 0):
        missing = np.flatnonzero(count == 0)
        raise ValueError(f"days of year without data: {missing[:5].tolist()}...")
    daily = ref + acc / count[:, None, None, None]
    return ClimatologyTable(grid, circular_moving_average(daily, window), window)


def anomalies(traj, clim):
    if traj.grid != clim.grid:
        raise ValueError("trajectory and climatology grids differ")
    return AnomalySeries(traj.grid, traj.start_day, traj.states - clim.at(traj.days))


class Split(NamedTuple):
    train: Trajectory
    test: Trajectory
    climatology: ClimatologyTable


def _year_slice(traj, years):
    first, last = years
    if first < 1 or last < first:
        raise ValueError(f"bad year range {years}")
    start, stop = (first - 1) * DAYS_PER_YEAR, last * DAYS_PER_YEAR
    if stop > len(traj):
        raise ValueError(f"year range {years} exceeds the {len(traj)}-day trajectory")
    return traj.slice(start, stop)


def split_dataset(traj, train_years, test_years, window=11):
    """Cut contiguous 1-based inclusive year ranges; climatology uses train years only."""
    if not test_years or not train_years:
        raise ValueError("both train and test year ranges are required")
    a0, a1 = train_years
    b0, b1 = test_years
    if a0 <= b1 and b0 <= a1:
        raise ValueError(f"train years {train_years} overlap test years {test_years}")
    train = _year_slice(traj, train_years)
    test = _year_slice(traj, test_years)
    return Split(train, test, compute_climatology(train, window))
