from dataclasses import dataclass

import numpy as np

DAYS_PER_YEAR = 365


@dataclass(frozen=True)
class GridSpec:
    """Regular latitude-longitude grid with ``n_vars`` stacked fields."""

    n_lat: int
    n_lon: int
    latitudes: tuple
    n_vars: int = 1

    def __post_init__(self):
        lats = np.asarray(self.latitudes, dtype=np.float64)
        if self.n_lat * self.n_lon * self.n_vars <= 0:
            raise ValueError("grid must have at least one point")
        if lats.shape != (self.n_lat,):
            raise ValueError(f"expected {self.n_lat} latitudes, got {lats.shape}")
        if np.any(np.abs(lats) >= 90.0):
            raise ValueError("latitudes must lie strictly inside (-90, 90)")
        if np.any(np.diff(lats) <= 0):
            raise ValueError("latitudes must be strictly increasing")
        object.__setattr__(self, "latitudes", tuple(float(x) for x in lats))

    @classmethod
    def uniform(cls, n_lat, n_lon, n_vars=1):
        step = 180.0 / n_lat
        lats = -90.0 + step * (np.arange(n_lat) + 0.5)
        return cls(n_lat, n_lon, tuple(lats), n_vars)

    @property
    def shape(self):
        return (self.n_vars, self.n_lat, self.n_lon)

    @property
    def size(self):
        return self.n_vars * self.n_lat * self.n_lon

    @property
    def lat_array(self):
        return np.asarray(self.latitudes)


def day_of_year(day_index):
    return np.mod(day_index, DAYS_PER_YEAR)


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Daily states ``(T, V, H, W)`` starting at absolute day ``start_day``."""

    grid: GridSpec
    start_day: int
    states: np.ndarray

    def __post_init__(self):
        states = np.asarray(self.states, dtype=np.float64)
        if states.ndim != 4 or states.shape[1:] != self.grid.shape:
            raise ValueError(f"states shape {states.shape} does not match grid {self.grid.shape}")
        if states.shape[0] < 1:
            raise ValueError("trajectory needs at least one state")
        if self.start_day < 0:
            raise ValueError("start_day must be non-negative")
        object.__setattr__(self, "states", states)

    def __len__(self):
        return self.states.shape[0]

    @property
    def days(self):
        return self.start_day + np.arange(len(self))

    @property
    def doy(self):
        return day_of_year(self.days)

    def slice(self, start, stop):
        return Trajectory(self.grid, self.start_day + start, self.states[start:stop])
