from .climatology import (
    AnomalySeries,
    ClimatologyTable,
    Split,
    anomalies,
    circular_moving_average,
    compute_climatology,
    split_dataset,
)
from .grid import DAYS_PER_YEAR, GridSpec, Trajectory, day_of_year
from .io import TrajectoryFormatError, read_trajectory, write_trajectory
from .systems import channel_forcing, simulate_channel, simulate_l63

__all__ = [
    "DAYS_PER_YEAR",
    "AnomalySeries",
    "ClimatologyTable",
    "GridSpec",
    "Split",
    "Trajectory",
    "TrajectoryFormatError",
    "anomalies",
    "channel_forcing",
    "circular_moving_average",
    "compute_climatology",
    "day_of_year",
    "read_trajectory",
    "simulate_channel",
    "simulate_l63",
    "split_dataset",
    "write_trajectory",
]
