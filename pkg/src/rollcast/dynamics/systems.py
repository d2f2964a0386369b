"""Synthetic atmospheres: Lorenz-63 and a seasonally forced Lorenz-96 channel."""
import numpy as np

from .. import kernels
from .grid import DAYS_PER_YEAR, GridSpec, Trajectory, day_of_year

MAX_DT = 0.05


def simulate_l63(sigma=10.0, rho=28.0, beta=8.0 / 3.0, y0=(1.0, 1.0, 1.0), dt=0.01, n_steps=1000, record_every=1):
    """RK4 integration of Lorenz-63; each recorded state becomes one "day"."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    if record_every < 1 or n_steps < 0:
        raise ValueError("bad step counts")
    y0 = np.asarray(y0, dtype=np.float64)
    if y0.shape != (3,):
        raise ValueError("y0 must be a 3-vector")
    try:
        rec = kernels.l63_run(y0, float(sigma), float(rho), float(beta), float(dt), int(n_steps), int(record_every))
    except FloatingPointError:
        # numba cannot format messages; the numpy path reports the step index
        kernels.vectorized.l63_run(y0, sigma, rho, beta, dt, n_steps, 1)
        raise
    grid = GridSpec(1, 1, (0.0,), 3)
    return Trajectory(grid, 0, rec.reshape(-1, 3, 1, 1))


def channel_forcing(grid, F0, A, days):
    """Forcing table ``(len(days), V*H)``; rows at latitude phi get F0 + A cos(phi) sin(2 pi doy / 365)."""
    phase = np.sin(2.0 * np.pi * day_of_year(np.asarray(days)) / DAYS_PER_YEAR)
    amp = A * np.cos(np.deg2rad(grid.lat_array))
    rows = F0 + phase[:, None] * amp[None, :]
    return np.tile(rows, (1, grid.n_vars))


def simulate_channel(grid, F0=8.0, A=2.0, dt=0.01, n_days=365, seed=0, steps_per_day=5, spinup_days=180):
    """Independent Lorenz-96 rings, one per grid row and variable, with seasonal forcing.

    One day is ``steps_per_day`` RK4 substeps of length ``dt``.  The first
    ``spinup_days`` are integrated and discarded; the returned trajectory starts
    at absolute day 0.
    """
    if grid.n_lon < 4:
        raise ValueError("Lorenz-96 rings need at least 4 sites (n_lon >= 4)")
    if not 0 < dt <= MAX_DT:
        raise ValueError(f"dt must lie in (0, {MAX_DT}]")
    if n_days < 1 or steps_per_day < 1 or spinup_days < 0:
        raise ValueError("bad day counts")
    rng = np.random.default_rng(seed)
    n_rows = grid.n_vars * grid.n_lat
    x0 = F0 + 0.01 * rng.standard_normal((n_rows, grid.n_lon))
    if spinup_days:
        forcing = channel_forcing(grid, F0, A, np.arange(-spinup_days, 1))
        x0 = kernels.l96_channel(x0, forcing, float(dt), int(steps_per_day))[-1]
    forcing = channel_forcing(grid, F0, A, np.arange(n_days))
    states = kernels.l96_channel(x0, forcing, float(dt), int(steps_per_day))
    states = states.reshape(n_days, grid.n_vars, grid.n_lat, grid.n_lon)
    return Trajectory(grid, 0, states)

