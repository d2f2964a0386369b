"""Gradient descent on the shared-weight deep linear model ``Theta^L ~ Phi``.

The loss is ``||Phi - Theta^L||_F^2``.  Runs go through the compiled kernel in
:mod:`rollcast.kernels`; this module adds the step-size policy, traces, the
gradient-inequality probe and the depth/initial-loss phase sweep.
"""
import csv
import math
from dataclasses import dataclass

import numpy as np

from . import kernels

STATUS = {kernels.GD_CONVERGED: "converged", kernels.GD_DIVERGED: "diverged", kernels.GD_BUDGET: "budget"}
DEFAULT_SLACK = 0.02


def deep_linear_loss(theta, phi, depth):
    theta = np.asarray(theta, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    if theta.shape != phi.shape or theta.ndim != 2 or theta.shape[0] != theta.shape[1]:
        raise ValueError(f"need square matrices of equal size, got {theta.shape} and {phi.shape}")
    err = phi - np.linalg.matrix_power(theta, int(depth))
    return float(np.sum(err * err))


def deep_linear_grad(theta, phi, depth):
    """``-2 sum_k (Theta^T)^k E (Theta^T)^(L-1-k)`` with ``E = Phi - Theta^L``."""
    theta = np.ascontiguousarray(theta, dtype=np.float64)
    phi = np.ascontiguousarray(phi, dtype=np.float64)
    if theta.shape != phi.shape or theta.ndim != 2 or theta.shape[0] != theta.shape[1]:
        raise ValueError(f"need square matrices of equal size, got {theta.shape} and {phi.shape}")
    if depth < 1:
        raise ValueError("depth must be at least 1")
    return kernels.deep_linear_grad(theta, phi, int(depth))[0]


def eta_policy(phi, depth, theta0=None, slack=DEFAULT_SLACK):
    """Step size ``1 / (3 L^2 d^5 max(c^4, ||Phi||_2))``.

    ``c = (1 + R(0) + slack) ** (L / 2)`` so that ``c^4 = (1 + R(0) + slack) ** (2L)``
    bounds the growth factor of ``L``-fold products near the start point.
    Returns ``(eta, c)``.
    """
    phi = np.asarray(phi, dtype=np.float64)
    d = phi.shape[0]
    theta0 = np.eye(d) if theta0 is None else np.asarray(theta0, dtype=np.float64)
    r0 = float(np.linalg.norm(theta0 - np.eye(d), 2))
    c = (1.0 + r0 + slack) ** (depth / 2.0)
    eta = 1.0 / (3.0 * depth**2 * d**5 * max(c**4, float(np.linalg.norm(phi, 2))))
    return eta, c


@dataclass
class LinearLabConfig:
    phi: np.ndarray
    depth: int
    theta0: np.ndarray = None
    eta: float = None  # None: use eta_policy
    max_iter: int = 20_000
    tol: float = 1e-10
    slack: float = DEFAULT_SLACK
    blowup: float = 1e8

    def __post_init__(self):
        self.phi = np.ascontiguousarray(self.phi, dtype=np.float64)
        if self.phi.ndim != 2 or self.phi.shape[0] != self.phi.shape[1] or self.phi.shape[0] < 1:
            raise ValueError("phi must be a non-empty square matrix")
        if self.depth < 1:
            raise ValueError("depth must be at least 1")
        if self.theta0 is None:
            self.theta0 = np.eye(self.d)
        self.theta0 = np.ascontiguousarray(self.theta0, dtype=np.float64)
        if self.theta0.shape != self.phi.shape:
            raise ValueError("theta0 and phi must have the same shape")
        if self.eta is not None and not self.eta > 0:
            raise ValueError("eta must be positive")

    @property
    def d(self):
        return self.phi.shape[0]


@dataclass
class GdTrace:
    losses: np.ndarray
    radii: np.ndarray
    grad_norms: np.ndarray
    status: str
    theta: np.ndarray
    eta: float
    c: float = float("nan")

    @property
    def iterations(self):
        """Gradient steps taken before the recorded final state."""
        return len(self.losses) - 1

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iteration", "loss", "radius", "grad_norm"])
            for i, row in enumerate(zip(self.losses, self.radii, self.grad_norms)):
                writer.writerow([i] + [repr(float(v)) for v in row])


def run_gd(config):
    """Plain gradient descent ``Theta <- Theta - eta * grad`` with a full trace."""
    if config.eta is None:
        eta, c = eta_policy(config.phi, config.depth, config.theta0, config.slack)
    else:
        eta, c = float(config.eta), float("nan")
    losses, radii, gnorms, theta, status = kernels.deep_linear_gd(
        config.theta0, config.phi, int(config.depth), float(eta), int(config.max_iter), float(config.tol), float(config.blowup)
    )
    return GdTrace(np.asarray(losses), np.asarray(radii), np.asarray(gnorms), STATUS[int(status)], np.asarray(theta), eta, c)


def loglinear_fit(losses):
    """Slope and R^2 of a least-squares line through ``log(loss)`` against iteration."""
    y = np.log(np.asarray(losses, dtype=np.float64))
    t = np.arange(len(y), dtype=np.float64)
    slope, intercept = np.polyfit(t, y, 1)
    resid = y - (slope * t + intercept)
    total = np.sum((y - y.mean()) ** 2)
    r2 = 1.0 - np.sum(resid**2) / total if total > 0 else 1.0
    return float(slope), float(r2)


def init_loss_bound(c):
    """``ln(c) / (4 c^10)``: the largest start loss the convergence guarantee covers."""
    return math.log(c) / (4.0 * c**10)


@dataclass
class GradientBoundReport:
    depth: int
    loss: float
    grad_sq: float
    ratio: float  # ||grad||^2 / (4 L^2 loss)
    one_minus_sigma_min: float
    satisfied: bool  # ratio >= 1 - sigma_min; reported, never asserted


def check_gradient_bound(theta, phi, depth):
    """Measure both sides of ``||grad||^2 >= 4 L^2 loss (1 - sigma_min(Theta))``."""
    loss = deep_linear_loss(theta, phi, depth)
    if not loss > 0:
        raise ValueError("the probe needs a strictly positive loss")
    g = deep_linear_grad(theta, phi, depth)
    grad_sq = float(np.sum(g * g))
    ratio = grad_sq / (4.0 * depth**2 * loss)
    rhs = 1.0 - float(np.linalg.svd(np.asarray(theta, dtype=np.float64), compute_uv=False)[-1])
    return GradientBoundReport(int(depth), loss, grad_sq, ratio, rhs, bool(ratio >= rhs))


def gradient_bound_sweep(d=3, depths=(2, 4, 8), n_samples=50, scale=0.3, seed=0):
    """Random ``Theta = I + scale * G`` and ``Phi = I + scale * H`` probes."""
    rng = np.random.default_rng(seed)
    out = []
    for depth in depths:
        for _ in range(n_samples):
            theta = np.eye(d) + scale * rng.standard_normal((d, d))
            phi = np.eye(d) + scale * rng.standard_normal((d, d))
            out.append(check_gradient_bound(theta, phi, depth))
    return out


def write_bound_csv(path, reports):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["L", "loss", "grad_sq", "ratio", "one_minus_sigma_min", "satisfied"])
        for r in reports:
            writer.writerow([r.depth, repr(r.loss), repr(r.grad_sq), repr(r.ratio), repr(r.one_minus_sigma_min), int(r.satisfied)])


# ---------------------------------------------------------------- phase sweep
def shrink_target(d, initial_loss):
    """``Phi = (1 - s) I`` with ``s = sqrt(loss / d)``, so identity init starts at ``loss``.

    For ``s > 1`` the target has negative eigenvalues, which no even power of a
    real matrix can reach.
    """
    s = math.sqrt(initial_loss / d)
    return (1.0 - s) * np.eye(d)


@dataclass
class PhaseCell:
    depth: int
    initial_loss: float
    eta: float
    c: float
    status: str
    iterations: int
    final_loss: float


def stability_sweep(depths, initial_losses, d=3, slack=DEFAULT_SLACK, max_iter=100_000, tol=1e-10, target=shrink_target):
    """Run identity-initialised GD for every ``(L, loss(0))`` cell."""
    cells = []
    for depth in depths:
        for l0 in initial_losses:
            cfg = LinearLabConfig(target(d, l0), int(depth), max_iter=max_iter, tol=tol, slack=slack)
            tr = run_gd(cfg)
            cells.append(PhaseCell(int(depth), float(l0), tr.eta, tr.c, tr.status, tr.iterations, float(tr.losses[-1])))
    return cells


def frontier(cells):
    """Largest converged initial loss per depth (0.0 where none converged)."""
    out = {}
    for cell in cells:
        best = out.setdefault(cell.depth, 0.0)
        if cell.status == "converged":
            out[cell.depth] = max(best, cell.initial_loss)
    return dict(sorted(out.items()))


def frontier_is_monotone(front):
    values = [front[k] for k in sorted(front)]
    return all(b <= a for a, b in zip(values, values[1:]))


def write_phase_csv(path, cells):
    front = frontier(cells)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["L", "initial_loss", "eta", "status", "iterations", "final_loss", "frontier"])
        for c in cells:
            writer.writerow([c.depth, repr(c.initial_loss), repr(c.eta), c.status, c.iterations, repr(c.final_loss), repr(front[c.depth])])
