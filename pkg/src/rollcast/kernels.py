"""Hot numeric loops: ODE integration, tangent propagation, QR Lyapunov sums
and the shared-weight deep-linear gradient descent loop.

Each kernel exists twice: an explicit-loop version compiled with numba and a
vectorised numpy version.  The module-level names point at whichever backend
``rollcast._accel`` selected; ``loops`` and ``vectorized`` expose both.
"""
import types

import numpy as np

from ._accel import USE_NUMBA, njit

GD_CONVERGED = 0
GD_DIVERGED = 1
GD_BUDGET = 2


# ---------------------------------------------------------------- Lorenz-96 rows
@njit
def _l96_rhs_loops(x, forcing, out):
    h, w = x.shape
    for i in range(h):
        for k in range(w):
            out[i, k] = (x[i, (k + 1) % w] - x[i, (k - 2) % w]) * x[i, (k - 1) % w] - x[i, k] + forcing[i]


@njit
def _l96_channel_loops(x0, forcing_by_day, dt, steps_per_day):
    n_days, h = forcing_by_day.shape
    w = x0.shape[1]
    out = np.empty((n_days, h, w))
    x = x0.copy()
    k1 = np.empty_like(x)
    k2 = np.empty_like(x)
    k3 = np.empty_like(x)
    k4 = np.empty_like(x)
    tmp = np.empty_like(x)
    half = 0.5 * dt
    sixth = dt / 6.0
    for d in range(n_days):
        out[d] = x
        f = forcing_by_day[d]
        for _ in range(steps_per_day):
            _l96_rhs_loops(x, f, k1)
            for i in range(h):
                for k in range(w):
                    tmp[i, k] = x[i, k] + half * k1[i, k]
            _l96_rhs_loops(tmp, f, k2)
            for i in range(h):
                for k in range(w):
                    tmp[i, k] = x[i, k] + half * k2[i, k]
            _l96_rhs_loops(tmp, f, k3)
            for i in range(h):
                for k in range(w):
                    tmp[i, k] = x[i, k] + dt * k3[i, k]
            _l96_rhs_loops(tmp, f, k4)
            for i in range(h):
                for k in range(w):
                    x[i, k] = x[i, k] + sixth * (((k1[i, k] + 2.0 * k2[i, k]) + 2.0 * k3[i, k]) + k4[i, k])
            if not np.isfinite(x).all():
                raise FloatingPointError("non-finite Lorenz-96 state")
    return out


def _l96_rhs_numpy(x, forcing):
    return (np.roll(x, -1, axis=1) - np.roll(x, 2, axis=1)) * np.roll(x, 1, axis=1) - x + forcing[:, None]


def _l96_channel_numpy(x0, forcing_by_day, dt, steps_per_day):
    n_days = forcing_by_day.shape[0]
    out = np.empty((n_days,) + x0.shape)
    x = np.array(x0, dtype=np.float64)
    half = 0.5 * dt
    sixth = dt / 6.0
    for d in range(n_days):
        out[d] = x
        f = forcing_by_day[d]
        for _ in range(steps_per_day):
            k1 = _l96_rhs_numpy(x, f)
            k2 = _l96_rhs_numpy(x + half * k1, f)
            k3 = _l96_rhs_numpy(x + half * k2, f)
            k4 = _l96_rhs_numpy(x + dt * k3, f)
            x = x + sixth * (((k1 + 2.0 * k2) + 2.0 * k3) + k4)
        if not np.isfinite(x).all():
            raise FloatingPointError(f"non-finite Lorenz-96 state on day {d}")
    return out


# ---------------------------------------------------------------- Lorenz-63
@njit
def _l63_rhs(y, sigma, rho, beta):
    return np.array([sigma * (y[1] - y[0]), y[0] * (rho - y[2]) - y[1], y[0] * y[1] - beta * y[2]])


@njit
def _l63_jac(y, sigma, rho, beta):
    return np.array([[-sigma, sigma, 0.0], [rho - y[2], -1.0, -y[0]], [y[1], y[0], -beta]])


@njit
def _l63_run_loops(y0, sigma, rho, beta, dt, n_steps, record_every):
    n_rec = n_steps // record_every + 1
    out = np.empty((n_rec, 3))
    y = y0.copy()
    out[0] = y
    r = 1
    for s in range(1, n_steps + 1):
        k1 = _l63_rhs(y, sigma, rho, beta)
        k2 = _l63_rhs(y + 0.5 * dt * k1, sigma, rho, beta)
        k3 = _l63_rhs(y + 0.5 * dt * k2, sigma, rho, beta)
        k4 = _l63_rhs(y + dt * k3, sigma, rho, beta)
        y = y + (dt / 6.0) * (((k1 + 2.0 * k2) + 2.0 * k3) + k4)
        if not np.isfinite(y).all():
            raise FloatingPointError("non-finite Lorenz-63 state")
        if s % record_every == 0:
            out[r] = y
            r += 1
    return out


@njit
def _l63_tangent_loops(y0, sigma, rho, beta, dt, n_steps):
    """Orbit and exact Jacobians of the RK4 map, one per step."""
    states = np.empty((n_steps + 1, 3))
    jacs = np.empty((n_steps, 3, 3))
    eye = np.eye(3)
    y = y0.copy()
    states[0] = y
    for s in range(n_steps):
        k1 = _l63_rhs(y, sigma, rho, beta)
        a1 = _l63_jac(y, sigma, rho, beta)
        y2 = y + 0.5 * dt * k1
        k2 = _l63_rhs(y2, sigma, rho, beta)
        a2 = _l63_jac(y2, sigma, rho, beta) @ (eye + 0.5 * dt * a1)
        y3 = y + 0.5 * dt * k2
        k3 = _l63_rhs(y3, sigma, rho, beta)
        a3 = _l63_jac(y3, sigma, rho, beta) @ (eye + 0.5 * dt * a2)
        y4 = y + dt * k3
        k4 = _l63_rhs(y4, sigma, rho, beta)
        a4 = _l63_jac(y4, sigma, rho, beta) @ (eye + dt * a3)
        y = y + (dt / 6.0) * (((k1 + 2.0 * k2) + 2.0 * k3) + k4)
        jacs[s] = eye + (dt / 6.0) * (((a1 + 2.0 * a2) + 2.0 * a3) + a4)
        states[s + 1] = y
    return states, jacs


def _l63_rhs_numpy(y, sigma, rho, beta):
    return np.array([sigma * (y[1] - y[0]), y[0] * (rho - y[2]) - y[1], y[0] * y[1] - beta * y[2]])


def _l63_jac_numpy(y, sigma, rho, beta):
    return np.array([[-sigma, sigma, 0.0], [rho - y[2], -1.0, -y[0]], [y[1], y[0], -beta]])


def _l63_run_numpy(y0, sigma, rho, beta, dt, n_steps, record_every):
    out = np.empty((n_steps // record_every + 1, 3))
    y = np.array(y0, dtype=np.float64)
    out[0] = y
    r = 1
    for s in range(1, n_steps + 1):
        k1 = _l63_rhs_numpy(y, sigma, rho, beta)
        k2 = _l63_rhs_numpy(y + 0.5 * dt * k1, sigma, rho, beta)
        k3 = _l63_rhs_numpy(y + 0.5 * dt * k2, sigma, rho, beta)
        k4 = _l63_rhs_numpy(y + dt * k3, sigma, rho, beta)
        y = y + (dt / 6.0) * (((k1 + 2.0 * k2) + 2.0 * k3) + k4)
        if not np.isfinite(y).all():
            raise FloatingPointError(f"non-finite Lorenz-63 state at step {s}")
        if s % record_every == 0:
            out[r] = y
            r += 1
    return out


def _l63_tangent_numpy(y0, sigma, rho, beta, dt, n_steps):
    states = np.empty((n_steps + 1, 3))
    jacs = np.empty((n_steps, 3, 3))
    eye = np.eye(3)
    y = np.array(y0, dtype=np.float64)
    states[0] = y
    for s in range(n_steps):
        k1 = _l63_rhs_numpy(y, sigma, rho, beta)
        a1 = _l63_jac_numpy(y, sigma, rho, beta)
        y2 = y + 0.5 * dt * k1
        k2 = _l63_rhs_numpy(y2, sigma, rho, beta)
        a2 = _l63_jac_numpy(y2, sigma, rho, beta) @ (eye + 0.5 * dt * a1)
        y3 = y + 0.5 * dt * k2
        k3 = _l63_rhs_numpy(y3, sigma, rho, beta)
        a3 = _l63_jac_numpy(y3, sigma, rho, beta) @ (eye + 0.5 * dt * a2)
        y4 = y + dt * k3
        k4 = _l63_rhs_numpy(y4, sigma, rho, beta)
        a4 = _l63_jac_numpy(y4, sigma, rho, beta) @ (eye + dt * a3)
        y = y + (dt / 6.0) * (((k1 + 2.0 * k2) + 2.0 * k3) + k4)
        jacs[s] = eye + (dt / 6.0) * (((a1 + 2.0 * a2) + 2.0 * a3) + a4)
        states[s + 1] = y
    return states, jacs


# ---------------------------------------------------------------- QR Lyapunov sums
@njit
def _qr_log_growth_loops(jacs, basis, reortho_every):
    n_steps = jacs.shape[0]
    q = np.ascontiguousarray(basis)
    k = q.shape[1]
    sums = np.zeros(k)
    for s in range(n_steps):
        q = jacs[s] @ q
        if (s + 1) % reortho_every == 0 or s == n_steps - 1:
            qq, rr = np.linalg.qr(q)
            for j in range(k):
                sums[j] += np.log(np.abs(rr[j, j]))
            q = np.ascontiguousarray(qq)
    return sums, q


def _qr_log_growth_numpy(jacs, basis, reortho_every):
    q = np.array(basis, dtype=np.float64)
    sums = np.zeros(q.shape[1])
    n_steps = len(jacs)
    for s in range(n_steps):
        q = jacs[s] @ q
        if (s + 1) % reortho_every == 0 or s == n_steps - 1:
            q, r = np.linalg.qr(q)
            sums += np.log(np.abs(np.diag(r)))
    return sums, q


# ---------------------------------------------------------------- shared-weight deep linear GD
# The gradient of ||Phi - Theta^L||_F^2 is -2 sum_k (Theta^T)^k E (Theta^T)^(L-1-k)
# with E = Phi - Theta^L.  That sum is the upper-right block of
# [[Theta^T, E], [0, Theta^T]]^L, so both powers cost O(log L) products.
@njit
def _matmul_small(a, b, out):
    n, k = a.shape
    m = b.shape[1]
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for r in range(k):
                acc += a[i, r] * b[r, j]
            out[i, j] = acc


@njit
def _mat_power_loops(m, p):
    n = m.shape[0]
    result = np.eye(n)
    base = m.copy()
    tmp = np.empty((n, n))
    while p > 0:
        if p & 1:
            _matmul_small(result, base, tmp)
            result[:, :] = tmp
        p >>= 1
        if p:
            _matmul_small(base, base, tmp)
            base[:, :] = tmp
    return result


@njit
def _dl_grad_loops(theta, phi, depth):
    d = theta.shape[0]
    err = phi - _mat_power_loops(theta, depth)
    block = np.zeros((2 * d, 2 * d))
    tt = theta.T
    for i in range(d):
        for j in range(d):
            block[i, j] = tt[i, j]
            block[d + i, d + j] = tt[i, j]
            block[i, d + j] = err[i, j]
    upper = _mat_power_loops(block, depth)[:d, d:]
    loss = 0.0
    for i in range(d):
        for j in range(d):
            loss += err[i, j] * err[i, j]
    return -2.0 * np.ascontiguousarray(upper), loss


@njit
def _dl_gd_loops(theta0, phi, depth, eta, max_iter, tol, blowup):
    d = theta0.shape[0]
    losses = np.empty(max_iter + 1)
    radii = np.empty(max_iter + 1)
    gnorms = np.empty(max_iter + 1)
    theta = theta0.copy()
    eye = np.eye(d)
    status = GD_BUDGET
    n = 0
    for t in range(max_iter + 1):
        g, loss = _dl_grad_loops(theta, phi, depth)
        losses[t] = loss
        dev = theta - eye
        radii[t] = np.sqrt(max(np.linalg.eigvalsh(dev.T @ dev)[-1], 0.0))
        gn = 0.0
        for i in range(d):
            for j in range(d):
                gn += g[i, j] * g[i, j]
        gnorms[t] = np.sqrt(gn)
        n = t + 1
        if not np.isfinite(loss) or loss > blowup or not np.isfinite(gnorms[t]):
            status = GD_DIVERGED
            break
        if loss <= tol:
            status = GD_CONVERGED
            break
        if t == max_iter:
            break
        theta = theta - eta * g
    return losses[:n], radii[:n], gnorms[:n], theta, status


def _dl_grad_numpy(theta, phi, depth):
    d = theta.shape[0]
    err = phi - np.linalg.matrix_power(theta, depth)
    block = np.block([[theta.T, err], [np.zeros((d, d)), theta.T]])
    upper = np.linalg.matrix_power(block, depth)[:d, d:]
    return -2.0 * upper, float(np.sum(err * err))


def _dl_gd_numpy(theta0, phi, depth, eta, max_iter, tol, blowup):
    losses, radii, gnorms = [], [], []
    theta = np.array(theta0, dtype=np.float64)
    eye = np.eye(theta.shape[0])
    status = GD_BUDGET
    for t in range(max_iter + 1):
        g, loss = _dl_grad_numpy(theta, phi, depth)
        gn = float(np.sqrt(np.sum(g * g)))
        losses.append(loss)
        radii.append(np.linalg.norm(theta - eye, 2))
        gnorms.append(gn)
        if not np.isfinite(loss) or loss > blowup or not np.isfinite(gn):
            status = GD_DIVERGED
            break
        if loss <= tol:
            status = GD_CONVERGED
            break
        if t == max_iter:
            break
        theta = theta - eta * g
    return np.array(losses), np.array(radii), np.array(gnorms), theta, status


loops = types.SimpleNamespace(
    l96_channel=_l96_channel_loops,
    l63_run=_l63_run_loops,
    l63_tangent=_l63_tangent_loops,
    qr_log_growth=_qr_log_growth_loops,
    deep_linear_grad=_dl_grad_loops,
    deep_linear_gd=_dl_gd_loops,
)
vectorized = types.SimpleNamespace(
    l96_channel=_l96_channel_numpy,
    l63_run=_l63_run_numpy,
    l63_tangent=_l63_tangent_numpy,
    qr_log_growth=_qr_log_growth_numpy,
    deep_linear_grad=_dl_grad_numpy,
    deep_linear_gd=_dl_gd_numpy,
)

_active = loops if USE_NUMBA else vectorized
l96_channel = _active.l96_channel
l63_run = _active.l63_run
l63_tangent = _active.l63_tangent
qr_log_growth = _active.qr_log_growth
deep_linear_grad = _active.deep_linear_grad
deep_linear_gd = _active.deep_linear_gd
