"""Stability diagnostics for rolled-out step models.

Step Jacobians, Jacobian-product growth along a rollout, the leading Lyapunov
exponent, an explicit Jacobian-product assembly of the rollout gradient (an
independent check on reverse-mode BPTT) and a loss/gradient-norm monitor.
"""
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .. import kernels
from ..forecaster import build_step, select_adapter
from ..tensor import Graph, backward_grad, forward_eval

DENSE_GUARD = 4096


@dataclass
class JacobianRecord:
    step: int
    matrix: np.ndarray
    spectral_norm: float


def _bindings(params, bank):
    values = dict(params.tensors)
    if bank is not None:
        values.update(bank.tensors)
    return values


def _step_graph(config, set_index):
    g = Graph()
    pred, _ = build_step(g, config, g.input("x"), g.input("aux"), set_index)
    g.output("pred", pred)
    return g, pred


def _check_guard(n):
    if n > DENSE_GUARD:
        raise ValueError(
            f"state dimension {n} exceeds the dense Jacobian guard ({DENSE_GUARD}); "
            "use jacobian_norm_power or jacobian_growth(method='power') instead"
        )


def jacobian_step(params, bank, x, aux, set_index=None, step=0):
    """Dense ``J = d x_next / d x`` at one state.

    All ``n`` rows come from a single reverse pass: the state is replicated ``n``
    times along the batch axis and the output cotangent is the identity.
    """
    config = params.config
    n = config.state_size
    _check_guard(n)
    flat = np.asarray(x, dtype=np.float64).reshape(1, n)
    aux = np.asarray(aux, dtype=np.float64).reshape(1, config.aux_width)
    g, pred = _step_graph(config, set_index if bank is not None else None)
    values = _bindings(params, bank)
    values.update(x=np.repeat(flat, n, axis=0), aux=np.repeat(aux, n, axis=0))
    forward_eval(g, values)
    jac = backward_grad(g, pred, wrt=["x"], seed=np.eye(n))["x"]
    return JacobianRecord(step, jac, float(np.linalg.norm(jac, 2)))


def spectral_norm_power(matvec, rmatvec, n, tol=1e-10, max_iter=10_000, seed=0):
    """Largest singular value by power iteration on ``A^T A``."""
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(n)
    v /= np.linalg.norm(v)
    sigma = 0.0
    for _ in range(max_iter):
        u = matvec(v)
        w = rmatvec(u)
        norm_w = np.linalg.norm(w)
        if norm_w == 0:
            return 0.0
        new_sigma = math.sqrt(norm_w)
        v = w / norm_w
        if abs(new_sigma - sigma) <= tol * max(new_sigma, 1e-300):
            return new_sigma
        sigma = new_sigma
    return sigma


def _jvp_vjp(params, bank, x, aux, set_index, eps):
    config = params.config
    n = config.state_size
    flat = np.asarray(x, dtype=np.float64).reshape(1, n)
    aux = np.asarray(aux, dtype=np.float64).reshape(1, config.aux_width)
    g, pred = _step_graph(config, set_index if bank is not None else None)
    values = _bindings(params, bank)

    def jvp(v):
        # central difference along v; reverse mode has no forward tangents
        h = eps * max(1.0, float(np.linalg.norm(flat))) / max(float(np.linalg.norm(v)), 1e-300)
        plus = forward_eval(g, {**values, "x": flat + h * v[None], "aux": aux}, keep=False)["pred"]
        minus = forward_eval(g, {**values, "x": flat - h * v[None], "aux": aux}, keep=False)["pred"]
        return ((plus - minus) / (2.0 * h))[0]

    def vjp(u):
        forward_eval(g, {**values, "x": flat, "aux": aux})
        return backward_grad(g, pred, wrt=["x"], seed=u[None])["x"][0]

    return jvp, vjp


def jacobian_norm_power(params, bank, x, aux, set_index=None, eps=1e-6, tol=1e-10, max_iter=10_000):
    """Spectral norm of the step Jacobian without forming it (any state size)."""
    jvp, vjp = _jvp_vjp(params, bank, x, aux, set_index, eps)
    return spectral_norm_power(jvp, vjp, params.config.state_size, tol=tol, max_iter=max_iter)


# ---------------------------------------------------------------- Lyapunov
def lyapunov_from_jacobians(jacobians, transient=None, reortho_every=1, seed=0):
    """Leading exponent per step of a sequence of Jacobians.

    A seeded random unit vector is pushed through the first ``transient``
    matrices to align it with the dominant direction, then the log growth
    over the remaining steps is averaged via repeated QR normalisation.
    """
    jacs = np.ascontiguousarray(jacobians, dtype=np.float64)
    if jacs.ndim != 3 or jacs.shape[1] != jacs.shape[2]:
        raise ValueError(f"expected (T, n, n) Jacobians, got {jacs.shape}")
    if not np.all(np.isfinite(jacs)):
        raise ValueError("Jacobians contain non-finite values")
    T = jacs.shape[0]
    if T < 10:
        raise ValueError(f"need at least 10 steps, got {T}")
    transient = T // 10 if transient is None else int(transient)
    if not 0 <= transient < T:
        raise ValueError("transient must leave at least one step")
    rng = np.random.default_rng(seed)
    q = rng.standard_normal((jacs.shape[1], 1))
    q /= np.linalg.norm(q)
    if transient:
        _, q = kernels.qr_log_growth(jacs[:transient], q, reortho_every)
    sums, _ = kernels.qr_log_growth(jacs[transient:], np.ascontiguousarray(q), reortho_every)
    return float(sums[0] / (T - transient))


def lyapunov_max(step_jacobian, orbit, transient=None, reortho_every=1, seed=0, dt=1.0):
    """Leading Lyapunov exponent along ``orbit`` ``X_0..X_T``.

    ``step_jacobian(x, t)`` returns the Jacobian of the map applied to ``x`` at
    step ``t``.  The result is per unit time when ``dt`` is the step length.
    """
    orbit = np.asarray(orbit, dtype=np.float64)
    if not np.all(np.isfinite(orbit)):
        raise ValueError("orbit contains non-finite values")
    T = orbit.shape[0] - 1
    if T < 10:
        raise ValueError(f"need an orbit of at least 10 steps, got {T}")
    jacs = np.stack([np.asarray(step_jacobian(orbit[t], t + 1), dtype=np.float64) for t in range(T)])
    return lyapunov_from_jacobians(jacs, transient, reortho_every, seed) / dt


def model_lyapunov(params, bank, x0, aux, transient=None, method="auto"):
    """Leading exponent of a model along its own free rollout from ``x0``.

    ``dense`` feeds explicit step Jacobians to :func:`lyapunov_max`; ``power``
    (chosen automatically above the dense guard) averages the log growth of
    one tangent vector pushed through Jacobian-vector products.
    """
    from ..training.rollout import rollout

    aux = np.asarray(aux, dtype=np.float64)
    n = params.config.state_size
    if method == "auto":
        method = "dense" if n <= DENSE_GUARD else "power"
    if method == "power":
        T = len(aux)
        if T < 10:
            raise ValueError(f"need an orbit of at least 10 steps, got {T}")
        transient = T // 10 if transient is None else int(transient)
        curve = jacobian_growth(params, bank, x0, aux, method="power")
        start = curve[transient - 1] if transient else 0.0
        return float((curve[-1] - start) / (T - transient))
    if method != "dense":
        raise ValueError(f"unknown method {method!r}")
    res = rollout(params, bank, np.asarray(x0).reshape(1, -1), aux.reshape(len(aux), 1, -1))
    orbit = np.concatenate([np.asarray(x0).reshape(1, -1), res.predictions[:, 0]])

    def jac(x, t):
        set_index = select_adapter(t) if bank is not None else None
        return jacobian_step(params, bank, x, aux[t - 1], set_index).matrix

    return lyapunov_max(jac, orbit, transient)


def jacobian_growth(params, bank, x0, aux, method="auto", seed=0, eps=1e-6):
    """``log ||J_t ... J_1||_2`` for ``t = 1..T`` along the model's free rollout.

    ``dense`` multiplies explicit Jacobians (renormalising to avoid overflow);
    ``power`` pushes one seeded tangent vector through finite-difference
    Jacobian-vector products, which tracks the same growth once the vector
    has aligned with the leading direction.  ``auto`` picks ``dense`` within
    the dense guard.
    """
    from ..training.rollout import rollout

    config = params.config
    n = config.state_size
    aux = np.asarray(aux, dtype=np.float64)
    T = len(aux)
    x0 = np.asarray(x0, dtype=np.float64).reshape(1, n)
    res = rollout(params, bank, x0, aux.reshape(T, 1, -1))
    inputs = np.concatenate([x0, res.predictions[:-1, 0]])
    if method == "auto":
        method = "dense" if n <= DENSE_GUARD else "power"
    out = np.empty(T)
    if method == "dense":
        prod = np.eye(n)
        log_scale = 0.0
        for t in range(1, T + 1):
            set_index = select_adapter(t) if bank is not None else None
            prod = jacobian_step(params, bank, inputs[t - 1], aux[t - 1], set_index).matrix @ prod
            s = np.linalg.norm(prod, 2)
            log_scale += math.log(s)
            prod /= s
            out[t - 1] = log_scale
        return out
    if method != "power":
        raise ValueError(f"unknown method {method!r}")
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(n)
    v /= np.linalg.norm(v)
    log_scale = 0.0
    for t in range(1, T + 1):
        set_index = select_adapter(t) if bank is not None else None
        jvp, _ = _jvp_vjp(params, bank, inputs[t - 1], aux[t - 1], set_index, eps)
        v = jvp(v)
        s = np.linalg.norm(v)
        log_scale += math.log(s)
        v /= s
        out[t - 1] = log_scale
    return out


def growth_slope(curve, first=5, last=30):
    """Least-squares slope of ``curve[t-1]`` against ``t`` for ``t`` in ``[first, last]``."""
    t = np.arange(first, last + 1)
    y = np.asarray(curve)[t - 1]
    return float(np.polyfit(t, y, 1)[0])


# ---------------------------------------------------------------- explicit gradient
def _loss_cotangent(pred, true_anom, clim, weights, anom_scale):
    """d(combined step loss)/d(prediction) for a batch ``(B, n)``."""
    B, n = pred.shape
    a_hat = (pred - clim) / anom_scale
    w = weights[None, :]
    d_amse = -2.0 * w * (true_anom - a_hat) / (B * n)
    s_xy = np.sum(w * true_anom * a_hat, axis=1, keepdims=True)
    s_xx = np.sum(w * true_anom * true_anom, axis=1, keepdims=True)
    s_yy = np.sum(w * a_hat * a_hat, axis=1, keepdims=True)
    root = np.sqrt(s_xx * s_yy)
    corr = s_xy / root
    d_corr = w * true_anom / root - corr * w * a_hat / s_yy
    d_pcc = -d_corr / B
    return 0.5 * (d_amse + d_pcc) / anom_scale


def _param_jacobian(params, bank, x, aux, set_index, names):
    """Dense ``d F / d theta`` (``n`` rows) at one state: one reverse pass per output."""
    config = params.config
    n = config.state_size
    g, pred = _step_graph(config, set_index)
    values = _bindings(params, bank)
    values.update(x=np.asarray(x).reshape(1, n), aux=np.asarray(aux).reshape(1, -1))
    forward_eval(g, values)
    present = [k for k in names if k in g.leaves]
    rows = []
    for i in range(n):
        seed = np.zeros((1, n))
        seed[0, i] = 1.0
        grads = backward_grad(g, pred, wrt=present, seed=seed)
        rows.append(np.concatenate([(grads[k] if k in grads else np.zeros_like(values[k])).ravel() for k in names]))
    return np.stack(rows)


def grad_via_expansion(params, bank, x0, aux, observed, climatology, weights, anom_scale=1.0, schedule=None, names=None):
    """Rollout-loss gradient assembled from explicit Jacobian products.

    For every sample and step ``t``::

        grad += dF/dtheta(u_t, s_t)^T  sum_{j >= t} (J_j ... J_{t+1})^T dl_j/dX_hat_j

    where ``u_t`` is the step input and the product is cut at forced steps,
    whose inputs are observations.  Returns ``{name: gradient}``.
    """
    from ..training.rollout import TeacherForcingSchedule, rollout

    config = params.config
    n = config.state_size
    _check_guard(n)
    aux = np.asarray(aux, dtype=np.float64)
    T = aux.shape[0]
    schedule = schedule or TeacherForcingSchedule("segment", T)
    x0 = np.asarray(x0, dtype=np.float64).reshape(-1, n)
    B = x0.shape[0]
    aux = np.broadcast_to(aux.reshape(T, -1, config.aux_width), (T, B, config.aux_width))
    observed = np.asarray(observed, dtype=np.float64).reshape(T, B, n)
    climatology = np.asarray(climatology, dtype=np.float64).reshape(T, B, n)
    weights = np.asarray(weights, dtype=np.float64)
    if names is None:
        names = list(params.tensors) + (list(bank.tensors) if bank is not None else [])
    forced = schedule.forced()
    res = rollout(params, bank, x0, aux, observed, schedule)
    preds = res.predictions
    cot = np.stack([_loss_cotangent(preds[t], (observed[t] - climatology[t]) / anom_scale, climatology[t], weights, anom_scale) for t in range(T)])

    sets = [select_adapter(t) if bank is not None else None for t in range(1, T + 1)]
    used = set()
    for s in sets:
        g, _ = _step_graph(config, s)
        used.update(g.leaves)
    names = [k for k in names if k in used]
    total = None
    for b in range(B):
        inputs = []
        for t in range(1, T + 1):
            if t == 1:
                inputs.append(x0[b])
            elif forced[t - 1]:
                inputs.append(observed[t - 2, b])
            else:
                inputs.append(preds[t - 2, b])
        jacs = [jacobian_step(params, bank, inputs[t - 1], aux[t - 1, b], sets[t - 1]).matrix for t in range(1, T + 1)]
        for t in range(1, T + 1):
            v = np.zeros(n)
            prod = np.eye(n)
            for j in range(t, T + 1):
                if j > t:
                    if forced[j - 1]:
                        break
                    prod = jacs[j - 1] @ prod
                v += prod.T @ cot[j - 1, b]
            d_theta = _param_jacobian(params, bank, inputs[t - 1], aux[t - 1, b], sets[t - 1], names)
            contrib = d_theta.T @ v
            total = contrib if total is None else total + contrib
    out, pos = {}, 0
    values = _bindings(params, bank)
    for k in names:
        size = values[k].size
        out[k] = total[pos : pos + size].reshape(values[k].shape)
        pos += size
    return out


# ---------------------------------------------------------------- training monitor
@dataclass
class StabilityReport:
    n_steps: int
    max_loss_jump: float
    max_relative_jump: float
    mean_window_variance: float
    max_window_variance: float
    grad_spikes: int
    nonfinite_events: int
    window: int
    spike_factor: float
    spike_steps: list = field(default_factory=list)

    def as_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.as_dict(), indent=2, sort_keys=True)


def divergence_monitor(record, window=20, spike_factor=10.0):
    """Summarise loss jumps, windowed loss variance and gradient-norm spikes.

    A spike is a gradient norm above ``spike_factor`` times the median of the
    preceding ``window`` norms.  Non-finite losses or norms are counted, and
    excluded from the other statistics.
    """
    loss = np.asarray(record.loss, dtype=np.float64)
    gn = np.asarray(record.grad_norm, dtype=np.float64)
    if loss.size == 0:
        raise ValueError("training record is empty")
    nonfinite = int(np.sum(~np.isfinite(loss)) + np.sum(~np.isfinite(gn))) + len(getattr(record, "nonfinite_steps", []))
    finite_loss = loss[np.isfinite(loss)]
    jumps = np.abs(np.diff(finite_loss))
    max_jump = float(jumps.max()) if jumps.size else 0.0
    base = np.abs(finite_loss[:-1])
    rel = jumps / np.where(base > 0, base, np.inf)
    max_rel = float(rel.max()) if rel.size else 0.0
    if finite_loss.size >= window:
        view = np.lib.stride_tricks.sliding_window_view(finite_loss, window)
        var = view.var(axis=1)
    else:
        var = np.array([finite_loss.var()])
    spikes = []
    for i in range(1, gn.size):
        past = gn[max(0, i - window) : i]
        past = past[np.isfinite(past)]
        if past.size and np.isfinite(gn[i]) and gn[i] > spike_factor * np.median(past):
            spikes.append(i)
    return StabilityReport(
        n_steps=int(loss.size),
        max_loss_jump=max_jump,
        max_relative_jump=max_rel,
        mean_window_variance=float(var.mean()),
        max_window_variance=float(var.max()),
        grad_spikes=len(spikes),
        nonfinite_events=nonfinite,
        window=window,
        spike_factor=spike_factor,
        spike_steps=spikes,
    )
