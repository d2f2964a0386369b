"""Unrolled forecasts with teacher forcing.

Step ``t`` consumes the previous prediction, except at forced steps where the
observed state ``X_{t-1}`` is fed through a stop-gradient instead.  The whole
unroll, optionally with its per-step anomaly losses, is recorded on one graph
so the trainer can differentiate it in a single backward pass.
"""
from dataclasses import dataclass

import numpy as np

from ..forecaster import build_step, select_adapter
from ..tensor import Graph, forward_eval
from .losses import combined_loss, loss_amse, loss_pcc


@dataclass(frozen=True)
class TeacherForcingSchedule:
    """``segment``: a free rollout of ``horizon`` steps from an observed start.

    ``periodic``: within ``horizon`` steps, every step ``t > 1`` with
    ``(t - 1) % period == 0`` restarts from the observation.  Gradients never
    cross a forced step.
    """

    mode: str = "segment"
    horizon: int = 1
    period: int = 0
    stop_gradient: bool = True

    def __post_init__(self):
        if self.mode not in ("segment", "periodic"):
            raise ValueError(f"unknown forcing mode {self.mode!r}")
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")
        if self.mode == "periodic" and self.period < 1:
            raise ValueError("periodic forcing needs period >= 1")
        if not self.stop_gradient:
            raise ValueError("forced inputs always block the gradient")

    def forced(self):
        """Boolean mask over steps ``1..horizon``."""
        t = np.arange(1, self.horizon + 1)
        if self.mode == "segment":
            return np.zeros(self.horizon, dtype=bool)
        return (t > 1) & ((t - 1) % self.period == 0)

    @property
    def forced_fraction(self):
        return float(self.forced().mean())


@dataclass
class RolloutResult:
    predictions: np.ndarray  # (T, B, n)
    losses: np.ndarray  # (T,) or None
    forced: np.ndarray  # (T,) bool
    features: np.ndarray  # (T, B, f): features of the step producing X_hat_t

    def __len__(self):
        return self.predictions.shape[0]


def flat_weights(latitude_weights, n_vars, n_lon):
    """Per-point weights over a flattened ``(V, H, W)`` state."""
    w = np.asarray(latitude_weights, dtype=np.float64)
    return np.broadcast_to(w[None, :, None], (n_vars, w.size, n_lon)).reshape(-1).copy()


def build_rollout_graph(config, schedule, use_adapters=False, weights=None, anom_scale=1.0):
    """Record a rollout; with ``weights`` the per-step and total losses are added.

    Inputs: ``x0``, ``aux/t`` and, where needed, ``obs/t`` (observed ``X_t``),
    ``clim/t`` and ``anom/t`` (true anomaly divided by ``anom_scale``).
    Outputs: ``pred/t``, ``feat/t`` and, with losses, ``loss/t`` and ``loss``.
    """
    g = Graph()
    forced = schedule.forced()
    prev = g.input("x0")
    inv = g.const(1.0 / anom_scale)
    w = None if weights is None else g.const(weights)
    total = None
    for t in range(1, schedule.horizon + 1):
        if forced[t - 1]:
            prev = g.stop_gradient(g.input(f"obs/{t - 1}"), name=f"forced/{t}")
        set_index = select_adapter(t) if use_adapters else None
        pred, feats = build_step(g, config, prev, g.input(f"aux/{t}"), set_index)
        g.output(f"pred/{t}", pred)
        g.output(f"feat/{t}", feats)
        if w is not None:
            a_hat = (pred - g.input(f"clim/{t}")) * inv
            a_true = g.input(f"anom/{t}")
            step_loss = combined_loss(loss_amse(a_hat, a_true, w), loss_pcc(a_hat, a_true, w, batched=True))
            g.output(f"loss/{t}", step_loss)
            total = step_loss if total is None else total + step_loss
        prev = pred
    if total is not None:
        g.output("loss", total)
    return g


def rollout_inputs(schedule, x0, aux, observed=None, climatology=None, anom_scale=1.0):
    """Bind arrays to the leaf names used by :func:`build_rollout_graph`."""
    horizon = schedule.horizon
    forced = schedule.forced()
    x0 = np.asarray(x0, dtype=np.float64)
    aux = np.asarray(aux, dtype=np.float64)
    if aux.shape[0] != horizon:
        raise ValueError(f"need {horizon} aux encodings, got {aux.shape[0]}")
    inputs = {"x0": x0}
    for t in range(1, horizon + 1):
        inputs[f"aux/{t}"] = np.broadcast_to(aux[t - 1], (x0.shape[0], aux.shape[-1]))
    if forced.any() and observed is None:
        step = int(np.argmax(forced)) + 1
        raise ValueError(f"step {step} is forced but no observations were supplied")
    if observed is not None:
        observed = np.asarray(observed, dtype=np.float64)
        if observed.shape[0] < horizon:
            raise ValueError(f"need {horizon} observed states, got {observed.shape[0]}")
        for t in range(1, horizon + 1):
            inputs[f"obs/{t}"] = observed[t - 1]
    if climatology is not None:
        if observed is None:
            raise ValueError("losses need observed states")
        for t in range(1, horizon + 1):
            inputs[f"clim/{t}"] = climatology[t - 1]
            inputs[f"anom/{t}"] = (observed[t - 1] - climatology[t - 1]) / anom_scale
    return inputs


def rollout(params, bank, x0, aux, observed=None, schedule=None, climatology=None, weights=None, anom_scale=1.0):
    """Unroll the step model from ``x0`` (``(B, n)``).

    ``aux`` is ``(T, B, 3)`` or ``(T, 3)``; ``observed`` holds ``X_1..X_T``.
    Losses are computed when both ``climatology`` (``C`` at each target day)
    and ``weights`` are given.
    """
    config = params.config
    x0 = np.asarray(x0, dtype=np.float64).reshape(-1, config.state_size)
    if schedule is None:
        schedule = TeacherForcingSchedule("segment", horizon=np.asarray(aux).shape[0])
    if observed is not None:
        observed = np.asarray(observed, dtype=np.float64).reshape(schedule.horizon, -1, config.state_size)
    if climatology is not None:
        climatology = np.asarray(climatology, dtype=np.float64).reshape(schedule.horizon, -1, config.state_size)
    with_loss = climatology is not None and weights is not None
    if not with_loss:
        return _rollout_stepwise(params, bank, x0, aux, observed, schedule)
    g = build_rollout_graph(config, schedule, bank is not None, weights, anom_scale)
    inputs = dict(params.tensors)
    if bank is not None:
        inputs.update(bank.tensors)
    inputs.update(rollout_inputs(schedule, x0, aux, observed, climatology, anom_scale))
    out = forward_eval(g, inputs, keep=False)
    T = schedule.horizon
    preds = np.stack([out[f"pred/{t}"] for t in range(1, T + 1)])
    feats = np.stack([out[f"feat/{t}"] for t in range(1, T + 1)])
    losses = np.array([out[f"loss/{t}"] for t in range(1, T + 1)])
    return RolloutResult(preds, losses, schedule.forced(), feats)


def _rollout_stepwise(params, bank, x0, aux, observed, schedule):
    """Gradient-free rollout that keeps only one step's intermediates alive.

    Each step records exactly the operations of the unrolled graph, so the
    predictions agree with it bitwise.
    """
    config = params.config
    inputs = rollout_inputs(schedule, x0, aux, observed)
    values = dict(params.tensors)
    if bank is not None:
        values.update(bank.tensors)
    graphs = {}
    forced = schedule.forced()
    prev = inputs["x0"]
    preds, feats = [], []
    for t in range(1, schedule.horizon + 1):
        if forced[t - 1]:
            prev = inputs[f"obs/{t - 1}"]
        set_index = select_adapter(t) if bank is not None else None
        if set_index not in graphs:
            g = Graph()
            pred, feat = build_step(g, config, g.input("x"), g.input("aux"), set_index)
            g.output("pred", pred)
            g.output("feat", feat)
            graphs[set_index] = g
        out = forward_eval(graphs[set_index], {**values, "x": prev, "aux": inputs[f"aux/{t}"]}, keep=False)
        prev = out["pred"]
        preds.append(prev)
        feats.append(out["feat"])
    return RolloutResult(np.stack(preds), None, forced, np.stack(feats))
