"""Lead-resolved skill and representation curves for a trained step model."""
import numpy as np

from ..training.rollout import TeacherForcingSchedule, rollout
from .cka import linear_cka
from .skill import MetricSeries, metric_pcc, metric_tcc


def evaluation_starts(data, horizon=42, stride=1):
    n = data.n_starts(horizon)
    if n < 1:
        raise ValueError(f"test data has {len(data)} days; need at least {horizon + 1}")
    return np.arange(0, n, stride)


def forecast_anomalies(params, bank, data, horizon=42, stride=1, starts=None):
    """Free rollouts from every start; returns predicted and true anomalies ``(T, B, V, H, W)``."""
    if starts is None:
        starts = evaluation_starts(data, horizon, stride)
    x0, aux, obs, clim = data.batch(starts, horizon)
    preds = rollout(params, bank, x0, aux).predictions
    shape = (horizon, len(starts), params.config.n_vars, params.config.n_lat, params.config.n_lon)
    return (preds - clim).reshape(shape), (obs - clim).reshape(shape)


def skill_curves(pred_anom, true_anom, lat_weights, run_id="", variable="x"):
    """PCC and TCC per lead for each variable; fields are ``(T, B, V, H, W)``."""
    out = []
    T = pred_anom.shape[0]
    leads = np.arange(1, T + 1)
    for v in range(pred_anom.shape[2]):
        name = variable if pred_anom.shape[2] == 1 else f"{variable}{v}"
        pcc = [metric_pcc(pred_anom[t, :, v], true_anom[t, :, v], lat_weights, lead=t + 1) for t in range(T)]
        tcc = [metric_tcc(pred_anom[t, :, v], true_anom[t, :, v], lat_weights, lead=t + 1) for t in range(T)]
        out.append(MetricSeries("PCC", name, run_id, np.array(pcc), leads))
        out.append(MetricSeries("TCC", name, run_id, np.array(tcc), leads))
    return out


def cka_rollout_curve(params, bank, data, horizon=42, stride=1, starts=None, run_id="", variable="features"):
    """Per lead ``t``: CKA between features of the step fed the true ``X_{t-1}``
    and of the step fed the model's own ``X_hat_{t-1}``, across test starts.
    """
    if starts is None:
        starts = evaluation_starts(data, horizon, stride)
    x0, aux, obs, _ = data.batch(starts, horizon)
    free = rollout(params, bank, x0, aux).features
    forced = rollout(params, bank, x0, aux, obs, TeacherForcingSchedule("periodic", horizon, 1)).features
    values = np.array([linear_cka(forced[t], free[t]) for t in range(horizon)])
    return MetricSeries("CKA", variable, run_id, values, np.arange(1, horizon + 1))
