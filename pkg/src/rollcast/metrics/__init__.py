from .skill import (
    CSV_COLUMNS,
    DegenerateSampleWarning,
    MetricSeries,
    bivariate_cor,
    latitude_weights,
    metric_pcc,
    metric_tcc,
    pcc_samples,
    write_metric_csv,
)
from .cka import linear_cka
from .stability import (
    DENSE_GUARD,
    JacobianRecord,
    StabilityReport,
    divergence_monitor,
    grad_via_expansion,
    growth_slope,
    jacobian_growth,
    jacobian_norm_power,
    jacobian_step,
    lyapunov_from_jacobians,
    lyapunov_max,
    model_lyapunov,
    spectral_norm_power,
)
from .evaluation import cka_rollout_curve, evaluation_starts, forecast_anomalies, skill_curves

__all__ = [
    "CSV_COLUMNS",
    "DENSE_GUARD",
    "DegenerateSampleWarning",
    "JacobianRecord",
    "MetricSeries",
    "StabilityReport",
    "bivariate_cor",
    "cka_rollout_curve",
    "divergence_monitor",
    "evaluation_starts",
    "forecast_anomalies",
    "grad_via_expansion",
    "growth_slope",
    "jacobian_growth",
    "jacobian_norm_power",
    "jacobian_step",
    "latitude_weights",
    "linear_cka",
    "lyapunov_from_jacobians",
    "lyapunov_max",
    "metric_pcc",
    "metric_tcc",
    "model_lyapunov",
    "pcc_samples",
    "skill_curves",
    "spectral_norm_power",
    "write_metric_csv",
]
