"""Forecast skill: latitude weights, PCC, TCC and bivariate COR."""
import csv
import warnings
from dataclasses import dataclass, field

import numpy as np


class DegenerateSampleWarning(UserWarning):
    """Samples or pixels with zero norm were dropped from an aggregate metric."""


def latitude_weights(latitudes):
    """cos(latitude) normalised to unit mean over rows."""
    lat = np.asarray(latitudes, dtype=np.float64)
    if np.any(np.abs(lat) >= 90.0):
        raise ValueError("latitudes must lie strictly inside (-90, 90)")
    c = np.cos(np.deg2rad(lat))
    return c / c.mean()


def _check(pred, true):
    pred = np.asarray(pred, dtype=np.float64)
    true = np.asarray(true, dtype=np.float64)
    if pred.shape != true.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {true.shape}")
    return pred, true


def pcc_samples(pred, true, weights):
    """Per-sample weighted uncentered spatial correlation; NaN where undefined.

    Fields are ``(B, H, W)``; ``weights`` has one entry per row.
    """
    pred, true = _check(pred, true)
    w = np.asarray(weights, dtype=np.float64)[:, None]
    axes = (-2, -1)
    cross = np.sum(w * true * pred, axis=axes)
    norm = np.sqrt(np.sum(w * true * true, axis=axes) * np.sum(w * pred * pred, axis=axes))
    out = np.full(cross.shape, np.nan)
    ok = norm > 0
    # Cauchy-Schwarz bounds the exact ratio; clamp the rounding overshoot of collinear fields.
    out[ok] = np.clip(cross[ok] / norm[ok], -1.0, 1.0)
    return out


def metric_pcc(pred, true, weights, lead=None):
    """Test-set mean of the per-sample spatial correlation at one lead time."""
    pred, true = _check(pred, true)
    if pred.ndim != 3 or pred.shape[0] < 1:
        raise ValueError("expected (B, H, W) fields with B >= 1")
    vals = pcc_samples(pred, true, weights)
    bad = int(np.isnan(vals).sum())
    if bad:
        warnings.warn(f"PCC lead {lead}: {bad} zero-norm sample(s) excluded", DegenerateSampleWarning, stacklevel=2)
    if bad == len(vals):
        return float("nan")
    return float(np.mean(vals[~np.isnan(vals)]))


def metric_tcc(pred, true, weights, lead=None):
    """Latitude-weighted spatial mean of per-pixel temporal correlations."""
    pred, true = _check(pred, true)
    if pred.ndim != 3 or pred.shape[0] < 2:
        raise ValueError("expected (B, H, W) fields with B >= 2")
    cross = np.sum(true * pred, axis=0)
    norm = np.sqrt(np.sum(true * true, axis=0) * np.sum(pred * pred, axis=0))
    ok = norm > 0
    bad = int((~ok).sum())
    if bad:
        warnings.warn(f"TCC lead {lead}: {bad} zero-variance pixel(s) excluded", DegenerateSampleWarning, stacklevel=2)
    if not ok.any():
        return float("nan")
    w = np.broadcast_to(np.asarray(weights, dtype=np.float64)[:, None], ok.shape)
    r = np.clip(cross[ok] / norm[ok], -1.0, 1.0)
    return float(np.clip(np.mean(w[ok] * r), -1.0, 1.0))


def bivariate_cor(pred, true):
    """Bivariate correlation of two-component index series ``(B, 2)``."""
    pred, true = _check(pred, true)
    if pred.ndim != 2 or pred.shape[1] != 2 or pred.shape[0] < 2:
        raise ValueError("expected (B, 2) index series with B >= 2")
    num = np.sum(true[:, 0] * pred[:, 0] + true[:, 1] * pred[:, 1])
    den = np.sqrt(np.sum(true[:, 0] ** 2 + true[:, 1] ** 2)) * np.sqrt(np.sum(pred[:, 0] ** 2 + pred[:, 1] ** 2))
    if den == 0:
        raise ValueError("bivariate correlation undefined for a zero series")
    return float(np.clip(num / den, -1.0, 1.0))


@dataclass
class MetricSeries:
    metric: str
    variable: str
    run_id: str
    values: np.ndarray
    leads: np.ndarray = field(default=None)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.leads is None:
            self.leads = np.arange(1, len(self.values) + 1)

    def rows(self):
        for lead, value in zip(self.leads, self.values):
            yield {"metric": self.metric, "variable": self.variable, "lead_day": int(lead), "value": value, "run_id": self.run_id}

    def mean_over(self, first, last):
        sel = (self.leads >= first) & (self.leads <= last)
        return float(np.mean(self.values[sel]))


CSV_COLUMNS = ("metric", "variable", "lead_day", "value", "run_id")


def write_metric_csv(path, series):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for s in series:
            for row in s.rows():
                row["value"] = repr(float(row["value"]))
                writer.writerow(row)
