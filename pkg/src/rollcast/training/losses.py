"""Anomaly losses.

The same expressions evaluate on numpy arrays (returning floats) and on graph
nodes (recording the computation), so the training loss and its numpy
reference cannot drift apart.  ``weights`` must broadcast against the fields;
1-D latitude weights are expanded over longitude for numpy inputs.
"""
import numpy as np

from ..tensor import Node


def _field_weights(weights, field):
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim == 1 and len(field.shape) >= 2 and w.shape[0] == field.shape[-2]:
        return w[:, None]
    return w


def loss_amse(pred, true, weights):
    """Latitude-weighted anomaly MSE averaged over every point (and sample)."""
    symbolic = isinstance(pred, Node) or isinstance(true, Node)
    if not symbolic:
        pred = np.asarray(pred, dtype=np.float64)
        true = np.asarray(true, dtype=np.float64)
        if pred.shape != true.shape:
            raise ValueError(f"shape mismatch: {pred.shape} vs {true.shape}")
        weights = _field_weights(weights, pred)
    diff = true - pred
    out = (weights * diff * diff).mean()
    return out if symbolic else float(out)


def loss_pcc(pred, true, weights, batched=False):
    """One minus the uncentered weighted spatial correlation.

    With ``batched`` the leading axis indexes samples and the per-sample losses
    are averaged.
    """
    symbolic = isinstance(pred, Node) or isinstance(true, Node)
    if not symbolic:
        pred = np.asarray(pred, dtype=np.float64)
        true = np.asarray(true, dtype=np.float64)
        if pred.shape != true.shape:
            raise ValueError(f"shape mismatch: {pred.shape} vs {true.shape}")
        weights = _field_weights(weights, pred)
        ndim = pred.ndim
    else:
        ndim = 2  # graph states are (batch, flattened grid)
    axis = tuple(range(1, ndim)) if batched else None
    cross = (weights * true * pred).sum(axis=axis)
    s_true = (weights * true * true).sum(axis=axis)
    s_pred = (weights * pred * pred).sum(axis=axis)
    if not symbolic and (np.any(s_true == 0) or np.any(s_pred == 0)):
        raise ValueError("correlation undefined for an identically zero field")
    prod = s_true * s_pred
    corr = cross / (prod.graph.sqrt(prod) if symbolic else np.sqrt(prod))
    if batched:
        corr = corr.mean()
    out = 1.0 - corr
    return out if symbolic else float(out)


def combined_loss(amse, pcc_loss):
    return (amse + pcc_loss) / 2.0
