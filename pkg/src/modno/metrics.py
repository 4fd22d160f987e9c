"""Error metrics."""

import numpy as np

from .exceptions import DegenerateTargetError, ShapeError


def relative_l2(pred, target):
    """``||pred - target|| / ||target||`` for one sample."""
    pred = np.asarray(pred, dtype=np.float64).ravel()
    target = np.asarray(target, dtype=np.float64).ravel()
    if pred.shape != target.shape:
        raise ShapeError(f"prediction length {pred.size} != target length {target.size}")
    denom = np.linalg.norm(target)
    if denom == 0.0:
        raise DegenerateTargetError("target has zero norm")
    return float(np.linalg.norm(pred - target) / denom)


def relative_l2_set(preds, targets):
    """Mean over rows of the per-sample relative L2 error."""
    preds = np.asarray(preds, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if preds.shape != targets.shape:
        raise ShapeError(f"prediction shape {preds.shape} != target shape {targets.shape}")
    denom = np.linalg.norm(targets, axis=1)
    if np.any(denom == 0.0):
        raise DegenerateTargetError("a target row has zero norm")
    return float(np.mean(np.linalg.norm(preds - targets, axis=1) / denom))
