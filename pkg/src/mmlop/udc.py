"""Uniform drift correction for prompted class text features.

The prompted features are split into zero-shot anchor plus residual; the
class-mean residual is the drift shared by every class and is removed before
renormalizing. Everything stays in the graph so training backpropagates
through the correction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .tensor import ShapeError, Tensor


class DegenerateFeatureError(ValueError):
    pass


@dataclass
class DriftReport:
    residuals: Tensor
    mean_residual: Tensor
    centered: Tensor
    corrected: Tensor

    @property
    def drift_magnitude(self) -> float:
        return float(np.linalg.norm(self.mean_residual.data))

    def summary(self) -> dict:
        return {
            "n_classes": int(self.corrected.shape[0]),
            "dim": int(self.corrected.shape[1]),
            "drift_magnitude": self.drift_magnitude,
            "mean_residual": self.mean_residual.data.reshape(-1).tolist(),
            "residual_norms": np.linalg.norm(self.residuals.data, axis=1).tolist(),
        }


def apply_udc(prompted, anchor) -> DriftReport:
    """Remove the mean residual across classes from ``prompted``.

    ``anchor`` (the frozen zero-shot features) is a constant; gradients flow
    only into ``prompted``.
    """
    prompted = tn.as_tensor(prompted)
    anchor = np.asarray(anchor.data if isinstance(anchor, Tensor) else anchor, dtype=np.float64)
    if prompted.data.ndim != 2 or prompted.shape != anchor.shape:
        raise ShapeError(f"apply_udc: prompted {prompted.shape} and anchor {anchor.shape} must be equal (C, d)")
    if prompted.shape[0] == 0:
        raise ValueError("apply_udc: need at least one class")
    residuals = tn.sub(prompted, anchor)
    mean_residual = tn.mean(residuals, axis=0, keepdims=True)
    centered = tn.sub(residuals, mean_residual)
    pre = tn.add(centered, anchor)
    norms = np.linalg.norm(pre.data, axis=1)
    if np.any(norms < 1e-12):
        k = int(np.argmin(norms))
        raise DegenerateFeatureError(f"corrected feature for class {k} has norm {norms[k]:.3e}")
    return DriftReport(residuals, mean_residual, centered, tn.l2_normalize(pre))
