"""Training objectives: cross-entropy plus the self-regulating consistency terms.

Batched inputs are averaged over their leading axis. The zero-shot side of
every consistency term is converted to a constant, so no gradient reaches it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .tensor import ShapeError, Tensor

KL_VARIANTS = ("symmetric", "asymmetric")


class NonFiniteLossError(FloatingPointError):
    def __init__(self, component: str, value):
        super().__init__(f"non-finite loss component {component}: {value}")
        self.component = component


def _const(x) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)


def cross_entropy(f_p, class_feats, labels, tau: float) -> Tensor:
    """Mean of -log softmax(cos(f_p, g_k) / tau)[label] over the batch."""
    f_p = tn.as_tensor(f_p)
    class_feats = tn.as_tensor(class_feats)
    single = f_p.data.ndim == 1
    if single:
        f_p = tn.reshape(f_p, (1, -1))
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n_classes = class_feats.shape[0]
    if labels.shape[0] != f_p.shape[0]:
        raise ShapeError(f"cross_entropy: {labels.shape[0]} labels for batch of {f_p.shape[0]}")
    if np.any(labels < 0) or np.any(labels >= n_classes):
        raise ValueError(f"cross_entropy: labels must lie in [0, {n_classes}), got {labels.tolist()}")
    probs = tn.softmax(tn.matmul(f_p, tn.transpose(class_feats)), tau)
    picked = tn.take(probs, (np.arange(labels.shape[0]), labels))
    return tn.scale(tn.mean(tn.log(picked)), -1.0)


def scl_feature_l1(a, b) -> Tensor:
    """||a - b||_1 with ``b`` held constant; batch rows are averaged."""
    a = tn.as_tensor(a)
    b = _const(b)
    if a.shape != b.shape:
        raise ShapeError(f"scl_feature_l1: shapes {a.shape} and {b.shape} differ")
    d = tn.l1_distance(a, b)
    return d if a.data.ndim == 1 else tn.mean(d)


def kl_divergence(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Plain numpy KL(x || y) along the last axis with 0 * ln 0 = 0."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(x > 0, x * (np.log(x) - np.log(y)), 0.0)
    return terms.sum(axis=-1)


def scl_logits(p_logits, q_logits, tau: float, variant: str = "symmetric") -> Tensor:
    """KL consistency between prompted and zero-shot similarity distributions.

    Both similarity vectors are softmax-normalized with ``tau``; the zero-shot
    side ``q_logits`` is constant. ``symmetric`` averages the two KL directions,
    ``asymmetric`` is KL(P || Q).
    """
    if not tau > 0:
        raise ValueError(f"scl_logits: temperature must be positive, got {tau}")
    if variant not in KL_VARIANTS:
        raise ValueError(f"scl_logits: unknown variant {variant!r}")
    p_logits = tn.as_tensor(p_logits)
    q = _const(q_logits)
    if p_logits.shape != q.shape:
        raise ShapeError(f"scl_logits: shapes {p_logits.shape} and {q.shape} differ")
    P = tn.softmax(p_logits, tau)
    Q = tn.softmax(q, tau).data
    with np.errstate(divide="ignore"):
        log_q = np.log(Q)
    log_p = tn.log(P)
    # Q entries that underflow to 0 contribute 0 to KL(Q || P)
    q_mask = (Q > 0).astype(np.float64)
    log_q_safe = np.where(Q > 0, log_q, 0.0)
    kl_pq = tn.sum(tn.mul(P, tn.sub(log_p, log_q_safe)), axis=-1)
    if variant == "asymmetric":
        per_row = kl_pq
    else:
        kl_qp = tn.sum(tn.mul(Q * q_mask, tn.sub(log_q_safe, log_p)), axis=-1)
        per_row = tn.scale(tn.add(kl_pq, kl_qp), 0.5)
    return per_row if per_row.data.ndim == 0 else tn.mean(per_row)


@dataclass
class LossBreakdown:
    ce: float
    scl_text: float
    scl_image: float
    scl_logits: float
    total: Tensor
    lambda1: float
    lambda2: float

    @property
    def total_value(self) -> float:
        return float(self.total.data)

    def as_row(self) -> dict[str, float]:
        return {
            "ce": self.ce,
            "scl_text": self.scl_text,
            "scl_image": self.scl_image,
            "scl_logits": self.scl_logits,
            "total": self.total_value,
        }


def total_loss(ce, scl_text, scl_image, scl_logits_value, lambda1: float, lambda2: float) -> LossBreakdown:
    """ce + lambda1 * scl_text + lambda2 * scl_image + scl_logits.

    Parts are raw (unweighted); each weight is applied here exactly once.
    """
    if lambda1 < 0 or lambda2 < 0:
        raise ValueError(f"loss weights must be nonnegative, got lambda1={lambda1}, lambda2={lambda2}")
    parts = [tn.as_tensor(p) for p in (ce, scl_text, scl_image, scl_logits_value)]
    for name, p in zip(("ce", "scl_text", "scl_image", "scl_logits"), parts):
        if not np.all(np.isfinite(p.data)):
            raise NonFiniteLossError(name, p.data)
    total = tn.add(tn.add(tn.add(parts[0], tn.scale(parts[1], lambda1)), tn.scale(parts[2], lambda2)), parts[3])
    vals = [float(p.data) for p in parts]
    return LossBreakdown(*vals, total=total, lambda1=float(lambda1), lambda2=float(lambda2))
