"""Adaptation objectives and their analytic gradients.

Three terms, all computed per batch:

* marginal_loss   -- hinge on the squared feature distance to the frozen
                     source representation; keeps the adapted encoder inside
                     a margin of the source.
* entropy_loss    -- mean Shannon entropy of the softmax predictions.
* memory_term_loss -- confidence term on prototype/feature alignment scores,
                     standardized across the batch.

Each returns (value, gradients...); gradients are exact, not estimated.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    BatchTooSmallError,
    ConfigError,
    DimensionError,
    InputError,
    NumericalFailure,
    StateError,
)
from .numeric import Array, as_matrix


@dataclass
class LossReport:
    """Per-step record of the objective. `total` is whatever the step
    optimized; for the combined method it equals
    l_e + lambda_weight * l_m (+ l_i when that term is enabled)."""

    l_m: float
    l_e: float
    l_i: float
    total: float
    sigma: float
    lambda_weight: float

    def to_dict(self):
        return {
            "l_m": self.l_m,
            "l_e": self.l_e,
            "l_i": self.l_i,
            "total": self.total,
            "sigma": self.sigma,
            "lambda_weight": self.lambda_weight,
        }


def marginal_loss(adapted: Array, source: Array, sigma: float):
    """Margin hinge on squared feature drift.

    value = mean_i max(||a_i - s_i||^2 - sigma, 0). Rows inside the margin
    contribute exactly zero loss and exactly zero gradient; active rows get
    gradient (2/N)(a_i - s_i) w.r.t. the adapted features.
    """
    a = as_matrix(adapted, "adapted")
    s = as_matrix(source, "source")
    if a.shape != s.shape:
        raise DimensionError(
            f"marginal_loss: shapes differ, {a.shape} vs {s.shape}"
        )
    if sigma < 0.0:
        raise ConfigError(f"marginal_loss: sigma must be >= 0, got {sigma}")
    n = a.shape[0]
    diff = a - s
    dist_sq = np.sum(diff * diff, axis=1)
    active = dist_sq > sigma
    value = float(np.sum(np.maximum(dist_sq - sigma, 0.0)) / n)
    grad = np.zeros_like(a)
    if active.any():
        grad[active] = (2.0 / n) * diff[active]
    if not np.isfinite(value):
        raise NumericalFailure("marginal_loss: non-finite value")
    return value, grad


def entropy_loss(probs: Array):
    """Mean Shannon entropy of prediction rows, with its gradient w.r.t. the
    logits that produced them (the fused softmax+entropy backward).

    value = -(1/N) sum_i sum_c p log p, with 0 log 0 = 0.
    dL/dz_ic = -(1/N) p_ic (log p_ic + H_i).
    """
    p = as_matrix(probs, "probs")
    if (p < 0.0).any():
        raise InputError("entropy_loss: probabilities must be nonnegative")
    row_sums = p.sum(axis=1)
    if np.abs(row_sums - 1.0).max() > 1e-6:
        raise InputError(
            "entropy_loss: rows must sum to 1 within 1e-6 "
            f"(worst deviation {np.abs(row_sums - 1.0).max():.3e})"
        )
    n = p.shape[0]
    logp = np.where(p > 0.0, np.log(np.maximum(p, 1e-300)), 0.0)
    row_entropy = -(p * logp).sum(axis=1)
    value = float(row_entropy.mean())
    grad_logits = -(p * (logp + row_entropy[:, None])) / n
    return value, grad_logits


def memory_term_loss(feats: Array, prototypes: dict, pseudo_labels, eps: float = 1e-5):
    """Alignment confidence between features and their pseudo-class prototype.

    Per row: gamma_i = f_i . (v_{y_i} / ||v_{y_i}||), then the batch of
    scalars gamma is standardized (mean/variance over the batch, eps floor)
    and scored with -(1/N) sum_i gamma_i log softmax(gamma)_i.

    Returns (value, grad wrt feats, grad wrt prototypes by class id).
    """
    f = as_matrix(feats, "feats")
    labels = np.asarray(pseudo_labels)
    n, d = f.shape
    if labels.shape != (n,):
        raise DimensionError(
            f"memory_term_loss: labels shape {labels.shape} != ({n},)"
        )
    if n < 2:
        raise BatchTooSmallError(
            "memory_term_loss: batch standardization needs >= 2 rows"
        )
    units = np.empty((n, d))
    norms = np.empty(n)
    for i, lab in enumerate(labels):
        v = prototypes.get(int(lab))
        if v is None:
            raise StateError(f"memory_term_loss: no prototype for class {int(lab)}")
        nv = float(np.linalg.norm(v))
        if nv == 0.0:
            raise StateError(f"memory_term_loss: zero-norm prototype for class {int(lab)}")
        units[i] = v / nv
        norms[i] = nv
    raw = np.sum(f * units, axis=1)

    mu = raw.mean()
    var = raw.var()
    denom = np.sqrt(var + eps)
    g = (raw - mu) / denom

    m = g.max()
    logz = m + np.log(np.exp(g - m).sum())
    soft = np.exp(g - logz)
    value = float(-np.mean(g * (g - logz)))

    # d value / d g, then back through the standardization (same closed form
    # as a 1-feature batch norm), then through the dot products.
    dg = -(2.0 * g - soft * g.sum() - logz) / n
    draw = (n * dg - dg.sum() - g * (dg * g).sum()) / (n * denom)

    grad_feats = draw[:, None] * units
    grad_protos: dict[int, Array] = {}
    for i, lab in enumerate(labels):
        lab = int(lab)
        contrib = draw[i] * (f[i] - units[i] * raw[i]) / norms[i]
        if lab in grad_protos:
            grad_protos[lab] += contrib
        else:
            grad_protos[lab] = contrib.copy()
    if not np.isfinite(value):
        raise NumericalFailure("memory_term_loss: non-finite value")
    return value, grad_feats, grad_protos


def combined_loss(l_e: float, l_m: float, l_i: float, lambda_weight: float,
                  include_li: bool = False) -> float:
    """total = l_e + lambda * l_m, plus l_i when the memory term is on."""
    total = l_e + lambda_weight * l_m
    if include_li:
        total = total + l_i
    return float(total)
