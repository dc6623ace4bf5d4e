"""Dense float64 array ops with hand-written gradients.

Plain numpy throughout; no graphs, no autodiff. Layers that need state for
their backward pass cache it explicitly. Every public op checks that its
output is finite and aborts with NumericalFailure otherwise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BatchTooSmallError,
    ConfigError,
    DimensionError,
    NumericalFailure,
    StateError,
)

Array = np.ndarray


def as_matrix(x, name: str = "array") -> Array:
    """Coerce to a 2-D float64 array; reject wrong rank and non-finite entries."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise DimensionError(f"{name}: expected a 2-D array, got shape {a.shape}")
    if a.size and not np.isfinite(a).all():
        raise NumericalFailure(f"{name}: contains NaN or Inf")
    return a


def as_vector(x, name: str = "array") -> Array:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 1:
        raise DimensionError(f"{name}: expected a 1-D array, got shape {a.shape}")
    if a.size and not np.isfinite(a).all():
        raise NumericalFailure(f"{name}: contains NaN or Inf")
    return a


def _finite(out: Array, op: str) -> Array:
    if not np.isfinite(out).all():
        raise NumericalFailure(f"{op}: produced non-finite values")
    return out


# ---------------------------------------------------------------------------
# linear / relu / softmax


def linear_forward(x: Array, w: Array, b: Array) -> Array:
    """x @ w + b for a batch of rows."""
    x = as_matrix(x, "x")
    w = as_matrix(w, "w")
    b = as_vector(b, "b")
    if x.shape[1] != w.shape[0]:
        raise DimensionError(
            f"linear_forward: x has {x.shape[1]} features but w expects {w.shape[0]}"
        )
    if b.shape[0] != w.shape[1]:
        raise DimensionError(
            f"linear_forward: bias length {b.shape[0]} != output width {w.shape[1]}"
        )
    return _finite(x @ w + b, "linear_forward")


def linear_backward(x: Array, w: Array, upstream: Array):
    """Gradients of sum(upstream * (x @ w + b)) w.r.t. x, w, b."""
    x = as_matrix(x, "x")
    w = as_matrix(w, "w")
    g = as_matrix(upstream, "upstream")
    if g.shape != (x.shape[0], w.shape[1]):
        raise DimensionError(
            f"linear_backward: upstream shape {g.shape} != {(x.shape[0], w.shape[1])}"
        )
    gx = g @ w.T
    gw = x.T @ g
    gb = g.sum(axis=0)
    return _finite(gx, "linear_backward"), _finite(gw, "linear_backward"), _finite(
        gb, "linear_backward"
    )


def relu_forward(x: Array) -> Array:
    return np.maximum(as_matrix(x, "x"), 0.0)


def relu_backward(x: Array, upstream: Array) -> Array:
    """Subgradient 0 at exactly 0."""
    x = as_matrix(x, "x")
    g = as_matrix(upstream, "upstream")
    if g.shape != x.shape:
        raise DimensionError(
            f"relu_backward: upstream shape {g.shape} != input shape {x.shape}"
        )
    return np.where(x > 0.0, g, 0.0)


def softmax_rows(z: Array) -> Array:
    """Row-wise softmax with max subtraction for overflow safety."""
    z = as_matrix(z, "logits")
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return _finite(e / e.sum(axis=1, keepdims=True), "softmax_rows")


# ---------------------------------------------------------------------------
# batch normalization


@dataclass
class _NormCache:
    mode: str
    x_hat: Array
    mean: Array  # batch mean (train) or running mean (eval)
    var: Array  # batch variance (train) or running variance (eval)
    m: int


@dataclass
class NormLayerState:
    """Per-feature normalization state: affine params, running stats, cache."""

    gamma: Array
    beta: Array
    eps: float = 1e-5
    momentum: float = 0.1
    running_mean: Array = field(default=None)
    running_var: Array = field(default=None)
    cache: _NormCache | None = None

    def __post_init__(self):
        self.gamma = as_vector(self.gamma, "gamma")
        self.beta = as_vector(self.beta, "beta")
        if self.gamma.shape != self.beta.shape:
            raise DimensionError("gamma and beta must have the same length")
        if self.eps < 0.0:
            raise ConfigError(f"eps must be >= 0, got {self.eps}")
        if not 0.0 <= self.momentum <= 1.0:
            raise ConfigError(f"momentum must lie in [0, 1], got {self.momentum}")
        if self.running_mean is None:
            self.running_mean = np.zeros_like(self.gamma)
        else:
            self.running_mean = as_vector(self.running_mean, "running_mean")
        if self.running_var is None:
            self.running_var = np.ones_like(self.gamma)
        else:
            self.running_var = as_vector(self.running_var, "running_var")
            if (self.running_var < 0.0).any():
                raise ConfigError("running_var must be nonnegative")

    @classmethod
    def create(cls, dim: int, eps: float = 1e-5, momentum: float = 0.1):
        return cls(gamma=np.ones(dim), beta=np.zeros(dim), eps=eps, momentum=momentum)

    @property
    def dim(self) -> int:
        return self.gamma.shape[0]

    def copy(self) -> "NormLayerState":
        """Deep copy of params and running stats; the cache is not carried over."""
        return NormLayerState(
            gamma=self.gamma.copy(),
            beta=self.beta.copy(),
            eps=self.eps,
            momentum=self.momentum,
            running_mean=self.running_mean.copy(),
            running_var=self.running_var.copy(),
        )


def batchnorm_forward(x: Array, state: NormLayerState, mode: str = "train") -> Array:
    """Normalize columns and apply the affine map.

    Train mode uses biased batch statistics and stores the backward cache;
    eval mode uses the running statistics. Running statistics are never
    updated here; call update_running_stats explicitly.
    """
    x = as_matrix(x, "x")
    if x.shape[1] != state.dim:
        raise DimensionError(
            f"batchnorm_forward: {x.shape[1]} columns but state has {state.dim}"
        )
    if mode == "train":
        m = x.shape[0]
        if m < 2:
            raise BatchTooSmallError(
                f"batchnorm_forward: train mode needs >= 2 rows, got {m}"
            )
        mu = x.mean(axis=0)
        var = x.var(axis=0)
        x_hat = (x - mu) / np.sqrt(var + state.eps)
        state.cache = _NormCache(mode="train", x_hat=x_hat, mean=mu, var=var, m=m)
    elif mode == "eval":
        x_hat = (x - state.running_mean) / np.sqrt(state.running_var + state.eps)
        state.cache = _NormCache(
            mode="eval",
            x_hat=x_hat,
            mean=state.running_mean,
            var=state.running_var,
            m=x.shape[0],
        )
    else:
        raise ConfigError(f"batchnorm_forward: unknown mode {mode!r}")
    return _finite(state.gamma * x_hat + state.beta, "batchnorm_forward")


def update_running_stats(state: NormLayerState) -> None:
    """Fold the cached train-mode batch statistics into the running stats.

    Exponential moving average with the state's momentum. Kept separate from
    the forward pass so that inference-time adaptation can use batch
    statistics without silently drifting the stored ones.
    """
    if state.cache is None or state.cache.mode != "train":
        raise StateError("update_running_stats: no train-mode forward cached")
    c = state.cache
    mom = state.momentum
    # in-place so frozen (read-only) stats raise instead of silently rebinding
    state.running_mean *= 1.0 - mom
    state.running_mean += mom * c.mean
    state.running_var *= 1.0 - mom
    state.running_var += mom * c.var


def batchnorm_backward(state: NormLayerState, upstream: Array):
    """Closed-form gradients through the cached normalization.

    For a train-mode cache with m rows:
      gx = (m*g - sum(g) - x_hat * sum(g*x_hat)) / (m*sqrt(var+eps))
    with g = upstream*gamma. Eval-mode caches reduce to the affine shortcut
    gx = g / sqrt(running_var + eps). ggamma/gbeta are the usual reductions.
    """
    if state.cache is None:
        raise StateError("batchnorm_backward: no forward cache present")
    c = state.cache
    g = as_matrix(upstream, "upstream")
    if g.shape != c.x_hat.shape:
        raise DimensionError(
            f"batchnorm_backward: upstream shape {g.shape} != cached {c.x_hat.shape}"
        )
    gxhat = g * state.gamma
    denom = np.sqrt(c.var + state.eps)
    if c.mode == "train":
        gx = (
            c.m * gxhat
            - gxhat.sum(axis=0)
            - c.x_hat * (gxhat * c.x_hat).sum(axis=0)
        ) / (c.m * denom)
    else:
        gx = gxhat / denom
    ggamma = (g * c.x_hat).sum(axis=0)
    gbeta = g.sum(axis=0)
    return (
        _finite(gx, "batchnorm_backward"),
        _finite(ggamma, "batchnorm_backward"),
        _finite(gbeta, "batchnorm_backward"),
    )


def frobenius_distance_sq(a: Array, b: Array) -> float:
    """Squared Frobenius distance ||a - b||_F^2."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape != b.shape:
        raise DimensionError(
            f"frobenius_distance_sq: shapes differ, {a.shape} vs {b.shape}"
        )
    d = a - b
    out = float(np.sum(d * d))
    if not np.isfinite(out):
        raise NumericalFailure("frobenius_distance_sq: produced non-finite value")
    return out
