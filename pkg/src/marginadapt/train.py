"""Source-domain supervised training: Adam, cross-entropy, ERM loop."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, DimensionError
from .model import classification_accuracy
from .numeric import Array, as_matrix, softmax_rows


@dataclass
class TrainConfig:
    lr: float = 5e-5
    weight_decay: float = 0.0
    batch_size: int = 32
    epochs: int = 40
    holdout_fraction: float = 0.2
    seed: int = 0

    def validate(self) -> "TrainConfig":
        # lr == 0 is allowed: it is the documented "no update" degenerate case
        if self.lr < 0.0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if self.weight_decay < 0.0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if not 0.0 < self.holdout_fraction < 1.0:
            raise ConfigError(
                f"holdout_fraction must lie in (0, 1), got {self.holdout_fraction}"
            )
        return self


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


class Adam:
    """Adam with bias correction over named parameter arrays.

    Parameters are (name, array) pairs updated in place. A parameter missing
    from the gradient dict is left untouched for that step; a zero gradient
    on fresh moments gives an exactly zero update. Either way the step
    counter advances. First step with constant gradient g moves by
    lr * g / (|g| + eps), i.e. ~lr per coordinate."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8,
                 weight_decay=0.0):
        if lr < 0.0:
            raise ConfigError(f"Adam lr must be >= 0, got {lr}")
        self.params = list(params)
        names = [n for n, _ in self.params]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate parameter names: {sorted(names)}")
        self.lr = lr
        self.weight_decay = weight_decay
        self.state = AdamState(
            m={n: np.zeros_like(p) for n, p in self.params},
            v={n: np.zeros_like(p) for n, p in self.params},
            beta1=beta1,
            beta2=beta2,
            eps=eps,
        )

    def step(self, grads: dict) -> None:
        st = self.state
        st.t += 1
        c1 = 1.0 - st.beta1 ** st.t
        c2 = 1.0 - st.beta2 ** st.t
        for name, p in self.params:
            g = grads.get(name)
            if g is None:
                continue  # moments stay zero, update would be exactly zero
            g = np.asarray(g, dtype=np.float64)
            if g.shape != p.shape:
                raise DimensionError(
                    f"Adam: gradient for {name} has shape {g.shape}, param {p.shape}"
                )
            if self.weight_decay:
                g = g + self.weight_decay * p
            m = st.m[name]
            v = st.v[name]
            m *= st.beta1
            m += (1.0 - st.beta1) * g
            v *= st.beta2
            v += (1.0 - st.beta2) * (g * g)
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + st.eps)


def cross_entropy_loss(probs: Array, labels):
    """Mean negative log-likelihood of the labeled class, with the fused
    gradient w.r.t. logits: (p - onehot) / N."""
    p = as_matrix(probs, "probs")
    y = np.asarray(labels)
    n, c = p.shape
    if y.shape != (n,):
        raise DimensionError(f"cross_entropy_loss: labels shape {y.shape} != ({n},)")
    if y.size and (y.min() < 0 or y.max() >= c):
        raise DataError(f"cross_entropy_loss: labels outside [0, {c})")
    picked = p[np.arange(n), y]
    value = float(-np.mean(np.log(np.maximum(picked, 1e-300))))
    grad_logits = p.copy()
    grad_logits[np.arange(n), y] -= 1.0
    grad_logits /= n
    return value, grad_logits


@dataclass
class TrainReport:
    val_accuracy: float
    best_epoch: int
    loss_history: list = field(default_factory=list)
    val_history: list = field(default_factory=list)


def _pool(datasets):
    feats = np.vstack([d.features for d in datasets])
    labels = np.concatenate([d.labels for d in datasets])
    return feats, labels


def train_source_erm(encoder, classifier, sources, cfg: TrainConfig) -> TrainReport:
    """Pooled empirical-risk training over the source domains.

    Each domain is split into train/holdout; training minimizes softmax
    cross-entropy with Adam; the parameters kept at the end are from the
    epoch with the best holdout accuracy (ties keep the earlier epoch).
    epochs=0 leaves the model exactly at its initialization.
    """
    cfg.validate()
    from .data import split_holdout

    if not sources:
        raise DataError("train_source_erm: no source domains given")
    trains, vals = [], []
    for k, ds in enumerate(sources):
        tr, va = split_holdout(ds, cfg.holdout_fraction, seed=cfg.seed + 1000 * k)
        trains.append(tr)
        vals.append(va)
    x_train, y_train = _pool(trains)
    x_val, y_val = _pool(vals)

    params = encoder.parameters() + classifier.parameters()
    opt = Adam(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)

    def snapshot():
        return [(n, a.copy()) for n, a in encoder.state_arrays() + classifier.parameters()]

    def restore(snap):
        live = dict(encoder.state_arrays() + classifier.parameters())
        for name, arr in snap:
            live[name][...] = arr

    best_acc = classification_accuracy(encoder, classifier, x_val, y_val)
    best_snap = snapshot()
    best_epoch = -1
    loss_history = []
    val_history = []

    n = x_train.shape[0]
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            if idx.shape[0] < 2 and encoder.has_norm_layers:
                continue  # a single row cannot feed batch statistics
            xb, yb = x_train[idx], y_train[idx]
            feats = encoder.encode(xb, mode="train")
            logits = classifier.logits(feats)
            probs = softmax_rows(logits)
            loss, g_logits = cross_entropy_loss(probs, yb)
            gz, cgrads = classifier.backward(feats, g_logits)
            _, egrads = encoder.backward(gz)
            encoder.update_running_stats()
            grads = {**egrads, **cgrads}
            opt.step(grads)
            loss_history.append(loss)
        acc = classification_accuracy(encoder, classifier, x_val, y_val)
        val_history.append(acc)
        if acc > best_acc:
            best_acc = acc
            best_snap = snapshot()
            best_epoch = epoch
    restore(best_snap)
    return TrainReport(
        val_accuracy=best_acc,
        best_epoch=best_epoch,
        loss_history=loss_history,
        val_history=val_history,
    )
