"""Encoder/classifier models and the frozen-source / adapted pair.

The encoder is a small MLP (linear -> optional norm -> relu per hidden layer,
plain linear output). Gradients are computed analytically from per-layer
caches. Parameters are exposed as (name, array) pairs and updated in place,
so an optimizer can hold references.
"""

from __future__ import annotations

import hashlib
import json
import os

import numpy as np

from .errors import ConfigError, DimensionError, SchemaError
from .numeric import (
    Array,
    NormLayerState,
    as_matrix,
    batchnorm_backward,
    batchnorm_forward,
    linear_backward,
    linear_forward,
    relu_backward,
    relu_forward,
    softmax_rows,
)

CHECKPOINT_VERSION = 1


class MlpEncoder:
    """Feature extractor: stack of linear(+norm)+relu layers, linear head.

    layer_dims = [input, hidden..., feature]. Weights and biases start
    uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)].
    """

    def __init__(self, layer_dims, weights, biases, norms, eps=1e-5, momentum=0.1):
        if len(layer_dims) < 2:
            raise ConfigError("layer_dims needs at least input and output sizes")
        self.layer_dims = [int(d) for d in layer_dims]
        self.weights = weights
        self.biases = biases
        self.norms = norms  # one entry per hidden layer, None when absent
        self.eps = eps
        self.momentum = momentum
        self._cache = None
        n_layers = len(self.layer_dims) - 1
        if len(weights) != n_layers or len(biases) != n_layers:
            raise DimensionError("weights/biases do not match layer_dims")
        if len(norms) != n_layers - 1:
            raise DimensionError("norms must have one slot per hidden layer")

    @classmethod
    def create(cls, layer_dims, use_norm=False, seed=0, eps=1e-5, momentum=0.1):
        if any(int(d) < 1 for d in layer_dims):
            raise ConfigError(f"layer sizes must be positive, got {layer_dims}")
        rng = np.random.default_rng(seed)
        weights, biases = [], []
        for din, dout in zip(layer_dims[:-1], layer_dims[1:]):
            bound = 1.0 / np.sqrt(din)
            weights.append(rng.uniform(-bound, bound, size=(din, dout)))
            biases.append(rng.uniform(-bound, bound, size=dout))
        norms = [
            NormLayerState.create(d, eps=eps, momentum=momentum) if use_norm else None
            for d in layer_dims[1:-1]
        ]
        return cls(layer_dims, weights, biases, norms, eps=eps, momentum=momentum)

    # -- structure ---------------------------------------------------------

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def feature_dim(self) -> int:
        return self.layer_dims[-1]

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def has_norm_layers(self) -> bool:
        return any(n is not None for n in self.norms)

    def parameters(self):
        """Learnable (name, array) pairs in a fixed order."""
        out = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out.append((f"enc.{i}.w", w))
            out.append((f"enc.{i}.b", b))
            if i < len(self.norms) and self.norms[i] is not None:
                out.append((f"enc.{i}.gamma", self.norms[i].gamma))
                out.append((f"enc.{i}.beta", self.norms[i].beta))
        return out

    def norm_parameters(self):
        return [(n, p) for n, p in self.parameters() if n.endswith((".gamma", ".beta"))]

    def param_count(self) -> int:
        return sum(p.size for _, p in self.parameters())

    def state_arrays(self):
        """All persistent arrays, learnable or not (for copies/fingerprints)."""
        out = list(self.parameters())
        for i, norm in enumerate(self.norms):
            if norm is not None:
                out.append((f"enc.{i}.running_mean", norm.running_mean))
                out.append((f"enc.{i}.running_var", norm.running_var))
        return out

    def copy(self) -> "MlpEncoder":
        enc = MlpEncoder(
            list(self.layer_dims),
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            [n.copy() if n is not None else None for n in self.norms],
            eps=self.eps,
            momentum=self.momentum,
        )
        return enc

    def reinitialized(self, seed: int) -> "MlpEncoder":
        """Fresh random instance with the same architecture."""
        return MlpEncoder.create(
            list(self.layer_dims),
            use_norm=self.has_norm_layers,
            seed=seed,
            eps=self.eps,
            momentum=self.momentum,
        )

    # -- forward / backward --------------------------------------------------

    def encode(self, x, mode: str = "train", retain_cache: bool | None = None):
        """Map inputs to features.

        mode selects which statistics norm layers use ("train": batch,
        "eval": running). The layer cache needed by backward() is kept when
        retain_cache is true (default: only in train mode).
        """
        if mode not in ("train", "eval"):
            raise ConfigError(f"encode: unknown mode {mode!r}")
        if retain_cache is None:
            retain_cache = mode == "train"
        h = as_matrix(x, "x")
        if h.shape[1] != self.input_dim:
            raise DimensionError(
                f"encode: input has {h.shape[1]} features, expected {self.input_dim}"
            )
        caches = []
        for i in range(self.n_layers):
            pre = linear_forward(h, self.weights[i], self.biases[i])
            if i == self.n_layers - 1:
                caches.append({"x": h})
                h = pre
            else:
                a = pre
                if self.norms[i] is not None:
                    a = batchnorm_forward(pre, self.norms[i], mode=mode)
                caches.append({"x": h, "act_in": a})
                h = relu_forward(a)
        self._cache = caches if retain_cache else None
        return h

    def backward(self, upstream):
        """Gradients of sum(upstream * features) w.r.t. input and parameters.

        Requires a cached forward (encode with retain_cache). The cache is
        left intact, so several upstreams can be pushed through one forward.
        """
        if self._cache is None:
            from .errors import StateError

            raise StateError("backward: call encode with retain_cache first")
        g = as_matrix(upstream, "upstream")
        grads = {}
        for i in reversed(range(self.n_layers)):
            cache = self._cache[i]
            if i < self.n_layers - 1:
                g = relu_backward(cache["act_in"], g)
                if self.norms[i] is not None:
                    g, ggamma, gbeta = batchnorm_backward(self.norms[i], g)
                    grads[f"enc.{i}.gamma"] = ggamma
                    grads[f"enc.{i}.beta"] = gbeta
            g, gw, gb = linear_backward(cache["x"], self.weights[i], g)
            grads[f"enc.{i}.w"] = gw
            grads[f"enc.{i}.b"] = gb
        return g, grads

    def update_running_stats(self):
        from .numeric import update_running_stats

        for norm in self.norms:
            if norm is not None:
                update_running_stats(norm)


class LinearClassifier:
    """Logit head: logits = z @ omega + bias. Columns of omega act as class
    prototypes, which is what the memory bank refreshes."""

    def __init__(self, omega, bias):
        self.omega = as_matrix(omega, "omega")
        self.bias = None if bias is None else np.asarray(bias, dtype=np.float64)
        if self.bias is not None and self.bias.shape != (self.omega.shape[1],):
            raise DimensionError("bias length must equal the number of classes")

    @classmethod
    def create(cls, feature_dim, num_classes, seed=0, with_bias=True):
        if feature_dim < 1 or num_classes < 2:
            raise ConfigError("need feature_dim >= 1 and num_classes >= 2")
        rng = np.random.default_rng(seed)
        bound = 1.0 / np.sqrt(feature_dim)
        omega = rng.uniform(-bound, bound, size=(feature_dim, num_classes))
        bias = rng.uniform(-bound, bound, size=num_classes) if with_bias else None
        return cls(omega, bias)

    @property
    def num_classes(self) -> int:
        return self.omega.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.omega.shape[0]

    def logits(self, z):
        z = as_matrix(z, "features")
        if z.shape[1] != self.feature_dim:
            raise DimensionError(
                f"logits: features have width {z.shape[1]}, expected {self.feature_dim}"
            )
        out = z @ self.omega
        if self.bias is not None:
            out = out + self.bias
        return out

    def backward(self, z, upstream):
        """Gradients of sum(upstream * logits) w.r.t. features and params."""
        gz, gw, gb = linear_backward(
            z, self.omega, upstream
        )
        grads = {"clf.w": gw}
        if self.bias is not None:
            grads["clf.b"] = gb
        return gz, grads

    def parameters(self):
        out = [("clf.w", self.omega)]
        if self.bias is not None:
            out.append(("clf.b", self.bias))
        return out

    def param_count(self) -> int:
        return sum(p.size for _, p in self.parameters())

    def copy(self) -> "LinearClassifier":
        return LinearClassifier(
            self.omega.copy(), None if self.bias is None else self.bias.copy()
        )


class ModelPair:
    """Frozen source model next to its learnable adapted copy.

    The source arrays are marked read-only; any in-place write raises. The
    adapted halves start as deep copies and drift under adaptation.
    """

    def __init__(self, source_encoder, source_classifier, adapted_encoder, adapted_classifier):
        self.source_encoder = source_encoder
        self.source_classifier = source_classifier
        self.adapted_encoder = adapted_encoder
        self.adapted_classifier = adapted_classifier
        for _, arr in self.source_encoder.state_arrays():
            arr.flags.writeable = False
        for _, arr in self.source_classifier.parameters():
            arr.flags.writeable = False

    def parameters(self):
        return self.adapted_encoder.parameters() + self.adapted_classifier.parameters()

    def source_fingerprint(self) -> str:
        return _fingerprint(
            self.source_encoder.state_arrays() + self.source_classifier.parameters()
        )

    def adapted_fingerprint(self) -> str:
        return _fingerprint(
            self.adapted_encoder.state_arrays() + self.adapted_classifier.parameters()
        )

    def predict_probs(self, x, use_batch_stats: bool = False):
        mode = "train" if use_batch_stats else "eval"
        feats = self.adapted_encoder.encode(x, mode=mode, retain_cache=False)
        return softmax_rows(self.adapted_classifier.logits(feats))


def clone_for_adaptation(encoder: MlpEncoder, classifier: LinearClassifier) -> ModelPair:
    """Freeze the given model as the source and clone a learnable copy."""
    return ModelPair(encoder, classifier, encoder.copy(), classifier.copy())


def _fingerprint(named_arrays) -> str:
    h = hashlib.sha256()
    for name, arr in named_arrays:
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr, dtype=np.float64).tobytes())
    return h.hexdigest()


def model_fingerprint(encoder: MlpEncoder, classifier: LinearClassifier | None = None) -> str:
    arrays = encoder.state_arrays()
    if classifier is not None:
        arrays = arrays + classifier.parameters()
    return _fingerprint(arrays)


def classification_accuracy(encoder, classifier, features, labels, use_batch_stats=False):
    """Fraction of argmax predictions matching labels."""
    mode = "train" if use_batch_stats else "eval"
    feats = encoder.encode(features, mode=mode, retain_cache=False)
    preds = np.argmax(classifier.logits(feats), axis=1)
    return float(np.mean(preds == np.asarray(labels)))


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, encoder: MlpEncoder, classifier: LinearClassifier, seed=None):
    """Write model state as JSON. repr-based float serialization round-trips
    bit-exactly, so save -> load -> save is byte-stable."""
    norms = []
    for norm in encoder.norms:
        if norm is None:
            norms.append(None)
        else:
            norms.append(
                {
                    "gamma": norm.gamma.tolist(),
                    "beta": norm.beta.tolist(),
                    "running_mean": norm.running_mean.tolist(),
                    "running_var": norm.running_var.tolist(),
                }
            )
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "seed": seed,
        "encoder": {
            "layer_dims": encoder.layer_dims,
            "eps": encoder.eps,
            "momentum": encoder.momentum,
            "weights": [w.tolist() for w in encoder.weights],
            "biases": [b.tolist() for b in encoder.biases],
            "norms": norms,
        },
        "classifier": {
            "omega": classifier.omega.tolist(),
            "bias": None if classifier.bias is None else classifier.bias.tolist(),
        },
    }
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)
    return path


def load_checkpoint(path):
    """Read a checkpoint back into (encoder, classifier, meta)."""
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as e:
            raise SchemaError(f"checkpoint {path}: not valid JSON ({e})") from e
    version = doc.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise SchemaError(
            f"checkpoint {path}: format_version {version!r} not supported"
        )
    try:
        enc_doc = doc["encoder"]
        clf_doc = doc["classifier"]
        norms = []
        for entry in enc_doc["norms"]:
            if entry is None:
                norms.append(None)
            else:
                norms.append(
                    NormLayerState(
                        gamma=np.array(entry["gamma"], dtype=np.float64),
                        beta=np.array(entry["beta"], dtype=np.float64),
                        eps=enc_doc["eps"],
                        momentum=enc_doc["momentum"],
                        running_mean=np.array(entry["running_mean"], dtype=np.float64),
                        running_var=np.array(entry["running_var"], dtype=np.float64),
                    )
                )
        encoder = MlpEncoder(
            enc_doc["layer_dims"],
            [np.array(w, dtype=np.float64) for w in enc_doc["weights"]],
            [np.array(b, dtype=np.float64) for b in enc_doc["biases"]],
            norms,
            eps=enc_doc["eps"],
            momentum=enc_doc["momentum"],
        )
        bias = clf_doc["bias"]
        classifier = LinearClassifier(
            np.array(clf_doc["omega"], dtype=np.float64),
            None if bias is None else np.array(bias, dtype=np.float64),
        )
    except (KeyError, TypeError) as e:
        raise SchemaError(f"checkpoint {path}: missing or malformed field ({e})") from e
    meta = {"seed": doc.get("seed"), "format_version": version}
    return encoder, classifier, meta
