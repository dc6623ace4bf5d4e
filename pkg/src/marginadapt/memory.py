"""Per-class support memory and prototype refresh for the classifier.

The bank keeps the most confident (lowest entropy) feature vectors seen per
pseudo-class, averages the best K into a prototype, and overwrites the
matching classifier column with it. All tie-breaks are deterministic:
pseudo-labels break toward the lowest class index, eviction prefers the
oldest record among equals, selection orders by (entropy, arrival step).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from .numeric import Array, as_matrix


@dataclass
class SupportRecord:
    feature: Array
    entropy: float
    step: int


class MemoryBank:
    def __init__(self, num_classes: int, feature_dim: int,
                 capacity_per_class: int = 64, top_k: int = 20,
                 prototypes: dict | None = None):
        if num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if feature_dim < 1:
            raise ConfigError("feature_dim must be >= 1")
        if capacity_per_class < 1:
            raise ConfigError("capacity_per_class must be >= 1")
        if top_k < 1:
            raise ConfigError("top_k must be >= 1")
        self.num_classes = num_classes
        self.feature_dim = feature_dim
        self.capacity_per_class = capacity_per_class
        self.top_k = top_k
        self.supports: dict[int, list[SupportRecord]] = {
            j: [] for j in range(num_classes)
        }
        if prototypes is None:
            prototypes = {
                j: np.zeros(feature_dim) for j in range(num_classes)
            }
        self.prototypes = prototypes
        self._next_step = 0

    def selected(self, class_id: int) -> list[SupportRecord]:
        """Top-K lowest-entropy supports of a class, (entropy, step) order."""
        recs = sorted(self.supports[class_id], key=lambda r: (r.entropy, r.step))
        return recs[: self.top_k]

    def support_counts(self) -> dict[int, int]:
        return {j: len(v) for j, v in self.supports.items()}

    def snapshot(self) -> dict:
        """Serializable view (counts, entropies, prototypes)."""
        return {
            "support_counts": {str(j): len(v) for j, v in self.supports.items()},
            "entropies": {
                str(j): [r.entropy for r in v] for j, v in self.supports.items()
            },
            "prototypes": {str(j): v.tolist() for j, v in self.prototypes.items()},
        }


def init_from_classifier(classifier, capacity_per_class: int = 64,
                         top_k: int = 20) -> MemoryBank:
    """Empty bank whose prototypes start as the classifier's weight columns."""
    protos = {
        j: classifier.omega[:, j].copy() for j in range(classifier.num_classes)
    }
    return MemoryBank(
        num_classes=classifier.num_classes,
        feature_dim=classifier.feature_dim,
        capacity_per_class=capacity_per_class,
        top_k=top_k,
        prototypes=protos,
    )


def pseudo_label(probs: Array):
    """Argmax labels and Shannon entropies per row. Ties pick the lowest
    class index (np.argmax convention)."""
    p = as_matrix(probs, "probs")
    labels = np.argmax(p, axis=1)
    logp = np.where(p > 0.0, np.log(np.maximum(p, 1e-300)), 0.0)
    entropies = -(p * logp).sum(axis=1)
    return labels, entropies


def insert_and_select(bank: MemoryBank, features: Array, labels, entropies) -> MemoryBank:
    """Insert one record per row under its pseudo-class, evicting the worst
    (highest entropy, oldest first among ties) once a class is full."""
    f = as_matrix(features, "features")
    labels = np.asarray(labels)
    entropies = np.asarray(entropies, dtype=np.float64)
    if f.shape[1] != bank.feature_dim:
        raise DimensionError(
            f"insert_and_select: feature width {f.shape[1]} != bank dim {bank.feature_dim}"
        )
    if labels.shape[0] != f.shape[0] or entropies.shape[0] != f.shape[0]:
        raise DimensionError("insert_and_select: rows, labels, entropies must align")
    for i in range(f.shape[0]):
        lab = int(labels[i])
        if not 0 <= lab < bank.num_classes:
            raise DimensionError(f"insert_and_select: label {lab} out of range")
        rec = SupportRecord(
            feature=f[i].copy(), entropy=float(entropies[i]), step=bank._next_step
        )
        bank._next_step += 1
        bucket = bank.supports[lab]
        bucket.append(rec)
        if len(bucket) > bank.capacity_per_class:
            # evict the highest entropy; among equals the oldest (lowest step)
            worst = max(range(len(bucket)), key=lambda k: (bucket[k].entropy, -bucket[k].step))
            bucket.pop(worst)
    return bank


def compute_prototypes(bank: MemoryBank) -> dict:
    """Mean of each class's selected supports. Classes without supports keep
    their current prototype untouched."""
    for j in range(bank.num_classes):
        sel = bank.selected(j)
        if sel:
            bank.prototypes[j] = np.mean([r.feature for r in sel], axis=0)
    return bank.prototypes


def refresh_classifier(bank: MemoryBank, classifier):
    """Overwrite classifier columns with prototypes for every class that has
    at least one support; those classes also get their bias zeroed so the
    logit is a pure prototype dot product. Untouched classes keep their
    weights."""
    if classifier.feature_dim != bank.feature_dim:
        raise DimensionError("refresh_classifier: feature dims differ")
    if classifier.num_classes != bank.num_classes:
        raise DimensionError("refresh_classifier: class counts differ")
    for j in range(bank.num_classes):
        if bank.supports[j]:
            classifier.omega[:, j] = bank.prototypes[j]
            if classifier.bias is not None:
                classifier.bias[j] = 0.0
    return classifier
