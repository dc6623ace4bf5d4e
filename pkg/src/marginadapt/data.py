"""Synthetic domain-shift tasks and dataset IO.

Tasks are class-conditional spherical Gaussians. Source domains are mild
random rotations of a shared base task; the target applies a controlled
shift (plane rotation by a set angle, mean translation, or a given affine
map). Everything is seeded and reproducible down to the byte.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import ConfigError, DataError, ParseError, SchemaError
from .numeric import Array


@dataclass
class DomainDataset:
    """Feature matrix plus integer labels for one domain."""

    features: Array
    labels: Array
    num_classes: int
    domain_id: str
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise DataError(
                f"domain {self.domain_id}: features must be 2-D, got {self.features.shape}"
            )
        if self.labels.shape != (self.features.shape[0],):
            raise DataError(
                f"domain {self.domain_id}: labels must align with feature rows"
            )
        if self.features.shape[0] < 1:
            raise DataError(f"domain {self.domain_id}: empty dataset")
        if not np.isfinite(self.features).all():
            raise DataError(f"domain {self.domain_id}: non-finite feature values")
        if self.num_classes < 2:
            raise DataError(f"domain {self.domain_id}: num_classes must be >= 2")
        if self.labels.size and (
            self.labels.min() < 0 or self.labels.max() >= self.num_classes
        ):
            raise DataError(
                f"domain {self.domain_id}: labels outside [0, {self.num_classes})"
            )

    @property
    def n(self) -> int:
        return self.features.shape[0]


@dataclass
class ShiftSpec:
    """Parameters of one synthetic shift task."""

    num_classes: int = 4
    input_dim: int = 16
    class_separation: float = 4.0
    within_class_std: float = 1.0
    shift_kind: str = "rotation"  # rotation | mean_translation | affine
    angle_deg: float = 30.0
    translation_std: float = 1.0
    translation: list | None = None
    affine_matrix: list | None = None
    samples_per_domain: int = 2000
    num_source_domains: int = 3
    source_angle_max_deg: float = 10.0
    seed: int = 0

    def validate(self) -> "ShiftSpec":
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.input_dim < self.num_classes:
            raise ConfigError(
                "input_dim must be >= num_classes so class means can be orthogonal"
            )
        if self.class_separation <= 0.0:
            raise ConfigError("class_separation must be > 0")
        if self.within_class_std <= 0.0:
            raise ConfigError("within_class_std must be > 0")
        if self.shift_kind not in ("rotation", "mean_translation", "affine"):
            raise ConfigError(f"unknown shift_kind {self.shift_kind!r}")
        if not 0.0 <= self.angle_deg <= 180.0:
            raise ConfigError(f"angle_deg must lie in [0, 180], got {self.angle_deg}")
        if self.translation_std < 0.0:
            raise ConfigError("translation_std must be >= 0")
        if self.samples_per_domain < self.num_classes:
            raise ConfigError("samples_per_domain must be >= num_classes")
        if self.num_source_domains < 1:
            raise ConfigError("num_source_domains must be >= 1")
        if not 0.0 <= self.source_angle_max_deg <= 180.0:
            raise ConfigError("source_angle_max_deg must lie in [0, 180]")
        if self.shift_kind == "affine" and self.affine_matrix is None:
            raise ConfigError("affine shift needs affine_matrix")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


def random_unit_pair(rng, dim: int):
    """Two orthonormal vectors spanning a random plane."""
    u = rng.standard_normal(dim)
    u = u / np.linalg.norm(u)
    v = rng.standard_normal(dim)
    v = v - u * (u @ v)
    v = v / np.linalg.norm(v)
    return u, v


def plane_rotation(u: Array, v: Array, angle_deg: float) -> Array:
    """Rotation by angle_deg in the plane spanned by orthonormal u, v;
    identity on the orthogonal complement. Exactly the identity at 0 deg."""
    theta = math.radians(angle_deg)
    d = u.shape[0]
    r = np.eye(d)
    r += (math.cos(theta) - 1.0) * (np.outer(u, u) + np.outer(v, v))
    r += math.sin(theta) * (np.outer(v, u) - np.outer(u, v))
    return r


def span_rotation(rng, means: Array, angle_deg: float) -> Array:
    """Rotation that turns every class mean by exactly angle_deg.

    The span of the class means is split into seeded random orthogonal
    planes and each plane is rotated by the same angle, so the whole
    subspace (and with it every mean) rotates by the nominal amount. A
    single plane drawn in the full ambient space would mostly miss the
    span when input_dim is much larger than num_classes, leaving the
    effective angle far below nominal and seed-dependent. Odd leftover
    span dimension stays fixed; the orthogonal complement always does.
    """
    q, r = np.linalg.qr(means.T)  # (d, C) orthonormal basis of the span
    q = q * np.sign(np.diag(r))
    c = means.shape[0]
    g = rng.standard_normal((c, c))
    b, rb = np.linalg.qr(g)
    b = b * np.sign(np.diag(rb))
    basis = q @ b
    rot = np.eye(means.shape[1])
    for j in range(0, c - 1, 2):
        rot = plane_rotation(basis[:, j], basis[:, j + 1], angle_deg) @ rot
    return rot


def _class_counts(n: int, c: int) -> list[int]:
    base = n // c
    counts = [base] * c
    for j in range(n - base * c):
        counts[j] += 1
    return counts


def _base_means(rng, spec: ShiftSpec) -> Array:
    """Orthonormal directions scaled so every pair of class means sits
    class_separation * std apart."""
    m = rng.standard_normal((spec.input_dim, spec.num_classes))
    q, r = np.linalg.qr(m)
    q = q * np.sign(np.diag(r))
    radius = spec.class_separation * spec.within_class_std / math.sqrt(2.0)
    return (radius * q[:, : spec.num_classes]).T  # (C, d)


def _sample_domain(rng, spec, means, rotation, translation, domain_id, extra_meta):
    counts = _class_counts(spec.samples_per_domain, spec.num_classes)
    blocks = []
    labels = []
    for j, nj in enumerate(counts):
        blocks.append(
            means[j] + spec.within_class_std * rng.standard_normal((nj, spec.input_dim))
        )
        labels.extend([j] * nj)
    x = np.vstack(blocks)
    if rotation is not None:
        x = x @ rotation.T
    if translation is not None:
        x = x + translation
    y = np.asarray(labels, dtype=np.int64)
    perm = rng.permutation(x.shape[0])
    moved_means = means.copy()
    if rotation is not None:
        moved_means = moved_means @ rotation.T
    if translation is not None:
        moved_means = moved_means + translation
    meta = {
        "class_means": moved_means.tolist(),
        "base_class_means": means.tolist(),
        "within_class_std": spec.within_class_std,
        **extra_meta,
    }
    return DomainDataset(
        features=x[perm],
        labels=y[perm],
        num_classes=spec.num_classes,
        domain_id=domain_id,
        metadata=meta,
    )


def gen_synthetic_shift(spec: ShiftSpec):
    """Build (sources, target) domain datasets for the configured task.

    Sources share base class means up to mild random rotations (angle drawn
    in [0, source_angle_max_deg]). The rotation-kind target turns the whole
    class-mean span by angle_deg (see span_rotation) and adds a random mean
    translation of translation_std * within_class_std; the other kinds apply
    the configured translation or affine map. Same seed, same bytes.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    means = _base_means(rng, spec)

    sources = []
    for k in range(spec.num_source_domains):
        angle = float(rng.uniform(0.0, spec.source_angle_max_deg))
        u, v = random_unit_pair(rng, spec.input_dim)
        rot = plane_rotation(u, v, angle)
        sources.append(
            _sample_domain(
                rng, spec, means, rot, None, f"source_{k}",
                {"transform": {"kind": "rotation", "angle_deg": angle,
                               "rotation": rot.tolist()}},
            )
        )

    if spec.shift_kind == "rotation":
        rot = span_rotation(rng, means, spec.angle_deg)
        translation = _target_translation(rng, spec)
        extra = {"transform": {"kind": "rotation", "angle_deg": spec.angle_deg,
                               "rotation": rot.tolist(),
                               "translation": translation.tolist()}}
    elif spec.shift_kind == "mean_translation":
        rot = None
        translation = _target_translation(rng, spec)
        extra = {"transform": {"kind": "mean_translation",
                               "translation": translation.tolist()}}
    else:
        rot = np.asarray(spec.affine_matrix, dtype=np.float64)
        if rot.shape != (spec.input_dim, spec.input_dim):
            raise ConfigError(
                f"affine_matrix must be {spec.input_dim}x{spec.input_dim}"
            )
        translation = _target_translation(rng, spec)
        extra = {"transform": {"kind": "affine", "matrix": rot.tolist(),
                               "translation": translation.tolist()}}
    target = _sample_domain(rng, spec, means, rot, translation, "target", extra)
    return sources, target


def _target_translation(rng, spec: ShiftSpec) -> Array:
    if spec.translation is not None:
        t = np.asarray(spec.translation, dtype=np.float64)
        if t.shape != (spec.input_dim,):
            raise ConfigError(f"translation must have length {spec.input_dim}")
        return t
    direction = rng.standard_normal(spec.input_dim)
    direction = direction / np.linalg.norm(direction)
    return spec.translation_std * spec.within_class_std * direction


def bayes_accuracy_binary(mean_a, mean_b, std: float) -> float:
    """Exact Bayes accuracy of two equally likely spherical Gaussians:
    Phi(||mu_a - mu_b|| / (2 std))."""
    gap = float(np.linalg.norm(np.asarray(mean_a) - np.asarray(mean_b)))
    z = gap / (2.0 * std)
    return 0.5 * (1.0 + math.erf(z / math.sqrt(2.0)))


# ---------------------------------------------------------------------------
# CSV IO: header f0..f{d-1},label,domain


def write_csv(datasets, path) -> str:
    """Write one or several domains into a single CSV. Floats are serialized
    with repr so a read back is bit-exact."""
    if isinstance(datasets, DomainDataset):
        datasets = [datasets]
    if not datasets:
        raise DataError("write_csv: nothing to write")
    dim = datasets[0].features.shape[1]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"f{i}" for i in range(dim)] + ["label", "domain"])
        for ds in datasets:
            if ds.features.shape[1] != dim:
                raise DataError("write_csv: feature widths differ across domains")
            for row, lab in zip(ds.features, ds.labels):
                writer.writerow([repr(float(v)) for v in row] + [int(lab), ds.domain_id])
    return str(path)


def _parse_rows(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        if len(header) < 3 or header[-2:] != ["label", "domain"]:
            raise SchemaError(
                f"{path}: header must be f0..fk,label,domain, got {header[:6]}..."
            )
        dim = len(header) - 2
        expected = [f"f{i}" for i in range(dim)]
        if header[:dim] != expected:
            raise SchemaError(f"{path}: feature columns must be named f0..f{dim - 1}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != dim + 2:
                raise SchemaError(
                    f"{path}: line {lineno}: expected {dim + 2} columns, got {len(row)}"
                )
            try:
                feats = [float(v) for v in row[:dim]]
            except ValueError as e:
                raise ParseError(f"{path}: line {lineno}: bad float ({e})") from None
            try:
                label = int(row[dim])
            except ValueError:
                raise ParseError(
                    f"{path}: line {lineno}: label {row[dim]!r} is not an integer"
                ) from None
            rows.append((feats, label, row[dim + 1], lineno))
    if not rows:
        raise DataError(f"{path}: no data rows")
    return dim, rows


def load_csv_domains(path, num_classes: int | None = None) -> dict:
    """Read a CSV into one DomainDataset per distinct domain value."""
    dim, rows = _parse_rows(path)
    max_label = max(r[1] for r in rows)
    min_label = min(r[1] for r in rows)
    if min_label < 0:
        raise DataError(f"{path}: negative label {min_label}")
    if num_classes is None:
        num_classes = max_label + 1
    elif max_label >= num_classes:
        bad = next(r for r in rows if r[1] >= num_classes)
        raise DataError(
            f"{path}: line {bad[3]}: label {bad[1]} outside [0, {num_classes})"
        )
    by_domain: dict[str, list] = {}
    for feats, label, domain, _ in rows:
        by_domain.setdefault(domain, []).append((feats, label))
    out = {}
    for domain, items in by_domain.items():
        out[domain] = DomainDataset(
            features=np.asarray([f for f, _ in items], dtype=np.float64),
            labels=np.asarray([l for _, l in items], dtype=np.int64),
            num_classes=num_classes,
            domain_id=domain,
        )
    return out


def load_csv(path, num_classes: int | None = None, domain: str | None = None) -> DomainDataset:
    """Read a single-domain CSV (or pick one domain out of a mixed file)."""
    domains = load_csv_domains(path, num_classes=num_classes)
    if domain is not None:
        if domain not in domains:
            raise DataError(f"{path}: no rows for domain {domain!r}")
        return domains[domain]
    if len(domains) != 1:
        raise DataError(
            f"{path}: holds {sorted(domains)} domains; pass domain= to pick one"
        )
    return next(iter(domains.values()))


def split_holdout(ds: DomainDataset, fraction: float, seed: int = 0):
    """Stratified (train, val) split; val gets round(fraction * n) rows spread
    across classes by largest remainder. Deterministic in the seed."""
    if not 0.0 < fraction < 1.0:
        raise ConfigError(f"holdout fraction must lie in (0, 1), got {fraction}")
    n_val = int(round(fraction * ds.n))
    if n_val < 1 or n_val >= ds.n:
        raise DataError(
            f"holdout of {fraction} on {ds.n} rows leaves an empty split"
        )
    rng = np.random.default_rng(seed)
    present = sorted(int(c) for c in np.unique(ds.labels))
    quotas = {}
    remainders = []
    total = 0
    for c in present:
        nc = int((ds.labels == c).sum())
        exact = fraction * nc
        q = int(math.floor(exact))
        quotas[c] = q
        total += q
        remainders.append((-(exact - q), c))
    remainders.sort()
    i = 0
    while total < n_val and i < len(remainders):
        c = remainders[i][1]
        if quotas[c] < int((ds.labels == c).sum()):
            quotas[c] += 1
            total += 1
        i += 1
    # rounding can still leave a gap when many classes tie; fill greedily
    while total < n_val:
        for c in present:
            if total >= n_val:
                break
            if quotas[c] < int((ds.labels == c).sum()):
                quotas[c] += 1
                total += 1
    val_idx = []
    for c in present:
        idx = np.flatnonzero(ds.labels == c)
        picked = rng.permutation(idx.shape[0])[: quotas[c]]
        val_idx.extend(idx[picked].tolist())
    val_mask = np.zeros(ds.n, dtype=bool)
    val_mask[val_idx] = True
    train_idx = np.flatnonzero(~val_mask)
    val_idx = np.flatnonzero(val_mask)

    def subset(indices, tag):
        return DomainDataset(
            features=ds.features[indices].copy(),
            labels=ds.labels[indices].copy(),
            num_classes=ds.num_classes,
            domain_id=ds.domain_id,
            metadata={**ds.metadata, "split": tag},
        )

    return subset(train_idx, "train"), subset(val_idx, "val")
