"""Generator geometry, shift invariants, CSV round-trips, holdout splits."""

import math

import numpy as np
import numpy.testing as npt
import pytest

from marginadapt import (
    ConfigError,
    DataError,
    DomainDataset,
    ParseError,
    SchemaError,
    ShiftSpec,
    bayes_accuracy_binary,
    gen_synthetic_shift,
    load_csv,
    load_csv_domains,
    plane_rotation,
    span_rotation,
    split_holdout,
    write_csv,
)
from marginadapt.data import random_unit_pair


def test_generation_is_seed_deterministic():
    a_sources, a_target = gen_synthetic_shift(ShiftSpec(seed=7, samples_per_domain=64))
    b_sources, b_target = gen_synthetic_shift(ShiftSpec(seed=7, samples_per_domain=64))
    for a, b in zip(a_sources + [a_target], b_sources + [b_target]):
        npt.assert_array_equal(a.features, b.features)
        npt.assert_array_equal(a.labels, b.labels)
    c_sources, _ = gen_synthetic_shift(ShiftSpec(seed=8, samples_per_domain=64))
    assert not np.array_equal(a_sources[0].features, c_sources[0].features)


def test_label_marginals_identical_across_domains():
    sources, target = gen_synthetic_shift(ShiftSpec(seed=0, samples_per_domain=103))
    expect = np.bincount(sources[0].labels, minlength=4)
    for ds in sources[1:] + [target]:
        npt.assert_array_equal(np.bincount(ds.labels, minlength=4), expect)


def test_class_mean_separation_matches_spec():
    spec = ShiftSpec(seed=1, samples_per_domain=40)
    _, target = gen_synthetic_shift(spec)
    base = np.asarray(target.metadata["base_class_means"])
    want = spec.class_separation * spec.within_class_std
    for i in range(4):
        for j in range(i + 1, 4):
            assert abs(np.linalg.norm(base[i] - base[j]) - want) < 1e-9


def test_zero_angle_zero_translation_is_identity():
    spec = ShiftSpec(seed=2, angle_deg=0.0, translation_std=0.0, samples_per_domain=40)
    _, target = gen_synthetic_shift(spec)
    npt.assert_allclose(
        np.asarray(target.metadata["transform"]["rotation"]), np.eye(16), atol=1e-12
    )
    npt.assert_array_equal(target.metadata["transform"]["translation"], np.zeros(16))
    npt.assert_allclose(
        np.asarray(target.metadata["class_means"]),
        np.asarray(target.metadata["base_class_means"]),
        atol=1e-12,
    )


def test_plane_rotation_basics():
    rng = np.random.default_rng(3)
    u, v = random_unit_pair(rng, 8)
    npt.assert_array_equal(plane_rotation(u, v, 0.0), np.eye(8))
    r = plane_rotation(u, v, 90.0)
    npt.assert_allclose(r @ u, v, atol=1e-12)
    npt.assert_allclose(r @ r.T, np.eye(8), atol=1e-12)


def test_span_rotation_turns_every_mean_by_the_nominal_angle():
    rng = np.random.default_rng(4)
    for angle in (10.0, 30.0, 75.0):
        spec = ShiftSpec(seed=5, samples_per_domain=40)
        _, target = gen_synthetic_shift(spec)
        means = np.asarray(target.metadata["base_class_means"])
        rot = span_rotation(np.random.default_rng(0), means, angle)
        npt.assert_allclose(rot @ rot.T, np.eye(16), atol=1e-12)
        assert abs(np.linalg.det(rot) - 1.0) < 1e-9
        for mu in means:
            rotated = rot @ mu
            cos = float(mu @ rotated / (np.linalg.norm(mu) * np.linalg.norm(rotated)))
            assert abs(cos - math.cos(math.radians(angle))) < 1e-9
            assert abs(np.linalg.norm(rotated) - np.linalg.norm(mu)) < 1e-9


def test_span_rotation_fixes_the_orthogonal_complement():
    rng = np.random.default_rng(6)
    means = ShiftSpec(seed=7, samples_per_domain=40)
    _, target = gen_synthetic_shift(means)
    base = np.asarray(target.metadata["base_class_means"])
    rot = span_rotation(rng, base, 30.0)
    # a vector orthogonal to all means must pass through unchanged
    q, _ = np.linalg.qr(base.T)
    v = np.random.default_rng(8).standard_normal(16)
    v -= q @ (q.T @ v)
    npt.assert_allclose(rot @ v, v, atol=1e-9)


def test_rotated_target_means_recorded_in_metadata():
    spec = ShiftSpec(seed=9, samples_per_domain=40)
    _, target = gen_synthetic_shift(spec)
    meta = target.metadata["transform"]
    rot = np.asarray(meta["rotation"])
    t = np.asarray(meta["translation"])
    base = np.asarray(target.metadata["base_class_means"])
    npt.assert_allclose(
        np.asarray(target.metadata["class_means"]), base @ rot.T + t, atol=1e-12
    )
    assert abs(np.linalg.norm(t) - spec.translation_std * spec.within_class_std) < 1e-9


def test_mean_translation_kind():
    spec = ShiftSpec(seed=10, shift_kind="mean_translation", samples_per_domain=40)
    _, target = gen_synthetic_shift(spec)
    assert target.metadata["transform"]["kind"] == "mean_translation"
    explicit = ShiftSpec(
        seed=10,
        shift_kind="mean_translation",
        translation=[0.5] * 16,
        samples_per_domain=40,
    )
    _, target2 = gen_synthetic_shift(explicit)
    npt.assert_array_equal(target2.metadata["transform"]["translation"], [0.5] * 16)


def test_affine_kind_requires_square_matrix():
    spec = ShiftSpec(
        seed=11, shift_kind="affine", affine_matrix=np.eye(16).tolist(),
        samples_per_domain=40,
    )
    _, target = gen_synthetic_shift(spec)
    assert target.metadata["transform"]["kind"] == "affine"
    with pytest.raises(ConfigError):
        gen_synthetic_shift(
            ShiftSpec(seed=11, shift_kind="affine", affine_matrix=[[1.0]],
                      samples_per_domain=40)
        )


def test_source_rotations_stay_under_the_cap():
    spec = ShiftSpec(seed=12, samples_per_domain=40, source_angle_max_deg=10.0)
    sources, _ = gen_synthetic_shift(spec)
    for ds in sources:
        assert 0.0 <= ds.metadata["transform"]["angle_deg"] <= 10.0


def test_spec_validation_errors():
    for bad in (
        ShiftSpec(num_classes=1),
        ShiftSpec(input_dim=2),
        ShiftSpec(class_separation=0.0),
        ShiftSpec(shift_kind="zoom"),
        ShiftSpec(angle_deg=181.0),
        ShiftSpec(translation_std=-0.5),
        ShiftSpec(samples_per_domain=2),
    ):
        with pytest.raises(ConfigError):
            bad.validate()


def test_bayes_accuracy_binary_against_monte_carlo():
    rng = np.random.default_rng(13)
    mu_a = np.array([1.0, 0.0])
    mu_b = np.array([-1.0, 0.0])
    exact = bayes_accuracy_binary(mu_a, mu_b, 1.0)
    n = 200_000
    x = np.concatenate([mu_a + rng.standard_normal((n, 2)), mu_b + rng.standard_normal((n, 2))])
    y = np.repeat([0, 1], n)
    pred = (np.linalg.norm(x - mu_b, axis=1) < np.linalg.norm(x - mu_a, axis=1)).astype(int)
    assert abs((pred == y).mean() - exact) < 5e-3
    assert abs(exact - 0.5 * (1.0 + math.erf(1.0 / math.sqrt(2.0)))) < 1e-12


def test_csv_round_trip_is_bit_exact(tmp_path):
    sources, target = gen_synthetic_shift(ShiftSpec(seed=14, samples_per_domain=24))
    path = tmp_path / "mixed.csv"
    write_csv(sources + [target], path)
    back = load_csv_domains(path, num_classes=4)
    assert sorted(back) == sorted(ds.domain_id for ds in sources + [target])
    for ds in sources + [target]:
        npt.assert_array_equal(back[ds.domain_id].features, ds.features)
        npt.assert_array_equal(back[ds.domain_id].labels, ds.labels)


def test_load_csv_single_domain_selection(tmp_path):
    sources, target = gen_synthetic_shift(ShiftSpec(seed=15, samples_per_domain=12))
    path = tmp_path / "all.csv"
    write_csv(sources + [target], path)
    ds = load_csv(path, num_classes=4, domain="target")
    npt.assert_array_equal(ds.features, target.features)
    with pytest.raises(DataError):
        load_csv(path, num_classes=4)  # ambiguous without domain=
    with pytest.raises(DataError):
        load_csv(path, num_classes=4, domain="nope")


def test_csv_parse_errors_carry_line_numbers(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("f0,f1,label,domain\n1.0,2.0,0,d\n1.0,oops,1,d\n")
    with pytest.raises(ParseError) as err:
        load_csv(path)
    assert "line 3" in str(err.value)
    short = tmp_path / "short.csv"
    short.write_text("f0,f1,label,domain\n1.0,0,d\n")
    with pytest.raises(SchemaError) as err:  # wrong width is structural
        load_csv(short)
    assert "line 2" in str(err.value)


def test_csv_label_bounds_checked(tmp_path):
    path = tmp_path / "labels.csv"
    path.write_text("f0,label,domain\n1.0,4,d\n")
    with pytest.raises(DataError):
        load_csv(path, num_classes=4)


def test_split_holdout_is_stratified_and_deterministic():
    rng = np.random.default_rng(16)
    labels = np.repeat([0, 1, 2], [50, 30, 20])
    ds = DomainDataset(rng.standard_normal((100, 3)), labels, 3, "d")
    train, val = split_holdout(ds, 0.2, seed=5)
    assert val.n == 20 and train.n == 80
    npt.assert_array_equal(np.bincount(val.labels), [10, 6, 4])
    train2, val2 = split_holdout(ds, 0.2, seed=5)
    npt.assert_array_equal(val.features, val2.features)
    _, val3 = split_holdout(ds, 0.2, seed=6)
    assert not np.array_equal(val.features, val3.features)


def test_split_holdout_rows_partition_the_dataset():
    rng = np.random.default_rng(17)
    ds = DomainDataset(rng.standard_normal((37, 2)), rng.integers(0, 3, 37), 3, "d")
    train, val = split_holdout(ds, 0.25, seed=0)
    merged = np.vstack([train.features, val.features])
    assert merged.shape[0] == ds.n
    # every original row appears exactly once
    order = np.lexsort(ds.features.T)
    morder = np.lexsort(merged.T)
    npt.assert_array_equal(ds.features[order], merged[morder])


def test_split_holdout_degenerate_fractions():
    ds = DomainDataset(np.ones((4, 2)), [0, 1, 0, 1], 2, "d")
    with pytest.raises(ConfigError):
        split_holdout(ds, 0.0)
    with pytest.raises(DataError):
        split_holdout(ds, 0.05)  # rounds to an empty holdout


def test_domain_dataset_validation():
    with pytest.raises(DataError):
        DomainDataset(np.ones((2, 2)), [0], 2, "d")
    with pytest.raises(DataError):
        DomainDataset(np.array([[np.inf, 0.0]]), [0], 2, "d")
    with pytest.raises(DataError):
        DomainDataset(np.ones((2, 2)), [0, 3], 2, "d")
