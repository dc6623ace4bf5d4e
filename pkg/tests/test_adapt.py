"""Streaming adaptation protocol: pairing, switch semantics, label hygiene."""

import numpy as np
import numpy.testing as npt
import pytest

from marginadapt import (
    AdaptConfig,
    ConfigError,
    DomainDataset,
    LinearClassifier,
    MlpEncoder,
    ShiftSpec,
    TrainConfig,
    adapt_entropy_norm,
    adapt_stream,
    classification_accuracy,
    clone_for_adaptation,
    gen_synthetic_shift,
    run_method,
    stream_batches,
    train_source_erm,
)


def _tiny(seed, use_norm=False):
    """Small briefly-trained model pair plus its shifted target stream."""
    spec = ShiftSpec(samples_per_domain=240, num_source_domains=2, seed=seed)
    sources, target = gen_synthetic_shift(spec)
    dims = [16, 24, 24] if use_norm else [16, 24]
    enc = MlpEncoder.create(dims, use_norm=use_norm, seed=seed)
    clf = LinearClassifier.create(dims[-1], 4, seed=seed + 1)
    train_source_erm(enc, clf, sources, TrainConfig(lr=1e-2, epochs=3, seed=seed))
    return clone_for_adaptation(enc, clf), target


def test_stream_batches_partition_the_index_range():
    batches = stream_batches(103, 10, seed=5)
    assert [b.shape[0] for b in batches] == [10] * 10 + [3]
    npt.assert_array_equal(np.sort(np.concatenate(batches)), np.arange(103))
    again = stream_batches(103, 10, seed=5)
    assert all(np.array_equal(a, b) for a, b in zip(batches, again))
    other = stream_batches(103, 10, seed=6)
    assert not np.array_equal(batches[0], other[0])


def test_first_batch_predictions_come_from_the_frozen_parameters():
    # predict-then-adapt: step t's predictions precede step t's update
    pair, target = _tiny(0)
    cfg = AdaptConfig(lr=1e-2, batch_size=32, seed=7)
    batch0 = stream_batches(target.n, cfg.batch_size, cfg.seed)[0]
    frozen_probs = pair.predict_probs(target.features[batch0])
    frozen_acc = float(
        (np.argmax(frozen_probs, axis=1) == target.labels[batch0]).mean()
    )
    _, curve, _ = adapt_stream(pair, target, cfg)
    assert curve.cumulative[0] == frozen_acc


def test_zero_steps_is_pure_evaluation():
    pair, target = _tiny(1)
    before = pair.adapted_fingerprint()
    _, curve, reports = adapt_stream(pair, target, AdaptConfig(steps=0, seed=3))
    assert pair.adapted_fingerprint() == before
    assert reports == []
    # every sample scored once, so the cumulative end point is plain accuracy
    expected = classification_accuracy(
        pair.adapted_encoder, pair.adapted_classifier, target.features, target.labels
    )
    assert curve.final_accuracy == expected
    assert curve.per_domain == {target.domain_id: expected}


def test_all_switches_off_is_pure_evaluation():
    pair, target = _tiny(1)
    before = pair.adapted_fingerprint()
    cfg = AdaptConfig(
        enable_lm=False, enable_le=False, enable_li=False,
        enable_bank=False, enable_refresh=False, seed=3,
    )
    _, curve, reports = adapt_stream(pair, target, cfg)
    assert pair.adapted_fingerprint() == before
    assert reports == []
    assert len(curve.cumulative) == len(stream_batches(target.n, cfg.batch_size, 3))


def test_labels_never_reach_the_update():
    # replacing every label with a constant must leave the learned parameters
    # bit-identical; only the reported accuracy may change
    pair_a, target = _tiny(2)
    pair_b, _ = _tiny(2)
    blanked = DomainDataset(
        features=target.features.copy(),
        labels=np.zeros_like(target.labels),
        num_classes=target.num_classes,
        domain_id=target.domain_id,
    )
    cfg = AdaptConfig(lr=1e-3, seed=11)
    _, curve_a, reports_a = adapt_stream(pair_a, target, cfg)
    _, curve_b, reports_b = adapt_stream(pair_b, blanked, cfg)
    assert pair_a.adapted_fingerprint() == pair_b.adapted_fingerprint()
    assert [r.total for r in reports_a] == [r.total for r in reports_b]
    assert curve_a.final_accuracy != curve_b.final_accuracy


def test_margin_alone_cannot_move_a_fresh_clone():
    # at start the adapted copy sits exactly on the source, inside the margin,
    # so the hinge and its gradient are exactly zero on every batch
    pair, target = _tiny(4)
    before = pair.adapted_fingerprint()
    cfg = AdaptConfig(
        lr=1e-2, seed=5,
        enable_lm=True, enable_le=False, enable_li=False,
        enable_bank=False, enable_refresh=False,
    )
    _, _, reports = adapt_stream(pair, target, cfg)
    assert pair.adapted_fingerprint() == before
    assert all(r.l_m == 0.0 for r in reports)


def test_bank_without_refresh_changes_nothing_observable():
    pair, target = _tiny(4)
    before = pair.adapted_fingerprint()
    cfg = AdaptConfig(
        seed=5,
        enable_lm=False, enable_le=False, enable_li=False,
        enable_bank=True, enable_refresh=False,
    )
    _, curve, reports = adapt_stream(pair, target, cfg)
    assert pair.adapted_fingerprint() == before
    assert reports == []
    _, plain, _ = adapt_stream(pair, target, AdaptConfig(steps=0, seed=5))
    assert curve.cumulative == plain.cumulative


def test_huge_sigma_reduces_to_entropy_with_refresh_step_for_step():
    # a margin the stream can never reach contributes zero loss and zero
    # gradient, so the full method must track the lm-disabled run exactly
    pair_a, target = _tiny(6)
    pair_b, _ = _tiny(6)
    base = dict(lr=1e-3, seed=9, enable_li=False)
    _, curve_a, rep_a = adapt_stream(pair_a, target, AdaptConfig(sigma=1e6, **base))
    _, curve_b, rep_b = adapt_stream(
        pair_b, target, AdaptConfig(enable_lm=False, **base)
    )
    assert pair_a.adapted_fingerprint() == pair_b.adapted_fingerprint()
    assert all(r.l_m == 0.0 for r in rep_a)
    assert [r.l_e for r in rep_a] == [r.l_e for r in rep_b]
    assert curve_a.cumulative == curve_b.cumulative


def test_entropy_norm_requires_norm_layers():
    pair, target = _tiny(0)
    with pytest.raises(ConfigError):
        adapt_entropy_norm(pair, target, AdaptConfig(method="entropy_norm"))


def test_entropy_norm_touches_only_normalization_state():
    pair, target = _tiny(3, use_norm=True)
    before = {n: a.copy() for n, a in pair.adapted_encoder.state_arrays()}
    before.update({n: a.copy() for n, a in pair.adapted_classifier.parameters()})
    cfg = AdaptConfig(method="entropy_norm", lr=1e-2, steps=5, seed=1)
    adapt_entropy_norm(pair, target, cfg)
    after = dict(pair.adapted_encoder.state_arrays())
    after.update(pair.adapted_classifier.parameters())
    for name in before:
        frozen = name.endswith((".w", ".b")) and not name.startswith("enc.0.running")
        if frozen:
            assert np.array_equal(before[name], after[name]), name
        else:
            assert not np.array_equal(before[name], after[name]), name


def test_pseudo_label_method_runs_and_reports():
    pair, target = _tiny(8)
    cfg = AdaptConfig(method="pseudo_label", lr=1e-3, seed=2)
    _, curve, reports = run_method(pair, target, cfg)
    n_batches = len(stream_batches(target.n, cfg.batch_size, cfg.seed))
    assert len(curve.cumulative) == n_batches
    assert len(reports) == n_batches
    assert 0.0 <= curve.final_accuracy <= 1.0


def test_run_method_none_never_adapts_even_without_step_cap():
    pair, target = _tiny(8)
    before = pair.adapted_fingerprint()
    _, curve, reports = run_method(pair, target, AdaptConfig(method="none", steps=None))
    assert pair.adapted_fingerprint() == before
    assert reports == []


def test_source_before_and_after_are_recorded():
    pair, target = _tiny(9)
    spec = ShiftSpec(samples_per_domain=240, num_source_domains=2, seed=9)
    sources, _ = gen_synthetic_shift(spec)
    _, curve, _ = adapt_stream(
        pair, target, AdaptConfig(lr=1e-3, seed=0), source_eval=sources[0]
    )
    assert curve.source_before is not None and curve.source_after is not None
    _, plain, _ = adapt_stream(pair, target, AdaptConfig(steps=0, seed=0))
    assert plain.source_before is None and plain.source_after is None


def test_adapt_config_validation():
    with pytest.raises(ConfigError):
        AdaptConfig(sigma=-0.1).validate()
    with pytest.raises(ConfigError):
        AdaptConfig(lambda_weight=-1.0).validate()
    with pytest.raises(ConfigError):
        AdaptConfig(top_k=0).validate()
    with pytest.raises(ConfigError):
        AdaptConfig(lr=0.0).validate()
    with pytest.raises(ConfigError):
        AdaptConfig(batch_size=1).validate()
    with pytest.raises(ConfigError):
        AdaptConfig(steps=-1).validate()
    with pytest.raises(ConfigError):
        AdaptConfig(method="bogus").validate()
