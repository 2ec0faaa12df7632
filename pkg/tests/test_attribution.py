import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from featrace.attribution import (
    AttributionRecord,
    MetricHead,
    TaskBatch,
    ablation_experiment,
    attribute,
    decompose,
    edited_activations,
    rank_features,
    recovery_curve,
    residual_attribution,
    to_records,
)
from featrace.crosscoder import forward

from oracles import ig_integral, random_model


def setup(seed=0, K=3, d=8, F=16, B=6):
    rng = np.random.default_rng(seed)
    m = random_model(rng, K, d, F)
    task = TaskBatch(rng.normal(size=(K, B, d)), rng.normal(size=(K, B, d)))
    return rng, m, task


def test_decomposition_sums_to_activation():
    rng, m, task = setup()
    dec = decompose(m, 1, task.clean[:, 0])
    total = dec.contributions.sum(0) + dec.bias + dec.error
    assert np.allclose(total, task.clean[1, 0], atol=1e-12)
    with pytest.raises(ValueError):
        decompose(m, 1, task.clean[0, 0])


def test_affine_plain_attribution_exact():
    rng, m, task = setup(1)
    v = rng.normal(size=8)
    head = MetricHead.affine(v, 0.3)
    got = attribute(m, 2, head, task, "plain")
    f = forward(m, task.clean).f[2]
    expected = f * (v @ m.W_dec[2])
    assert np.max(np.abs(got - expected)) < 1e-6


@pytest.mark.parametrize("rule", ["midpoint", "left"])
def test_ig_equals_single_point_under_affine_heads(rule):
    rng, m, task = setup(2)
    head = MetricHead.affine(rng.normal(size=8))
    assert np.allclose(attribute(m, 0, head, task, "ig-plain", 10, rule), attribute(m, 0, head, task, "plain"), atol=1e-10)
    assert np.allclose(attribute(m, 0, head, task, "ig-patching", 10, rule), attribute(m, 0, head, task, "patching"), atol=1e-10)


def test_patching_is_difference_times_gradient():
    rng, m, task = setup(3)
    v = rng.normal(size=8)
    got = attribute(m, 1, MetricHead.affine(v), task, "patching")
    fc, fx = forward(m, task.clean).f[1], forward(m, task.corrupted).f[1]
    assert np.allclose(got, (fc - fx) * (v @ m.W_dec[1]), atol=1e-12)


def test_external_head_per_sample_gradients():
    rng, m, task = setup(4)
    G = rng.normal(size=(6, 8))
    got = attribute(m, 0, MetricHead.external(G), task, "plain")
    f = forward(m, task.clean).f[0]
    assert np.allclose(got, f * (G @ m.W_dec[0]), atol=1e-12)


@pytest.mark.parametrize("variant", ["ig-plain", "ig-patching"])
@pytest.mark.parametrize("seed", range(3))
def test_ig_cauchy_convergence(variant, seed):
    rng, m, task = setup(10 + seed)
    head = MetricHead.random_mlp1(8, 16, seed)
    for N in (64, 128):
        a, b = attribute(m, 1, head, task, variant, N), attribute(m, 1, head, task, variant, 2 * N)
        assert np.max(np.abs(a - b)) <= 1e-3


@pytest.mark.parametrize("variant", ["ig-plain", "ig-patching"])
def test_ig_converges_to_path_integral(variant):
    rng, m, task = setup(20)
    head = MetricHead.random_mlp1(8, 16, 5)
    base = forward(m, task.corrupted).f[1].astype(float) if variant == "ig-patching" else np.zeros((6, 16))
    exact = ig_integral(m, 1, head, task.clean, base)
    fine = attribute(m, 1, head, task, variant, 10_000)
    assert np.allclose(fine, exact, atol=1e-8)
    coarse = attribute(m, 1, head, task, variant, 10)
    top = np.abs(exact) >= np.percentile(np.abs(exact), 90)
    assert np.max(np.abs(coarse[top] - exact[top]) / np.abs(exact[top])) < 0.02


def test_ig_completeness_for_zero_baseline():
    # IG scores sum to m(clean) - m(rebuilt from zero codes) up to quadrature error
    rng, m, task = setup(21)
    head = MetricHead.random_mlp1(8, 16, 2)
    scores = attribute(m, 0, head, task, "ig-plain", 4000)
    f = forward(m, task.clean).f[0]
    err = task.clean[0] - (f @ m.W_dec[0].T + m.b_dec[0])
    base_act = m.b_dec[0] + err
    assert np.allclose(scores.sum(1), head(task.clean[0]) - head(base_act), atol=1e-6)


def test_residual_attribution_closes_linear_budget():
    rng, m, task = setup(5)
    head = MetricHead.affine(rng.normal(size=8))
    feat = attribute(m, 2, head, task, "plain").sum(1)
    assert np.allclose(feat + residual_attribution(m, 2, head, task), head(task.clean[2]), atol=1e-10)


def test_variant_errors():
    rng, m, task = setup()
    head = MetricHead.affine(np.ones(8))
    with pytest.raises(ValueError):
        attribute(m, 0, head, TaskBatch(task.clean), "patching")
    with pytest.raises(ValueError):
        attribute(m, 0, head, task, "bogus")
    with pytest.raises(ValueError):
        attribute(m, 0, head, task, "ig-plain", 10, "trapezoid")


def test_head_gradient_matches_finite_differences(tmp_path):
    head = MetricHead.random_mlp1(5, 7, 3)
    a = np.random.default_rng(0).normal(size=5)
    g = head.gradient(a)
    h = 1e-6
    fd = [(head(a + h * e) - head(a - h * e)) / (2 * h) for e in np.eye(5)]
    assert np.allclose(g, fd, atol=1e-8)
    head.save(tmp_path / "h.json")
    assert np.allclose(MetricHead.load(tmp_path / "h.json").gradient(a), g)


def test_ranking_and_records():
    scores = np.array([[1.0, 3.0, 3.0, -1.0], [1.0, 3.0, 3.0, 5.0]])
    assert rank_features(scores) == [1, 2, 3, 0]
    recs = to_records(scores, 100, "plain")
    assert len(recs) == 8 and recs[1] == AttributionRecord(1, 100, 3.0, "plain", 0)
    assert rank_features(recs) == [1, 2, 3, 0]
    with pytest.raises(ValueError):
        rank_features([])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(-3, 3), min_size=1, max_size=12))
def test_ranking_is_a_permutation_sorted_by_score(vals):
    scores = np.array(vals, float)[None]
    r = rank_features(scores)
    assert sorted(r) == list(range(len(vals)))
    assert all((scores[0, a], -a) >= (scores[0, b], -b) for a, b in zip(r, r[1:]))


def test_ablation_endpoints():
    rng, m, task = setup(6)
    head = MetricHead.affine(rng.normal(size=8))
    ranked = list(range(16))
    # nothing ablated and everything kept leave the clean metric untouched
    assert ablation_experiment(m, 1, head, task, ranked, 0, "ablate-top").recovery == pytest.approx(1.0, abs=1e-12)
    assert ablation_experiment(m, 1, head, task, ranked, 16, "keep-top").recovery == pytest.approx(1.0, abs=1e-12)
    # every feature swapped leaves only the clean residual and bias
    full = ablation_experiment(m, 1, head, task, ranked, 16, "ablate-top")
    assert np.isfinite(full.recovery)
    edited = edited_activations(m, 1, task, ranked, 0, "keep-top")
    assert np.allclose(edited, edited_activations(m, 1, task, ranked, 16, "ablate-top"))
    assert recovery_curve(m, 1, head, task, ranked, [0], "ablate-top") == [pytest.approx(1.0)]


def test_ablation_without_corruption_is_ratio():
    rng, m, task = setup(7)
    plain = TaskBatch(task.clean)
    head = MetricHead.affine(rng.normal(size=8), 5.0)
    res = ablation_experiment(m, 0, head, plain, list(range(16)), 16, "ablate-top")
    edited = edited_activations(m, 0, plain, list(range(16)), 16, "ablate-top")
    assert res.recovery == pytest.approx(np.mean(head(edited) / head(task.clean[0])))


def test_ablation_skips_zero_denominators(caplog):
    rng, m, task = setup(8)
    corrupted = task.corrupted.copy()
    corrupted[:, 0] = task.clean[:, 0]
    t = TaskBatch(task.clean, corrupted)
    head = MetricHead.affine(rng.normal(size=8))
    with caplog.at_level(logging.WARNING):
        res = ablation_experiment(m, 0, head, t, list(range(16)), 3)
    assert res.n_skipped == 1 and np.isnan(res.per_sample[0])
    assert "skipped" in caplog.text
    with pytest.raises(ValueError):
        ablation_experiment(m, 0, head, TaskBatch(task.clean, task.clean.copy()), [0], 1)
    with pytest.raises(ValueError):
        ablation_experiment(m, 0, head, t, [0], 1, "other")
