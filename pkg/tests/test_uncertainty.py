import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from pstbln.model import NetworkSpec, build_model
from pstbln.uncertainty import (
    PredictionDistribution,
    evaluate_mc,
    mc_predict,
    mc_samples,
    per_class_report,
    report_from_samples,
)
from toys import exhaustive_expectation, two_unit_model


def model_and_data(p=0.2, seed=0, N=5):
    spec = NetworkSpec.from_widths([3, 4], 5, 3, 4, p=p)
    rng = np.random.default_rng(seed)
    return build_model(spec, seed), rng.normal(size=(N, 2, 4, 5)), rng.integers(0, 3, N)


def simplex_samples(draw_shape):
    return hnp.arrays(np.float64, draw_shape, elements=st.floats(0.01, 1.0)).map(
        lambda a: a / a.sum(axis=1, keepdims=True)
    )


class TestMcPredict:
    def test_no_dropout_has_zero_variance(self):
        model, X, _ = model_and_data(p=0.0)
        dist = mc_predict(model, X[0], M=7, seed=0)
        assert np.all(dist.samples == dist.samples[0])
        np.testing.assert_array_equal(dist.variance, 0.0)

    def test_single_sample(self):
        model, X, _ = model_and_data()
        dist = mc_predict(model, X[0], M=1, seed=3)
        np.testing.assert_array_equal(dist.mean, dist.samples[0])
        np.testing.assert_array_equal(dist.variance, 0.0)

    def test_invalid_m(self):
        model, X, _ = model_and_data()
        with pytest.raises(ValueError):
            mc_predict(model, X[0], M=0)

    def test_reproducible_and_seed_sensitive(self):
        model, X, _ = model_and_data()
        a = mc_predict(model, X[0], 20, 1)
        b = mc_predict(model, X[0], 20, 1)
        c = mc_predict(model, X[0], 20, 2)
        np.testing.assert_array_equal(a.samples, b.samples)
        assert not np.array_equal(a.samples, c.samples)

    def test_run_independent_of_m(self):
        model, X, _ = model_and_data()
        np.testing.assert_array_equal(mc_samples(model, X, 3, 5), mc_samples(model, X, 8, 5)[:3])

    def test_batched_equals_single(self):
        model, X, _ = model_and_data()
        batch = mc_samples(model, X, 4, 0)
        assert batch.shape == (4, 5, 3)
        np.testing.assert_allclose(batch.sum(axis=2), 1.0, atol=1e-12)

    def test_exhaustive_mask_oracle(self):
        model, x = two_unit_model()
        exact, outputs = exhaustive_expectation(model, x)
        assert len(outputs) == 4
        dist = mc_predict(model, x, M=20000, seed=0)
        assert np.max(np.abs(dist.mean - exact)) < 0.01
        other = mc_predict(model, x, M=20000, seed=1)
        assert np.max(np.abs(other.mean - exact)) < 0.01


class TestDistributionProperties:
    @settings(max_examples=50)
    @given(st.integers(1, 30).flatmap(lambda m: simplex_samples((m, 4))))
    def test_invariants(self, samples):
        d = PredictionDistribution.from_samples(samples)
        assert abs(d.mean.sum() - 1) <= 1e-6
        M = len(samples)
        assert np.all(d.variance >= 0)
        # Popoviciu bounds the population variance; the unbiased estimate carries M/(M-1)
        assert np.all(samples.var(axis=0) <= 0.25 + 1e-12)
        if M > 1:
            assert np.all(d.variance <= 0.25 * M / (M - 1) + 1e-12)
        np.testing.assert_allclose(d.mean, samples.mean(axis=0), rtol=1e-12)
        if len(samples) > 1:
            np.testing.assert_allclose(d.variance, samples.var(axis=0, ddof=1), rtol=1e-9, atol=1e-15)
        assert d.predicted_class == int(np.argmax(d.mean))
        assert d.uncertainty == d.variance[d.predicted_class]

    @settings(max_examples=30)
    @given(st.integers(2, 20).flatmap(lambda m: simplex_samples((m, 3))), st.randoms())
    def test_order_independent(self, samples, rnd):
        perm = list(range(len(samples)))
        rnd.shuffle(perm)
        a = PredictionDistribution.from_samples(samples)
        b = PredictionDistribution.from_samples(samples[perm])
        np.testing.assert_allclose(a.mean, b.mean, rtol=1e-12, atol=1e-15)
        np.testing.assert_allclose(a.variance, b.variance, rtol=1e-9, atol=1e-15)
        assert a.predicted_class == b.predicted_class


class TestEvaluate:
    def test_no_dropout_runs_agree(self):
        model, X, y = model_and_data(p=0.0)
        r = evaluate_mc(model, X, y, M=5, seed=0)
        assert all(a == r.ensemble_accuracy for a in r.per_run_accuracy)
        assert r.stddev == 0.0

    def test_single_item_correct(self):
        model, X, _ = model_and_data()
        samples = mc_samples(model, X[:1], 10, 0)
        label = int(np.argmax(samples.mean(axis=0)[0]))
        assert evaluate_mc(model, X[:1], [label], M=10, seed=0).ensemble_accuracy == 1.0

    def test_report_fields(self):
        model, X, y = model_and_data()
        r = evaluate_mc(model, X, y, M=6, seed=1)
        d = r.to_dict()
        assert set(d) == {"per_run_accuracy", "ensemble_accuracy", "mean", "stddev"}
        assert len(d["per_run_accuracy"]) == 6
        assert all(0 <= a <= 1 for a in d["per_run_accuracy"] + [d["ensemble_accuracy"]])
        assert d["mean"] == pytest.approx(np.mean(d["per_run_accuracy"]))
        assert d["stddev"] == pytest.approx(np.std(d["per_run_accuracy"], ddof=1))

    def test_empty_dataset(self):
        model, X, _ = model_and_data()
        with pytest.raises(ValueError):
            evaluate_mc(model, X[:0], [], M=2)

    def test_from_samples_by_hand(self):
        # two runs, two items, labels (0, 1)
        samples = np.array([[[0.9, 0.1], [0.6, 0.4]], [[0.2, 0.8], [0.1, 0.9]]])
        r = report_from_samples(samples, [0, 1])
        assert r.per_run_accuracy == [0.5, 0.5]
        # averaged: item 0 -> (0.55, 0.45) class 0, item 1 -> (0.35, 0.65) class 1
        assert r.ensemble_accuracy == 1.0


class TestPerClassReport:
    def test_constant_distribution_single_bin(self):
        d = PredictionDistribution.from_samples(np.tile([0.7, 0.2, 0.1], (10, 1)))
        for row in per_class_report(d, ["a", "b", "c"]):
            assert sorted(row["histogram"])[-1] == 10 and sum(row["histogram"]) == 10
            assert row["variance"] == 0.0

    def test_two_values_two_bins(self):
        d = PredictionDistribution.from_samples(np.array([[0.15, 0.85], [0.75, 0.25]] * 3))
        rows = per_class_report(d)
        assert sum(1 for c in rows[0]["histogram"] if c) == 2

    def test_uniform_histogram(self):
        M = 10**4
        u = np.random.default_rng(0).uniform(size=M)
        d = PredictionDistribution.from_samples(np.c_[u, 1 - u])
        counts = np.array(per_class_report(d)[0]["histogram"])
        assert np.all(np.abs(counts - M / 10) <= 0.1 * M / 10)

    def test_schema(self):
        d = PredictionDistribution.from_samples(np.array([[0.5, 0.5], [0.4, 0.6]]))
        row = per_class_report(d, ["x", "y"])[1]
        assert set(row) == {"class", "mean", "variance", "min", "max", "histogram", "bin_edges"}
        assert row["class"] == "y" and len(row["histogram"]) == 10 and len(row["bin_edges"]) == 11

    def test_name_count_mismatch(self):
        d = PredictionDistribution.from_samples(np.array([[0.5, 0.5]]))
        with pytest.raises(ValueError):
            per_class_report(d, ["only"])
