import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import logit

from crhmm.blb import (MAX_FAILURE_SHARE, PARAMETERS, POPULATION, PROBABILITIES, BlbOptions, BlbPlan,
                       aggregate, cell_weights, load_log, make_subsets, read_aggregate,
                       resample_weights, run_blb)
from crhmm.covariates import CovariateScheme
from crhmm.errors import BlbError, ConfigError
from crhmm.estimator import FitOptions, fit_mle
from crhmm.model import ModelSpec
from crhmm.records import RecordBatch
from crhmm.simulator import SimulationConfig, simulate_population
from crhmm.statespace import general3


class TestSubsets:
    def test_exact_partition(self):
        blocks = make_subsets(BlbPlan(n=100, s=10, r=1, seed=3))
        assert [len(b) for b in blocks] == [10] * 10
        assert np.array_equal(np.sort(np.concatenate(blocks)), np.arange(100))

    def test_national_partition_sizes(self):
        blocks = make_subsets(BlbPlan(n=721_854, s=20, r=1, seed=0))
        assert {len(b) for b in blocks} == {36_092, 36_093}
        assert sum(len(b) for b in blocks) == 721_854

    def test_deterministic(self):
        a = make_subsets(BlbPlan(n=500, s=7, r=1, seed=11))
        b = make_subsets(BlbPlan(n=500, s=7, r=1, seed=11))
        c = make_subsets(BlbPlan(n=500, s=7, r=1, seed=12))
        assert all(np.array_equal(x, y) for x, y in zip(a, b))
        assert not all(np.array_equal(x, y) for x, y in zip(a, c))

    def test_short_blocks_are_disjoint(self):
        blocks = make_subsets(BlbPlan(n=1000, s=4, r=1, b=100, seed=1))
        assert [len(b) for b in blocks] == [100] * 4
        assert len(np.unique(np.concatenate(blocks))) == 400

    def test_without_replacement(self):
        plan = BlbPlan(n=10_000, s=3, r=1, gamma=0.6, mode="without_replacement", seed=2)
        assert plan.b == math.ceil(10_000 ** 0.6)
        for blk in make_subsets(plan):
            assert len(np.unique(blk)) == plan.b and blk.min() >= 0 and blk.max() < 10_000

    def test_size_mismatch(self):
        with pytest.raises(ConfigError, match="n=100"):
            make_subsets(BlbPlan(n=100, s=2, r=1), 99)

    @pytest.mark.parametrize("kwargs, message", [
        (dict(n=100, s=10, r=1, b=11), "s\\*b <= n"),
        (dict(n=100, s=2, r=1, gamma=0.4), "gamma"),
        (dict(n=100, s=2, r=1, mode="bag"), "mode"),
        (dict(n=100, s=2, r=0), ">= 1"),
        (dict(n=100, s=2, r=1, mode="without_replacement"), "b or gamma"),
        (dict(n=100, s=2, r=1, b=101, mode="without_replacement"), "1..n"),
    ])
    def test_plan_errors(self, kwargs, message):
        with pytest.raises(ConfigError, match=message):
            BlbPlan(**kwargs)


class TestWeights:
    def test_single_cell(self):
        assert resample_weights(1, 537, 0).tolist() == [537]

    @settings(max_examples=200, deadline=None)
    @given(st.integers(1, 500), st.integers(0, 5000), st.integers(0, 2**32 - 1))
    def test_sum_is_n(self, b, extra, seed):
        w = resample_weights(b, b + extra, seed)
        assert w.sum() == b + extra and w.min() >= 0 and len(w) == b

    def test_poisson_limit(self):
        w = resample_weights(100_000, 100_000, 5)
        assert abs(w.mean() - 1.0) <= 0.02
        assert abs(w.var() - 1.0) < 0.02
        assert abs(np.mean(w == 0) - math.exp(-1)) < 0.01

    def test_expected_weight(self):
        plan = BlbPlan(n=20_000, s=4, r=200, b=500, seed=9)
        mean = np.mean([cell_weights(plan, 1, k).mean() for k in range(plan.r)])
        assert mean == pytest.approx(plan.n / plan.b, rel=0.01)

    def test_cells_are_independent_and_reproducible(self):
        plan = BlbPlan(n=1000, s=2, r=3, seed=4)
        assert np.array_equal(cell_weights(plan, 1, 2), cell_weights(plan, 1, 2))
        assert not np.array_equal(cell_weights(plan, 1, 2), cell_weights(plan, 0, 2))
        assert not np.array_equal(cell_weights(plan, 1, 2), cell_weights(plan, 1, 1))

    def test_invalid(self):
        with pytest.raises(ConfigError):
            resample_weights(10, 5)


class TestAggregate:
    def test_point_estimate_is_mean_of_subset_means(self):
        rng = np.random.default_rng(0)
        parts = [rng.normal(j, 1, (25, 3)) for j in range(4)]
        iv = aggregate(parts, ["a", "b", "c"])
        np.testing.assert_allclose(iv.estimate, np.mean([p.mean(0) for p in parts], axis=0), rtol=1e-14)
        np.testing.assert_allclose(iv.lower, np.mean([np.percentile(p, 2.5, axis=0) for p in parts], axis=0))
        np.testing.assert_allclose(iv.se, np.mean([p.std(0, ddof=1) for p in parts], axis=0))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_exchangeable_in_subsets(self, seed):
        rng = np.random.default_rng(seed)
        parts = [rng.normal(0, 10 ** rng.uniform(-3, 3), (int(rng.integers(2, 9)), 4)) for _ in range(6)]
        a = aggregate(parts, list("abcd"))
        b = aggregate([parts[i] for i in rng.permutation(6)], list("abcd"))
        for f in ("estimate", "se", "lower", "upper"):
            assert getattr(a, f).tolist() == getattr(b, f).tolist()

    def test_nothing_to_aggregate(self):
        with pytest.raises(BlbError):
            aggregate([np.zeros((0, 2))], ["a", "b"])


@pytest.fixture(scope="module")
def small():
    spec = ModelSpec(general3(), CovariateScheme(()), ("a", "b"), first_year=0, n_years=5)
    truth = spec.from_named({"survival:intercept": logit(0.95), "emigration:intercept": logit(0.1),
                             "reimmigration:intercept": logit(0.3), "emission:a": 1.0, "emission:b": 0.3})
    recs, _ = simulate_population(SimulationConfig(spec, truth, [80] * 5, seed=21))
    return RecordBatch.from_records(recs, spec)


OPTS = BlbOptions(fit=FitOptions(n_starts=1), requests=(PARAMETERS, PROBABILITIES, POPULATION))


class TestRun:
    def test_degenerate_plan_is_the_mle(self, small):
        plan = BlbPlan(n=len(small), s=1, r=1, seed=0)
        res = run_blb(plan, small, OPTS, weights_fn=lambda j, k, size: np.ones(size))
        mle = fit_mle(small, options=FitOptions(n_starts=1, standard_errors=False))
        np.testing.assert_allclose(res.aggregated[PARAMETERS].estimate, mle.estimate, atol=1e-4)
        iv = res.aggregated[PARAMETERS]
        assert np.array_equal(iv.lower, iv.estimate) and np.array_equal(iv.upper, iv.estimate)
        assert np.all(iv.se == 0)

    def test_deterministic(self, small):
        plan = BlbPlan(n=len(small), s=2, r=4, seed=5)
        a = run_blb(plan, small, OPTS)
        b = run_blb(plan, small, OPTS)
        assert a.to_json() == b.to_json()
        assert len(a.ok_cells()) == 8

    def test_intervals_bracket_estimates(self, small):
        res = run_blb(BlbPlan(n=len(small), s=2, r=6, seed=1), small, OPTS)
        for iv in res.aggregated.values():
            ok = np.isfinite(iv.lower)
            assert np.all(iv.lower[ok] <= iv.upper[ok])
        assert res.aggregated[POPULATION].labels == [str(y) for y in range(5)]

    def test_resume_after_torn_write(self, small, tmp_path):
        plan = BlbPlan(n=len(small), s=2, r=3, seed=8)
        full = run_blb(plan, small, OPTS, log_path=tmp_path / "full.jsonl")
        lines = (tmp_path / "full.jsonl").read_text().splitlines(keepends=True)
        part = tmp_path / "part.jsonl"
        part.write_text("".join(lines[:4]) + lines[4][: len(lines[4]) // 2])
        resumed = run_blb(plan, small, OPTS, log_path=part, resume=True)
        assert resumed.to_json() == full.to_json()
        docs = [json.loads(line) for line in part.read_text().splitlines()]
        assert len(docs) == len(lines)
        assert sorted((d["subset"], d["resample"]) for d in docs if d["kind"] == "resample") == \
            [(j, k) for j in range(2) for k in range(3)]
        rebuilt = load_log(part, small.spec)
        assert rebuilt.to_json() == full.to_json()

    def test_resume_with_other_plan_is_refused(self, small, tmp_path):
        log_path = tmp_path / "log.jsonl"
        run_blb(BlbPlan(n=len(small), s=2, r=1, seed=8), small, OPTS, log_path=log_path)
        with pytest.raises(ConfigError, match="plan"):
            run_blb(BlbPlan(n=len(small), s=2, r=1, seed=9), small, OPTS, log_path=log_path, resume=True)

    def test_failures_are_excluded(self, small):
        plan = BlbPlan(n=len(small), s=2, r=5, seed=3)

        def weights(j, k, size):
            w = cell_weights(plan, j, k, size).astype(float)
            if k == 0:
                w[0] = -1.0  # rejected by the likelihood
            return w

        res = run_blb(plan, small, OPTS, weights_fn=weights)
        assert res.failures() == {0: 1, 1: 1}
        assert len(res.ok_cells()) == 8
        assert math.floor(MAX_FAILURE_SHARE * plan.r) == 1

    def test_too_many_failures_abort(self, small):
        plan = BlbPlan(n=len(small), s=2, r=5, seed=3)

        def weights(j, k, size):
            w = np.ones(size)
            if k < 2:
                w[0] = np.nan
            return w

        with pytest.raises(BlbError, match="subset 0: 2 of 5"):
            run_blb(plan, small, OPTS, weights_fn=weights)

    def test_workers_agree(self, small):
        plan = BlbPlan(n=len(small), s=2, r=3, seed=2)
        a = run_blb(plan, small, OPTS)
        b = run_blb(plan, small, BlbOptions(fit=FitOptions(n_starts=1), requests=OPTS.requests, workers=3))
        np.testing.assert_allclose(a.aggregated[PARAMETERS].estimate, b.aggregated[PARAMETERS].estimate,
                                   rtol=1e-6, atol=1e-6)

    def test_result_file_round_trip(self, small, tmp_path):
        res = run_blb(BlbPlan(n=len(small), s=2, r=2, seed=6), small, OPTS)
        path = tmp_path / "blb.json"
        path.write_text(res.to_json())
        plan, agg = read_aggregate(path)
        assert plan == res.plan
        assert agg[PARAMETERS].estimate.tolist() == res.aggregated[PARAMETERS].estimate.tolist()

    def test_unknown_request(self):
        with pytest.raises(ConfigError, match="derived"):
            BlbOptions(requests=("weather",))
