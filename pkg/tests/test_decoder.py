import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import logit

import builders
import oracle
from crhmm.covariates import CovariateScheme, Dimension
from crhmm.decoder import (assignment_stability, conditional_register_probability, decoded_population,
                           marginal_register_probability, mixture_marginal, no_observation_probability,
                           path_log_score, uncertain_sightings, viterbi_batch, viterbi_path)
from crhmm.emission import EMIGRATED, EmissionCoefficients
from crhmm.errors import DecodingError, DomainError
from crhmm.model import ModelSpec
from crhmm.population import overcoverage, population_series, population_size
from crhmm.records import Record, RecordBatch
from crhmm.statespace import general3, sweden8

seeds = st.integers(0, 2**32 - 1)


def instance(seed, preset, quantized=False):
    rng = np.random.default_rng(seed)
    spec = builders.random_spec(rng, preset, n_years=int(rng.integers(1, 6)))
    if quantized:
        # coarse parameter grid: exact ties between paths become common
        x = rng.choice([-math.log(2), 0.0, math.log(2)], size=spec.n_params)
    else:
        x = builders.random_params(spec, rng)
    rec = builders.random_record(spec, rng, simulate_from=x if rng.random() < 0.7 else None)
    return spec, x, rec


def feasible(spec, x, rec):
    return math.isfinite(oracle.brute_loglik(spec, x, rec))


class TestViterbi:
    @settings(max_examples=220, deadline=None)
    @given(seeds, st.sampled_from(["general3", "sweden8"]))
    def test_matches_exhaustive_search(self, seed, preset):
        spec, x, rec = instance(seed, preset)
        if not feasible(spec, x, rec):
            with pytest.raises(DecodingError):
                viterbi_path(spec, x, rec)
            return
        omega = oracle.brute_omega(spec, x, rec)
        path, best = oracle.brute_viterbi(spec, x, rec, omega)
        got = viterbi_path(spec, x, rec, omega)
        assert got.state_ids == path
        assert got.log_score == pytest.approx(best, rel=1e-10, abs=1e-10)
        assert path_log_score(spec, x, rec, got.state_ids, omega) == pytest.approx(best, rel=1e-10, abs=1e-10)

    @settings(max_examples=120, deadline=None)
    @given(seeds, st.sampled_from(["general3", "sweden8"]))
    def test_ties_break_toward_lowest_state(self, seed, preset):
        spec, x, rec = instance(seed, preset, quantized=True)
        if not feasible(spec, x, rec):
            return
        omega = oracle.brute_omega(spec, x, rec)
        assert viterbi_path(spec, x, rec, omega).state_ids == oracle.brute_viterbi(spec, x, rec, omega)[0]

    @settings(max_examples=10, deadline=None)
    @given(seeds)
    def test_beats_random_paths(self, seed):
        rng = np.random.default_rng(seed)
        spec = builders.random_spec(rng, "sweden8", n_years=8)
        x = builders.random_params(spec, rng)
        rec = builders.random_record(spec, rng, simulate_from=x)
        best = viterbi_path(spec, x, rec)
        permitted = spec.state_space.permitted
        T = len(rec.codes)
        scores = []
        for _ in range(1000):
            path = [1]
            for _ in range(T - 1):
                path.append(int(rng.choice(np.flatnonzero(permitted[path[-1] - 1]))) + 1)
            scores.append(path_log_score(spec, x, rec, path))
        assert best.log_score >= max(scores) - 1e-12
        assert best.log_score == pytest.approx(path_log_score(spec, x, rec, best.state_ids), abs=1e-10)

    def test_decoded_path_is_feasible(self):
        spec, x, recs, _ = builders.study_data(30, 4)
        batch = RecordBatch.from_records(recs, spec)
        dec = viterbi_batch(batch, x)
        permitted = spec.state_space.permitted
        for tr in dec.trajectories():
            assert tr.state_ids[0] == 1
            for a, b in zip(tr.state_ids, tr.state_ids[1:]):
                assert permitted[a - 1, b - 1]
            assert math.isfinite(tr.log_score)

    def test_forced_chain(self):
        spec = ModelSpec(general3(), CovariateScheme(()), ("r0",), first_year=0, n_years=4)
        x = spec.from_named({"survival:intercept": 40.0, "emigration:intercept": 40.0,
                             "reimmigration:intercept": -40.0})
        assert viterbi_path(spec, x, Record("a", 0, {}, [0, 0, 0, 0])).state_ids == (1, 2, 2, 2)

    @pytest.mark.parametrize("seed", range(5))
    def test_seen_every_year_stays_present(self, seed):
        rng = np.random.default_rng(seed)
        spec = ModelSpec(sweden8(), CovariateScheme(()), ("a", "b"), fp_patterns=(2,), first_year=0, n_years=6)
        x = spec.from_named({"survival:intercept": rng.uniform(2, 5), "emigration:intercept": rng.uniform(-4, 0),
                             "emission:a": rng.uniform(0, 2), "emission:b": rng.uniform(-1, 1),
                             "false_positive:b:intercept": rng.uniform(-3, 0)})
        rec = Record("a", 0, {}, [1, 3, 1, 1, 3, 1])
        assert viterbi_path(spec, x, rec).state_ids == (1,) * 6

    def test_impossible_observation_names_record(self):
        spec = ModelSpec(general3(), CovariateScheme(()), ("r0",), first_year=0, n_years=2)
        with pytest.raises(DecodingError, match="odd"):
            viterbi_path(spec, spec.from_named({}), Record("odd", 0, {}, [1, EMIGRATED.encode(1)]))

    def test_group_is_posterior_argmax(self):
        spec = ModelSpec(general3(), CovariateScheme(()), ("r0",), n_groups=2, group_specific=("r0",),
                         first_year=0, n_years=3)
        x = spec.from_named({"emission:r0[g1]": 3.0, "emission:r0[g2]": -3.0})
        seen = viterbi_path(spec, x, Record("a", 0, {}, [1, 1, 1]))
        unseen = viterbi_path(spec, x, Record("b", 0, {}, [0, 0, 0]))
        assert seen.group == 1 and unseen.group == 2


class TestPopulation:
    def fixture(self):
        spec = ModelSpec(sweden8(), CovariateScheme(()), ("r0",), first_year=2003, n_years=3)
        states = np.array([[0, 0, 4], [-1, 0, 6], [0, 1, 7]])  # 0-based ids, -1 before entry
        return spec, states

    def test_hand_tally(self):
        spec, states = self.fixture()
        assert population_size(states, spec, 2003) == 2
        assert population_size(states, spec, 2004) == 3  # recorded death still present in its year
        assert population_size(states, spec, 2005) == 1  # returned counts as present
        series = population_series(states, spec)
        np.testing.assert_array_equal(series.entered, [2, 3, 3])
        np.testing.assert_array_equal(series.abroad_unknown, [0, 0, 1])
        np.testing.assert_array_equal(series.dead, [0, 0, 1])

    def test_counting_rule_is_configurable(self):
        spec, states = self.fixture()
        assert population_size(states, spec, 2004, present_roles={"present"}) == 2

    def test_weights(self):
        spec, states = self.fixture()
        assert population_size(states, spec, 2003, weights=[3, 1, 2]) == 5

    def test_out_of_window(self):
        spec, states = self.fixture()
        with pytest.raises(DomainError):
            population_size(states, spec, 2010)

    def test_first_year_equals_entrants(self):
        spec, x, recs, _ = builders.study_data(40, 2)
        dec = viterbi_batch(RecordBatch.from_records(recs, spec), x)
        assert decoded_population(dec, spec.first_year) == 40
        series = dec.population()
        np.testing.assert_array_equal(series.entered, 40 * np.arange(1, spec.n_years + 1))


class TestOvercoverage:
    def test_examples(self):
        assert overcoverage(100.0, 100.0) == 0.0
        assert overcoverage(90.0, 100.0) == pytest.approx(10.0)

    def test_round_trip(self):
        estimate, oc = 58_466.61, 6.620
        rtb = estimate / (1 - oc / 100)
        assert rtb == pytest.approx(62_611.4, abs=0.1)
        assert overcoverage(estimate, rtb) == pytest.approx(6.620, abs=1e-3)

    @settings(max_examples=200, deadline=None)
    @given(st.floats(0, 1e7), st.floats(0, 1e7), st.floats(1, 1e7))
    def test_antitone(self, a, b, rtb):
        lo, hi = sorted((a, b))
        assert overcoverage(lo, rtb) >= overcoverage(hi, rtb)

    @pytest.mark.parametrize("rtb", [0.0, -5.0])
    def test_domain(self, rtb):
        with pytest.raises(DomainError):
            overcoverage(1.0, rtb)


class TestMarginals:
    def test_single_register(self):
        c = EmissionCoefficients(np.array([[0.4]]), np.zeros(0), np.zeros((1, 1, 0)))
        assert marginal_register_probability(c, 0, np.zeros(0), 0) == pytest.approx(1 / (1 + math.exp(-0.4)))

    def test_uniform(self):
        c = EmissionCoefficients(np.zeros((1, 3)), np.zeros(3), np.zeros((1, 3, 0)))
        for k in range(3):
            assert marginal_register_probability(c, 0, np.zeros(0), k) == pytest.approx(0.5, abs=1e-15)

    def test_register_out_of_range(self):
        c = EmissionCoefficients(np.zeros((1, 2)), np.zeros(1), np.zeros((1, 2, 0)))
        with pytest.raises(DomainError):
            marginal_register_probability(c, 0, np.zeros(0), 2)

    def test_mixture_examples(self):
        assert mixture_marginal(1.0, [0.7, 0.1]) == 0.7
        assert mixture_marginal(0.5, [0.2, 0.4]) == pytest.approx(0.3)
        assert mixture_marginal([0.2, 0.3, 0.5], [1.0, 0.0, 0.5]) == pytest.approx(0.45)
        with pytest.raises(DomainError):
            mixture_marginal([0.5, 0.6], [0.1, 0.2])

    def test_published_mixture_marginals(self):
        assert mixture_marginal(0.523, [0.946, 0.743]) == pytest.approx(0.849, abs=0.005)
        assert mixture_marginal(0.523, [0.827, 0.168]) == pytest.approx(0.513, abs=0.005)

    @settings(max_examples=100, deadline=None)
    @given(seeds, st.integers(1, 10))
    def test_no_observation_complements_any_register(self, seed, K):
        rng = np.random.default_rng(seed)
        c = EmissionCoefficients(rng.normal(0, 2, (1, K)), rng.normal(0, 1, K * (K - 1) // 2), np.zeros((1, K, 0)))
        x = np.zeros(0)
        p = np.exp(c.log_probabilities(0, x))
        at_least_one = sum(p[j] for j in range(1, 1 << K))
        assert no_observation_probability(c, 0, x) == pytest.approx(1 - at_least_one, abs=1e-12)
        for k in range(K):
            m = marginal_register_probability(c, 0, x, k)
            assert 0.0 <= m <= 1.0
            assert m == pytest.approx(sum(p[j] for j in range(1 << K) if j >> k & 1), abs=1e-12)


class TestConditional:
    scheme = CovariateScheme((Dimension("sex", ("male", "female")),))

    def coeffs(self):
        # K = 1, main effect 0.2, female effect 0.9
        return EmissionCoefficients(np.array([[0.2]]), np.zeros(0), np.array([[[0.9]]]))

    def test_hand_ratio(self):
        c = self.coeffs()
        assert conditional_register_probability(c, 0, self.scheme, 0, "sex", "female") == \
            pytest.approx(1 / (1 + math.exp(-1.1)))
        assert conditional_register_probability(c, 0, self.scheme, 0, "sex", "male") == \
            pytest.approx(1 / (1 + math.exp(-0.2)))

    def test_single_category_is_unconditional(self):
        scheme = CovariateScheme((Dimension("region", ("all",)),))
        c = EmissionCoefficients(np.array([[0.3, -0.4]]), np.array([0.2]), np.zeros((1, 2, 0)))
        for k in range(2):
            assert conditional_register_probability(c, 0, scheme, k, "region", "all") == \
                pytest.approx(marginal_register_probability(c, 0, np.zeros(0), k), rel=1e-14)

    def test_weighted_profiles(self):
        scheme = CovariateScheme((Dimension("sex", ("male", "female")), Dimension("old", ("no", "yes"))))
        c = EmissionCoefficients(np.array([[0.2]]), np.zeros(0), np.array([[[0.9, -1.0]]]))
        w = [1, 3, 2, 5]  # profile order: (male,no), (male,yes), (female,no), (female,yes)
        got = conditional_register_probability(c, 0, scheme, 0, "sex", "female", w)
        p = [1 / (1 + math.exp(-(0.2 + 0.9))), 1 / (1 + math.exp(-(0.2 + 0.9 - 1.0)))]
        assert got == pytest.approx((2 * p[0] + 5 * p[1]) / 7)
        assert 0 <= got <= 1

    def test_empty_subset(self):
        with pytest.raises(DomainError):
            conditional_register_probability(self.coeffs(), 0, self.scheme, 0, "sex", "female", [1, 0])


class TestReports:
    def test_uncertain_sightings(self):
        spec, x, recs, _ = builders.study_data(80, 6)
        batch = RecordBatch.from_records(recs, spec)
        dec = viterbi_batch(batch, x)
        rows = uncertain_sightings(dec)
        total = rows[0]
        assert total["breakdown"] == "all"
        fp_only = int(np.sum((batch.codes >= 0) & (batch.flag == 0) & (batch.pattern == 4)))
        assert total["person_years"] == fp_only > 0
        for r in rows:
            assert r["present_share"] + r["absent_share"] == pytest.approx(1.0)
        for dim in ("sex", "run_length"):
            assert sum(r["person_years"] for r in rows if r["breakdown"] == dim) == fp_only

    def test_no_false_positive_patterns(self):
        spec = ModelSpec(general3(), CovariateScheme(()), ("r0",), first_year=0, n_years=2)
        dec = viterbi_batch(RecordBatch.from_records([Record("a", 0, {}, [1, 0])], spec), spec.from_named({}))
        assert uncertain_sightings(dec) == []

    def test_assignment_stability(self):
        A = np.array([[0, 1, 0, -1]] * 9 + [[1, 1, 0, -1]])
        out = assignment_stability(A)
        assert out["individuals"] == 3
        assert out["consistent_share"] == pytest.approx(1.0)
        B = np.array([[0, 1]] * 8 + [[1, 1]] * 2)
        assert assignment_stability(B)["inconsistent_share"] == pytest.approx(0.5)


def test_batch_matches_single_record_decoding():
    spec, x, recs, _ = builders.study_data(15, 8)
    dec = viterbi_batch(RecordBatch.from_records(recs, spec), x)
    for i in range(0, len(recs), 13):
        assert dec.trajectory(i).state_ids == viterbi_path(spec, x, recs[i]).state_ids


def test_tiny_exhaustive_sweep():
    """Every code sequence of a two-year one-register instance decodes like the oracle."""
    spec = ModelSpec(sweden8(), CovariateScheme(()), ("r0",), fp_patterns=(1,), first_year=0, n_years=2)
    x = spec.from_named({"survival:intercept": 1.0, "emigration:intercept": -0.5, "emission:r0": logit(0.7),
                         "false_positive:r0:intercept": -1.0})
    for codes in itertools.product(range(8), repeat=2):
        rec = Record("a", 0, {}, list(codes))
        if not feasible(spec, x, rec):
            continue
        assert viterbi_path(spec, x, rec).state_ids == oracle.brute_viterbi(spec, x, rec)[0]
