import itertools
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import digamma

from abcdr.core import ReferenceTable, WeightedSample, compute_scales
from abcdr.models import GaussianToyConfig
from abcdr.sampler import SimulatorSpec, generate_table, rejection_abc
from abcdr.selection import (SelectionResult, SubsetMask, closest_datasets,
                             epsilon_sufficiency_search, epsilon_sufficiency_test,
                             information_criterion, information_value, knn_entropy,
                             knn_quantile_distances, log_unit_ball_volume, mean_rsse,
                             minimum_entropy_mask, n_regression_params, rsse,
                             subset_search)


@pytest.fixture(scope="module")
def toy3():
    """One sufficient and three noise statistics."""
    return generate_table(SimulatorSpec("gaussian-toy", model_constants={
        "k_noise": 3, "include_median": False}, seed=21), 10_000)


@pytest.fixture(scope="module")
def toy_dup():
    t = generate_table(SimulatorSpec("gaussian-toy", model_constants={
        "k_noise": 2, "include_median": False}, seed=22), 20_000)
    S = np.column_stack([t.stats, t.stats[:, 0]])
    return t.with_stats(S, t.stat_names + ("copy",))


class TestMask:
    def test_round_trips(self):
        m = SubsetMask.from_bitstring("0110")
        assert m.indices.tolist() == [1, 2] and m.size == 2 and m.p == 4
        assert SubsetMask.from_indices([1, 2], 4) == m
        assert m.with_index(0, True).bitstring == "1110"
        assert SubsetMask.full(3).bitstring == "111"


class TestInformationCriteria:
    def test_parameter_count(self):
        assert n_regression_params(1, 2) == 3
        assert n_regression_params(3, 4) == 15

    def test_hand_values(self):
        assert information_value(100, [0.5], 3, "AIC") == pytest.approx(-63.31, abs=0.01)
        assert information_value(100, [0.5], 3, "BIC") == pytest.approx(-55.50, abs=0.01)

    def test_aicc_verbatim_and_conventional(self):
        base = 100 * math.log(0.5)
        corr = 3 * 4 / (100 - 3 - 1)
        assert information_value(100, [0.5], 3, "AICc") == pytest.approx(base + 2 * corr)
        assert information_value(100, [0.5], 3, "AICc", conventional_aicc=True) == \
            pytest.approx(base + 6 + 2 * corr)

    def test_unknown_variant(self):
        with pytest.raises(ValueError):
            information_value(10, [1.0], 2, "XIC")

    def test_aic_minus_bic_identity(self, toy3):
        obs = toy3.stats[3]
        for mask in ([0], [0, 2], [1, 2, 3]):
            a = information_criterion(toy3, obs, mask, variant="AIC", exclude=3)
            b = information_criterion(toy3, obs, mask, variant="BIC", exclude=3)
            d = n_regression_params(1, len(mask))
            assert a.extras["d"] == d
            assert a.value - b.value == pytest.approx(d * (2 - math.log(a.n_eff)), abs=1e-9)

    def test_n_eff_constant_across_masks(self, toy3):
        obs = toy3.stats[0]
        n = {information_criterion(toy3, obs, m, exclude=0).n_eff
             for m in ([0], [1], [0, 1, 2, 3], [2, 3])}
        assert n == {100}

    def test_singular_subset_scores_inf(self):
        rng = np.random.default_rng(0)
        th = rng.normal(size=(500, 1))
        s = np.column_stack([th[:, 0] + rng.normal(size=500), np.zeros(500)])
        s[0, 1] = 1.0   # the constant column has one off value far from acceptance
        t = ReferenceTable(th, s, ["t"], ["a", "b"])
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            score = information_criterion(t, t.stats[5], [0, 1], 0.05, exclude=5)
        assert score.value == math.inf and score.extras["singular"]

    def _bic_choices(self, toy3, n_rows):
        sc = compute_scales(toy3)
        rows = np.random.default_rng(1).choice(toy3.n, n_rows, replace=False)
        return [subset_search(lambda m: information_criterion(
            toy3, toy3.stats[r], m.indices, variant="BIC", exclude=r, scales=sc),
            toy3.p).best_mask for r in rows]

    def test_bic_always_keeps_sufficient(self, toy3):
        assert all(m.include[0] for m in self._bic_choices(toy3, 40))

    @pytest.mark.xfail(strict=True, reason="every mask containing the sample mean has the "
                       "same residual variance in this toy, so BIC differences are "
                       "dominated by accepted-set sampling noise; see decisions ledger")
    def test_bic_selects_sufficient_alone(self, toy3):
        hits = sum(m.bitstring == "1000" for m in self._bic_choices(toy3, 100))
        assert hits >= 90


class TestEpsilonSufficiency:
    def test_duplicate_rejected(self, toy_dup):
        res = epsilon_sufficiency_test(toy_dup, toy_dup.stats[4], [0], 3, exclude=4)
        assert not res.accepted
        assert np.allclose(res.ratios, 1.0)

    def test_sufficient_added_to_noise(self):
        t = generate_table(SimulatorSpec("gaussian-toy", seed=5), 20_000)
        sc = compute_scales(t)
        rows = np.random.default_rng(0).choice(t.n, 100, replace=False)
        hits = sum(epsilon_sufficiency_test(t, t.stats[r], [2], 0, scales=sc,
                                            exclude=r).accepted for r in rows)
        assert hits >= 95

    def test_infinite_threshold_rejects(self, toy_dup):
        res = epsilon_sufficiency_test(toy_dup, toy_dup.stats[1], [1], 0,
                                       threshold_multiplier=np.inf, exclude=1)
        assert not res.accepted

    def test_empty_base_uses_prior(self, toy_dup):
        res = epsilon_sufficiency_test(toy_dup, toy_dup.stats[1], [], 0, exclude=1)
        assert res.accepted

    def test_univariate_only(self):
        t = generate_table(SimulatorSpec("stereology", seed=1), 200)
        with pytest.raises(ValueError, match="univariate"):
            epsilon_sufficiency_test(t, t.stats[0], [0], 1)

    def test_candidate_in_base(self, toy_dup):
        with pytest.raises(ValueError):
            epsilon_sufficiency_test(toy_dup, toy_dup.stats[0], [0], 0)

    def test_search_keeps_mean(self, toy_dup):
        res = epsilon_sufficiency_search(toy_dup, toy_dup.stats[9], exclude=9)
        assert res.search_kind == "stepwise"
        assert 0 in res.best_mask.indices or 3 in res.best_mask.indices


class TestEntropy:
    def test_constant_term(self):
        assert log_unit_ball_volume(1) == pytest.approx(math.log(2))
        assert log_unit_ball_volume(2) == pytest.approx(math.log(math.pi))

    def test_uniform_weights_give_kth_neighbour(self):
        pts = np.array([[0.0], [1.0], [3.0], [6.0], [10.0], [15.0]])
        d = knn_quantile_distances(pts, np.full(6, 1 / 6), k=2)
        # second-nearest neighbour distances by hand
        assert d.tolist() == [3.0, 2.0, 3.0, 4.0, 5.0, 9.0]

    def test_unweighted_equals_brute_force(self, rng):
        pts = rng.normal(size=(100, 2))
        D = np.sqrt(((pts[:, None] - pts[None]) ** 2).sum(-1))
        kth = np.sort(D, axis=1)[:, 4]
        ref = (log_unit_ball_volume(2) - digamma(4) + math.log(100)
               + 2 * np.mean(np.log(kth)))
        assert knn_entropy(pts, 4) == pytest.approx(ref, abs=1e-10)
        assert knn_entropy(pts, 4, weights=np.full(100, 0.01)) == pytest.approx(ref, abs=1e-10)

    def test_gaussian_oracle(self, rng):
        e = knn_entropy(rng.standard_normal((10_000, 1)), 4)
        assert abs(e - 0.5 * math.log(2 * math.pi * math.e)) < 0.05

    def test_duplicates_floored(self):
        pts = np.array([[0.0], [0.0], [0.0], [0.0], [0.0], [1.0], [2.0]])
        with pytest.warns(RuntimeWarning):
            assert np.isfinite(knn_entropy(pts, 4))

    def test_weighted_sample_input(self, rng):
        th = rng.normal(size=(50, 1))
        s = WeightedSample(th, np.full(50, 0.02), np.arange(50))
        assert knn_entropy(s) == pytest.approx(knn_entropy(th))

    def test_too_small(self):
        with pytest.raises(ValueError):
            knn_entropy(np.zeros((4, 1)) + np.arange(4)[:, None], 4)


class TestRSSE:
    def test_hand_value(self):
        s = WeightedSample(np.array([[1.0], [2.0], [3.0]]), np.full(3, 1 / 3), [0, 1, 2])
        assert rsse(s, [2.0], [1.0]) == pytest.approx(math.sqrt(2 / 3))

    def test_zero(self):
        s = WeightedSample(np.full((4, 1), 5.0), np.full(4, 0.25), np.arange(4))
        assert rsse(s, [5.0]) == 0.0

    def test_scale_cancellation(self, rng):
        th = rng.normal(size=(10, 2))
        s1 = WeightedSample(th, np.full(10, 0.1), np.arange(10))
        th2 = th.copy()
        th2[:, 0] *= 2
        s2 = WeightedSample(th2, np.full(10, 0.1), np.arange(10))
        assert rsse(s1, [0, 0], [2.0, 1.0]) == pytest.approx(rsse(s2, [0, 0], [4.0, 1.0]))


class TestMeanRSSE:
    def test_single_pseudo_observation_positive(self, toy3):
        v = mean_rsse(toy3, toy3.stats[0], [0], n_star=1, me_mask=[0], exclude=0)
        assert v > 0

    def test_informative_beats_noise(self, toy3):
        sc = compute_scales(toy3)
        rows = np.random.default_rng(2).choice(toy3.n, 100, replace=False)
        wins = 0
        for r in rows:
            pseudo = closest_datasets(toy3, toy3.stats[r], [0], 20, scales=sc,
                                      exclude_rows=(r,))
            good = mean_rsse(toy3, toy3.stats[r], [0], scales=sc, pseudo_rows=pseudo)
            bad = mean_rsse(toy3, toy3.stats[r], [1], scales=sc, pseudo_rows=pseudo)
            wins += good < bad
        assert wins >= 95

    def test_deterministic(self, toy3):
        a = mean_rsse(toy3, toy3.stats[7], [0, 1], n_star=10, exclude=7)
        b = mean_rsse(toy3, toy3.stats[7], [0, 1], n_star=10, exclude=7)
        assert a == b

    def test_minimum_entropy_prefers_sufficient(self, toy3):
        res = minimum_entropy_mask(toy3, toy3.stats[3], exclude=3)
        assert 0 in res.best_mask.indices
        assert res.criterion_id == "entropy" and len(res.trace) == 15

    def test_closest_excludes(self, toy3):
        rows = closest_datasets(toy3, toy3.stats[3], [0], 5, exclude_rows=(3,))
        assert 3 not in rows and len(rows) == 5


class TestSubsetSearch:
    def test_count_scorer(self):
        res = subset_search(lambda m: m.size, 2)
        assert len(res.trace) == 3 and res.best_mask.size == 1
        assert res.best_mask.bitstring == "01"   # lexicographic tie-break

    def test_trace_length_p6(self):
        assert len(subset_search(lambda m: 0.0, 6).trace) == 63

    def test_exhaustive_limit(self):
        with pytest.raises(ValueError):
            subset_search(lambda m: 0.0, 4, "exhaustive", max_exhaustive_p=3)
        with pytest.raises(ValueError):
            subset_search(lambda m: 0.0, 3, "sideways")

    def test_backward(self):
        target = {0, 2}
        res = subset_search(lambda m: len(set(m.indices) ^ target), 5, "backward")
        assert set(res.best_mask.indices) == target

    def test_csv(self, tmp_path):
        res = subset_search(lambda m: float(m.size), 2)
        path = tmp_path / "trace.csv"
        res.to_csv(path)
        lines = path.read_text().splitlines()
        assert lines[0] == "mask,criterion,score" and len(lines) == 4


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=2, max_size=10))
def test_forward_finds_optimum_on_additive_scorers(costs):
    p = len(costs)
    scorer = lambda m: float(sum(costs[j] for j in m.indices))
    ex = subset_search(scorer, p, "exhaustive")
    fw = subset_search(scorer, p, "forward")
    assert scorer(fw.best_mask) == pytest.approx(scorer(ex.best_mask), abs=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31), st.integers(2, 6))
def test_exhaustive_never_worse_than_greedy(seed, p):
    table = np.random.default_rng(seed).normal(size=2 ** p)
    scorer = lambda m: float(table[int(m.bitstring, 2)])
    ex = subset_search(scorer, p).best_score
    for mode in ("forward", "backward"):
        res = subset_search(scorer, p, mode)
        assert ex <= scorer(res.best_mask)
        assert res.best_score == min(s for _, s in res.trace)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_entropy_permutation_and_relabel_invariant(seed):
    rng = np.random.default_rng(seed)
    th = rng.normal(size=(40, 2))
    w = rng.random(40) + 0.05
    w /= w.sum()
    base = knn_entropy(th, 4, weights=w)
    perm = rng.permutation(40)
    assert knn_entropy(th[perm], 4, weights=w[perm]) == pytest.approx(base, abs=1e-10)
    assert knn_entropy(th[:, ::-1], 4, weights=w) == pytest.approx(base, abs=1e-10)
