import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats as sps

from abcdr.models import (
    GaussianToyConfig, HeteroToyConfig, StereologyConfig, gaussian_posterior,
    gaussian_stat_names, get_model, gpd_sample, quantile_levels, section_diameters,
    simulate_gaussian_toy_block, simulate_hetero_toy_block, simulate_stereology,
)
from abcdr.sampler import SimulatorSpec, generate_table


class TestGaussianToy:
    def test_posterior_oracle(self):
        mean, var = gaussian_posterior(GaussianToyConfig(), 1.0)
        assert mean == pytest.approx(180 / 181, abs=1e-12)
        assert round(float(mean), 4) == 0.9945
        assert var == pytest.approx(9 / 181)

    def test_mean_at_zero(self):
        rng = np.random.default_rng(0)
        s = simulate_gaussian_toy_block(GaussianToyConfig(), np.zeros(20_000), rng)
        # sd of the sample mean is 1/sqrt(20)
        assert abs(s[:, 0].mean()) < 4 * (1 / np.sqrt(20)) / np.sqrt(20_000)

    def test_layout(self):
        cfg = GaussianToyConfig(k_noise=3, k_dup=2)
        assert gaussian_stat_names(cfg) == ["mean", "median", "noise1", "noise2",
                                            "noise3", "dup1", "dup2"]
        s = simulate_gaussian_toy_block(cfg, [0.0, 1.0], np.random.default_rng(1))
        assert s.shape == (2, 7)

    def test_duplicates_correlate(self):
        t = generate_table(SimulatorSpec("gaussian-toy", model_constants={"k_dup": 2},
                                         seed=3), 5000)
        for j in (6, 7):
            assert np.corrcoef(t.stats[:, 0], t.stats[:, j])[0, 1] > 0.999

    def test_invalid(self):
        with pytest.raises(ValueError):
            GaussianToyConfig(n0=1)
        with pytest.raises(ValueError):
            GaussianToyConfig(k_noise=-1)


class TestHeteroToy:
    def test_sd_scales_with_theta(self):
        rng = np.random.default_rng(2)
        cfg = HeteroToyConfig()
        sd1 = simulate_hetero_toy_block(cfg, np.full(10_000, 1.0), rng)[:, 0].std()
        sd10 = simulate_hetero_toy_block(cfg, np.full(10_000, 10.0), rng)[:, 0].std()
        assert sd10 / sd1 == pytest.approx(10, rel=0.15)
        assert sd1 == pytest.approx(0.3, rel=0.05)

    def test_noise_uncorrelated(self):
        t = generate_table(SimulatorSpec("hetero-toy", seed=4), 10_000)
        assert abs(np.corrcoef(t.params[:, 0], t.stats[:, 1])[0, 1]) < 0.03

    def test_unbiased(self):
        s = simulate_hetero_toy_block(HeteroToyConfig(), np.full(10_000, 5.0),
                                      np.random.default_rng(5))[:, 0]
        assert abs(s.mean() - 5) < 3 * s.std() / np.sqrt(len(s))


class TestStereology:
    def test_gpd_exponential_limit(self):
        x = gpd_sample(np.random.default_rng(6), 100_000, 2.5, 0.0)
        assert x.mean() == pytest.approx(2.5, rel=0.05)

    def test_gpd_heavy_tail_mean(self):
        x = gpd_sample(np.random.default_rng(7), 200_000, 1.0, 0.25)
        # GPD mean sigma / (1 - xi)
        assert x.mean() == pytest.approx(1 / 0.75, rel=0.05)

    def test_cut_fraction(self):
        cfg = StereologyConfig()
        Z, V = cfg.half_depth, 30.0
        z = np.random.default_rng(8).uniform(-Z, Z, 200_000)
        frac = (np.abs(z) < V / 2).mean()
        expected = V / (2 * Z)
        se = np.sqrt(expected * (1 - expected) / len(z))
        assert abs(frac - expected) < 4 * se

    def test_threshold_sized_spheres_never_observed(self):
        # V is u plus a negligible exceedance, so every section falls below u
        d = section_diameters(StereologyConfig(threshold=20.0), (50.0, 1e-9, 0.0),
                              np.random.default_rng(9))
        assert len(d) == 0

    def test_count_monotone_in_tau(self):
        cfg = StereologyConfig()
        rng = np.random.default_rng(10)
        taus = np.linspace(10, 200, 20)
        counts = [np.mean([simulate_stereology(cfg, (t, 2.0, 0.2), rng)[0]
                           for _ in range(5)]) for t in taus]
        assert sps.spearmanr(taus, counts)[0] > 0.95

    @settings(max_examples=30, deadline=None)
    @given(tau=st.floats(10, 200), sigma=st.floats(0.1, 5), xi=st.floats(-0.5, 0.99),
           seed=st.integers(0, 2 ** 32 - 1))
    def test_diameter_bounds_and_sorted_quantiles(self, tau, sigma, xi, seed):
        cfg = StereologyConfig()
        d = section_diameters(cfg, (tau, sigma, xi), np.random.default_rng(seed))
        assert (d > cfg.threshold).all() and (d <= cfg.v_cap).all()
        s = simulate_stereology(cfg, (tau, sigma, xi), np.random.default_rng(seed))
        assert s[0] == len(d)
        assert (np.diff(s[1:]) >= 0).all()

    def test_diameter_never_exceeds_sphere(self):
        # D = sqrt(V^2 - 4 z^2) <= V for each cut sphere; reproduce the draws
        cfg = StereologyConfig()
        seed = 11
        rng = np.random.default_rng(seed)
        n = rng.poisson(100 * cfg.half_depth)
        z = rng.uniform(-cfg.half_depth, cfg.half_depth, n)
        v = cfg.threshold + gpd_sample(rng, n, 3.0, 0.3)
        d = section_diameters(cfg, (100, 3.0, 0.3), np.random.default_rng(seed))
        cut = np.abs(z) < v / 2
        expect = np.sqrt(v[cut] ** 2 - 4 * z[cut] ** 2)
        expect = expect[expect > cfg.threshold]
        np.testing.assert_array_equal(d, expect)
        assert (expect <= v[cut][np.sqrt(v[cut] ** 2 - 4 * z[cut] ** 2) > cfg.threshold]).all()

    def test_zero_observed(self):
        s = simulate_stereology(StereologyConfig(threshold=20.0), (10, 1e-9, 0.0),
                                np.random.default_rng(0))
        assert s.tolist() == [0.0] * 21

    def test_quantile_levels(self):
        eq = quantile_levels(5)
        np.testing.assert_allclose(eq, [0, 0.25, 0.5, 0.75, 1])
        mf = quantile_levels(5, "max-favouring")
        assert mf[-1] == 1.0 and (np.diff(mf) > 0).all()
        assert (np.diff(np.diff(mf)) < 0).all()

    def test_cap_counted(self):
        cfg = StereologyConfig(v_cap=50.0)
        diag = {}
        d = section_diameters(cfg, (100, 5.0, 0.99), np.random.default_rng(1), diag)
        assert diag["capped"] > 0 and (d <= 50.0).all()

    def test_desk_dimension(self):
        t = generate_table(SimulatorSpec("stereology", seed=2), 50)
        assert t.p == 21 and t.q == 3


def test_registry():
    assert get_model("hetero-toy").param_names == ("theta",)
    with pytest.raises(KeyError, match="registered"):
        get_model("coalescent")
    with pytest.raises(KeyError):
        get_model("gaussian-toy").make_config({"bogus": 1})


def test_simulators_deterministic_given_seed():
    cfg = StereologyConfig()
    a = simulate_stereology(cfg, (80, 2, 0.1), np.random.default_rng(3))
    b = simulate_stereology(cfg, (80, 2, 0.1), np.random.default_rng(3))
    np.testing.assert_array_equal(a, b)
