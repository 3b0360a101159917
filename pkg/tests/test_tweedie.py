"""Tweedie kernel tests against mixture oracles and exact identities."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from oracles import mixture_cdf, mixture_logpdf
from triangle_risk import backend
from triangle_risk._core import series_py
from triangle_risk.exceptions import AccuracyError, DomainError
from triangle_risk.tweedie import (
    CdfTable,
    SeriesInterp,
    TweedieParams,
    cdf,
    density,
    log_density,
    quantile,
    sample,
    unit_deviance,
)

PARAM_GRID = [
    (0.5, 0.1, 1.2),
    (0.5, 1.0, 1.2),
    (1.0, 0.1, 1.5),
    (1.0, 1.0, 1.5),
    (2.0, 0.1, 1.9),
    (2.0, 1.0, 1.9),
    (0.2, 0.008, 1.9),
    (1.2, 0.3, 1.105),
]


class TestParams:
    def test_rejects_nonpositive_mu(self):
        with pytest.raises(DomainError):
            TweedieParams(0.0, 1.0, 1.5)

    def test_rejects_nonpositive_phi(self):
        with pytest.raises(DomainError):
            TweedieParams(1.0, -1.0, 1.5)

    @pytest.mark.parametrize("p", [1.0, 1.05, 1.95, 2.0, 2.5])
    def test_rejects_p_outside_band(self, p):
        with pytest.raises(DomainError):
            TweedieParams(1.0, 1.0, p)

    def test_moment_identities(self):
        params = TweedieParams(1.5, 0.4, 1.7)
        assert_allclose(params.variance, 0.4 * 1.5 ** 1.7, rtol=1e-14)
        lam = 1.5 ** 0.3 / (0.4 * 0.3)
        assert_allclose(params.poisson_rate, lam, rtol=1e-14)
        assert_allclose(params.zero_probability, np.exp(-lam), rtol=1e-14)


class TestDensity:
    # Frozen values computed from the Poisson-weighted gamma mixture with
    # 4000 terms (scipy.stats.poisson/gamma), an independent route.
    FROZEN = [
        (1.0, 1.0, 1.0, 1.5, -1.0286152203419825),
        (0.5, 0.5, 0.1, 1.2, 0.6323568902588637),
        (2.5, 2.0, 2.0, 1.8, -2.2680560429747985),
        (0.3, 0.2, 0.008, 1.9, -7.55452706644404),
    ]

    @pytest.mark.parametrize("y,mu,phi,p,expected", FROZEN)
    def test_frozen_mixture_values(self, y, mu, phi, p, expected):
        got = log_density(y, TweedieParams(mu, phi, p))
        assert_allclose(got, expected, rtol=0, atol=1e-10)

    @pytest.mark.parametrize("mu,phi,p", PARAM_GRID)
    def test_mixture_oracle_grid(self, mu, phi, p):
        y = np.array([0.05, 0.2, 0.7, 1.0, 1.8, 4.0]) * mu
        got = log_density(y, TweedieParams(mu, phi, p))
        want = mixture_logpdf(y, mu, phi, p)
        assert_allclose(got, want, rtol=0, atol=5e-11)

    def test_zero_mass_is_atom(self):
        params = TweedieParams(1.0, 1.0, 1.5)
        assert_allclose(density(0.0, params), params.zero_probability, rtol=1e-14)

    def test_negative_support(self):
        params = TweedieParams(1.0, 1.0, 1.5)
        assert log_density(-0.5, params) == -np.inf
        assert density(-0.5, params) == 0.0

    def test_backends_agree(self):
        if backend.BACKEND != "c":
            pytest.skip("compiled backend unavailable")
        y = np.geomspace(1e-4, 50.0, 200)
        for mu, phi, p in PARAM_GRID:
            phiv = np.full(y.size, phi)
            a_c = backend.log_series_a(y, phiv, p)
            a_py = series_py.log_series_a(y, phiv, p)
            assert_allclose(a_c, a_py, rtol=0, atol=1e-11)

    def test_series_term_cap_raises(self):
        with pytest.raises(AccuracyError):
            log_density(1e8, TweedieParams(1.0, 1e-6, 1.5))


class TestCdf:
    # Frozen values from the mixture-of-gamma-cdfs oracle.
    FROZEN = [
        (1.0, 1.0, 1.0, 1.5, 0.6035009606119932),
        (0.8, 0.5, 0.1, 1.2, 0.9148226191834868),
        (3.0, 2.0, 2.0, 1.8, 0.7661741771528527),
    ]

    @pytest.mark.parametrize("y,mu,phi,p,expected", FROZEN)
    def test_frozen_mixture_values(self, y, mu, phi, p, expected):
        assert_allclose(cdf(y, TweedieParams(mu, phi, p)), expected, atol=1e-10)

    @pytest.mark.parametrize("mu,phi,p", PARAM_GRID)
    def test_mixture_oracle_grid(self, mu, phi, p):
        params = TweedieParams(mu, phi, p)
        y = np.array([0.1, 0.5, 1.0, 2.5]) * mu
        got = cdf(y, params)
        want = mixture_cdf(y, mu, phi, p)
        assert_allclose(got, want, rtol=0, atol=5e-11)

    def test_atom_at_zero(self):
        params = TweedieParams(0.7, 0.6, 1.4)
        assert_allclose(cdf(0.0, params), params.zero_probability, rtol=1e-14)
        assert cdf(-1.0, params) == 0.0

    @pytest.mark.parametrize(
        "mu,phi,p",
        [(m, f, q) for m in (0.5, 1.0, 2.0) for f in (0.1, 1.0) for q in (1.2, 1.5, 1.9)],
    )
    def test_normalization(self, mu, phi, p):
        # Atom plus quadrature over the positive half-line must give mass 1.
        tab = CdfTable(TweedieParams(mu, phi, p))
        assert abs(tab.total_mass - 1.0) < 1e-8

    def test_monotone(self):
        params = TweedieParams(1.0, 0.5, 1.6)
        vals = cdf(np.linspace(0.0, 6.0, 40), params)
        assert np.all(np.diff(vals) >= -1e-14)


class TestQuantile:
    @pytest.mark.parametrize("mu,phi,p", PARAM_GRID)
    def test_round_trip(self, mu, phi, p):
        params = TweedieParams(mu, phi, p)
        for u in (0.2, 0.5, 0.9, 0.99, 0.999999):
            if u <= params.zero_probability:
                continue
            q = quantile(u, params)
            assert abs(cdf(q, params) - u) <= 1e-10

    def test_below_atom_maps_to_zero(self):
        params = TweedieParams(1.0, 1.0, 1.5)
        u = 0.5 * params.zero_probability
        assert quantile(u, params) == 0.0
        assert quantile(0.0, params) == 0.0

    def test_monotone_in_u(self):
        params = TweedieParams(1.0, 1.0, 1.5)
        qs = quantile(np.array([0.3, 0.5, 0.9, 0.99]), params)
        assert np.all(np.diff(qs) >= 0.0)

    def test_domain_errors(self):
        params = TweedieParams(1.0, 1.0, 1.5)
        with pytest.raises(DomainError):
            quantile(1.0, params)
        with pytest.raises(DomainError):
            quantile(-0.1, params)


class TestSample:
    def test_moments_and_zero_mass(self):
        rng = np.random.default_rng(7)
        for mu, phi, p in [(1.0, 1.0, 1.5), (0.5, 0.1, 1.2), (2.0, 1.0, 1.9)]:
            params = TweedieParams(mu, phi, p)
            n = 1_000_000
            x = sample(params, n, rng)
            se_mean = np.sqrt(params.variance / n)
            assert abs(x.mean() - mu) < 3 * se_mean
            # Variance of the sample variance via fourth-moment bound.
            s2 = x.var()
            se_var = np.sqrt(max(np.mean((x - x.mean()) ** 4) - s2 ** 2, 0) / n)
            assert abs(s2 - params.variance) < 3 * se_var
            p0 = params.zero_probability
            se_p0 = np.sqrt(p0 * (1 - p0) / n)
            triple = (p0, cdf(0.0, params), np.mean(x == 0.0))
            assert abs(triple[0] - triple[1]) < 1e-12
            assert abs(triple[2] - triple[0]) < 3 * se_p0

    def test_deterministic_given_seed(self):
        params = TweedieParams(1.0, 0.4, 1.6)
        a = sample(params, 1000, np.random.default_rng(11))
        b = sample(params, 1000, np.random.default_rng(11))
        assert np.array_equal(a, b)


class TestUnitDeviance:
    def test_worked_value(self):
        assert_allclose(unit_deviance(2.0, 1.0, 1.5), 0.6862915010152388, atol=1e-12)

    def test_zero_claim_branch(self):
        # d(0, mu) = 2 mu^(2-p) / (2-p)
        assert_allclose(unit_deviance(0.0, 1.3, 1.4), 2 * 1.3 ** 0.6 / 0.6, rtol=1e-14)

    def test_zero_iff_equal(self):
        assert unit_deviance(1.7, 1.7, 1.5) == pytest.approx(0.0, abs=1e-14)

    @given(
        y=st.floats(0.0, 50.0),
        mu=st.floats(1e-3, 50.0),
        p=st.floats(1.105, 1.9),
    )
    @settings(max_examples=200, deadline=None)
    def test_nonnegative(self, y, mu, p):
        assert unit_deviance(y, mu, p) >= -1e-12

    def test_domain_errors(self):
        with pytest.raises(DomainError):
            unit_deviance(-1.0, 1.0, 1.5)
        with pytest.raises(DomainError):
            unit_deviance(1.0, 0.0, 1.5)


class TestCdfTable:
    RATIO_SCALE = [(1.0, 1.0, 1.5), (0.5, 0.1, 1.2), (0.2, 0.008, 1.9), (1.2, 0.3, 1.105)]
    STRESS = [(2.0, 2.0, 1.8), (3.0, 0.05, 1.5), (0.05, 0.5, 1.5)]

    def _max_err(self, params, tab, rng, n_check=120):
        u = rng.uniform(params.zero_probability + 1e-10, 1 - 1e-10, 1500)
        q_tab = tab.quantile_batch(u)
        sub = rng.choice(u.size, n_check, replace=False)
        q_exact = np.array([quantile(u[i], params) for i in sub])
        return float(np.abs(q_tab[sub] - q_exact).max())

    @pytest.mark.parametrize("mu,phi,p", RATIO_SCALE)
    def test_accuracy_ratio_scale(self, mu, phi, p):
        params = TweedieParams(mu, phi, p)
        tab = CdfTable(params)
        assert self._max_err(params, tab, np.random.default_rng(3)) < 2e-5

    @pytest.mark.parametrize("mu,phi,p", STRESS)
    def test_accuracy_stress(self, mu, phi, p):
        params = TweedieParams(mu, phi, p)
        tab = CdfTable(params)
        assert self._max_err(params, tab, np.random.default_rng(4)) < 5e-4

    def test_cached_series_matches_exact_build(self):
        params = TweedieParams(0.8, 0.2, 1.7)
        exact = CdfTable(params)
        cached = CdfTable(params, log_a_fn=SeriesInterp(0.2, 1.7))
        u = np.random.default_rng(5).uniform(params.zero_probability + 1e-9, 1 - 1e-9, 4000)
        assert np.abs(exact.quantile_batch(u) - cached.quantile_batch(u)).max() < 1e-6

    def test_monotone_and_atom(self):
        params = TweedieParams(1.0, 1.0, 1.5)
        tab = CdfTable(params)
        u = np.linspace(0.0, 1.0 - 1e-12, 5000)
        q = tab.quantile_batch(u)
        assert np.all(np.diff(q) >= 0.0)
        assert np.all(q[u <= params.zero_probability] == 0.0)

    def test_degenerate_near_total_atom(self):
        # lambda ~ 1e-14: effectively all mass at zero.
        params = TweedieParams(1e-28, 1.0, 1.5)
        tab = CdfTable(params)
        assert np.all(tab.quantile_batch(np.array([0.1, 0.9, 0.999])) == 0.0)

    def test_rejects_bad_levels(self):
        tab = CdfTable(TweedieParams(1.0, 1.0, 1.5))
        with pytest.raises(DomainError):
            tab.quantile_batch(np.array([1.0]))
