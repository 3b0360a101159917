"""Dependence-layer tests: whitening, pseudo-uniforms, copula fits, tree."""
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose
from scipy import integrate
from scipy.stats import multivariate_t, t as t_dist

import oracles
from triangle_risk import dependence as dep
from triangle_risk.dependence import (
    ARCorrelation,
    CopulaLeaf,
    CopulaNode,
    CopulaSpec,
    CopulaTree,
    InnovationPanel,
    build_tree,
    compute_innovations,
    fit_bivariate,
    gof_cvm,
    kendall_tau,
    pseudo_uniform_ranks,
)
from triangle_risk.exceptions import DomainError
from triangle_risk.marginal import DispersionParams, MarginalModel, MeanParams
from triangle_risk.triangles import TriangleIndex

REPRESENTATIVE_T_PARAMS = [(4, 0.228), (5, 0.29), (8, 0.166)]


def ranked_pairs(pairs):
    return np.column_stack(
        [pseudo_uniform_ranks(pairs[:, 0]), pseudo_uniform_ranks(pairs[:, 1])]
    )


def leaf_set(node):
    if isinstance(node, CopulaLeaf):
        return frozenset([node.line_id])
    return leaf_set(node.left) | leaf_set(node.right)


def make_panel(line_id, series, index):
    return InnovationPanel(
        line_id=line_id,
        index=index,
        scaled=series,
        decorrelated=series,
        pseudo_uniforms=pseudo_uniform_ranks(series),
    )


class TestARCorrelation:
    def test_entries_are_lag_powers(self):
        corr = ARCorrelation(0.6, 5)
        assert_allclose(corr.matrix, oracles.ar1_correlation(0.6, 5), atol=1e-15)

    @pytest.mark.parametrize("rho", [-0.999, -0.5, 0.0, 0.5, 0.999])
    @pytest.mark.parametrize("dim", [1, 2, 7, 30])
    def test_cholesky_exists_and_reconstructs(self, rho, dim):
        corr = ARCorrelation(rho, dim)
        lower = corr.lower
        assert_allclose(lower @ lower.T, corr.matrix, atol=1e-10)

    @settings(max_examples=50, deadline=None)
    @given(
        rho=st.floats(-0.98, 0.98),
        dim=st.integers(min_value=1, max_value=12),
        seed=st.integers(min_value=0, max_value=2**31),
    )
    def test_whiten_color_round_trip(self, rho, dim, seed):
        corr = ARCorrelation(rho, dim)
        y = np.random.default_rng(seed).standard_normal(dim)
        assert_allclose(corr.color(corr.whiten(y)), y, atol=1e-12)

    def test_short_series_uses_leading_block(self):
        long = ARCorrelation(0.7, 9)
        short = ARCorrelation(0.7, 4)
        y = np.array([0.3, -1.2, 0.8, 0.1])
        assert_allclose(long.whiten(y), short.whiten(y), atol=1e-14)

    def test_domain_errors(self):
        with pytest.raises(DomainError):
            ARCorrelation(1.0, 3)
        with pytest.raises(DomainError):
            ARCorrelation(0.5, 0)
        with pytest.raises(DomainError):
            ARCorrelation(0.5, 2).whiten(np.zeros(3))


class TestComputeInnovations:
    @staticmethod
    def flat_model(J, rho):
        return MarginalModel(
            mean=MeanParams(0.0, np.zeros(J), np.zeros(J)),
            dispersion=DispersionParams(float(np.log(2.5e-3)), np.zeros(J)),
            rho=rho,
            p=1.5,
        )

    @classmethod
    def panel_from_noise(cls, J, rho, noise):
        index = TriangleIndex(J, J)
        square = np.maximum(1.0 + math.sqrt(2.5e-3) * noise, 0.0)
        tri = oracles.triangle_from_square("w", index, np.full(J, 1000.0), square)
        model = cls.flat_model(J, rho)
        return compute_innovations(model, tri), model, tri

    def test_zero_correlation_is_identity(self):
        rng = np.random.default_rng(5)
        panel, _, _ = self.panel_from_noise(8, 0.0, rng.standard_normal((8, 8)))
        assert_allclose(panel.decorrelated, panel.scaled, atol=1e-14)

    def test_whitening_removes_lag_correlation(self):
        # A serially correlated panel has lag-1 correlation near the
        # generating value before whitening and near zero afterwards.
        J = 120
        rng = np.random.default_rng(20250825)
        noise = oracles.gaussian_ar1_panel(0.8, (J, J), rng)
        panel, _, _ = self.panel_from_noise(J, 0.8, noise)
        index = panel.index

        def pooled_lag1(matrix):
            a, b = [], []
            for i in range(1, J + 1):
                n_i = index.n_observed(i)
                a.extend(matrix[i - 1, :n_i - 1])
                b.extend(matrix[i - 1, 1:n_i])
            return float(np.corrcoef(a, b)[0, 1])

        scaled_matrix = np.full((J, J), np.nan)
        pos = 0
        for i in range(1, J + 1):
            n_i = index.n_observed(i)
            scaled_matrix[i - 1, :n_i] = panel.scaled[pos:pos + n_i]
            pos += n_i
        assert pooled_lag1(scaled_matrix) > 0.5
        assert abs(pooled_lag1(panel.decorrelated_matrix())) < 0.05

    def test_pseudo_uniforms_strictly_inside_unit_interval(self):
        rng = np.random.default_rng(6)
        panel, _, _ = self.panel_from_noise(10, 0.4, rng.standard_normal((10, 10)))
        v = panel.pseudo_uniforms
        assert np.all((v > 0.0) & (v < 1.0))
        assert len(np.unique(v)) == len(v)

    def test_rank_uniformity_bound(self):
        # The empirical CDF of scaled ranks deviates from the uniform CDF by
        # at most 1/(n+1) at every sample point.
        rng = np.random.default_rng(7)
        panel, _, _ = self.panel_from_noise(12, 0.6, rng.standard_normal((12, 12)))
        v = np.sort(panel.pseudo_uniforms)
        n = len(v)
        ecdf = np.arange(1, n + 1) / n
        assert float(np.max(np.abs(ecdf - v))) <= 1.0 / (n + 1) + 1e-15

    def test_row_wise_whitening_matches_direct_solve(self):
        rng = np.random.default_rng(8)
        panel, model, tri = self.panel_from_noise(6, 0.5, rng.standard_normal((6, 6)))
        scaled = model.scaled_innovations(tri)
        pos = 0
        for i in range(1, 7):
            n_i = tri.index.n_observed(i)
            corr = oracles.ar1_correlation(0.5, n_i)
            expected = np.linalg.solve(np.linalg.cholesky(corr), scaled[i - 1, :n_i])
            assert_allclose(panel.decorrelated[pos:pos + n_i], expected, atol=1e-12)
            pos += n_i

    def test_panel_validation(self):
        index = TriangleIndex(3, 3)
        good = np.array([0.1, 0.2, 0.3, 0.4, 0.5, 0.6])
        with pytest.raises(DomainError):
            InnovationPanel("x", index, good[:5], good, good)
        with pytest.raises(DomainError):
            InnovationPanel("x", index, good, good, good + 1.0)

    def test_decorrelated_matrix_shape(self):
        rng = np.random.default_rng(9)
        panel, _, _ = self.panel_from_noise(4, 0.3, rng.standard_normal((4, 4)))
        matrix = panel.decorrelated_matrix()
        assert matrix.shape == (4, 4)
        assert np.isnan(matrix[3, 1]) and np.isnan(matrix[1, 3])
        assert not np.isnan(matrix[0, :]).any()

    def test_ranks_tie_handling(self):
        v = pseudo_uniform_ranks(np.array([2.0, 1.0, 2.0]))
        assert_allclose(v, [2.5 / 4, 1.0 / 4, 2.5 / 4])
        with pytest.raises(DomainError):
            pseudo_uniform_ranks(np.array([]))


class TestCopulaSpec:
    def test_validation(self):
        with pytest.raises(DomainError):
            CopulaSpec(family="gaussian")
        with pytest.raises(DomainError):
            CopulaSpec(family="student_t", nu=0, rho=0.2)
        with pytest.raises(DomainError):
            CopulaSpec(family="student_t", nu=4, rho=1.0)
        with pytest.raises(DomainError):
            CopulaSpec(family="independence", nu=4)

    @pytest.mark.parametrize("nu,rho", REPRESENTATIVE_T_PARAMS)
    def test_log_density_matches_density_ratio(self, nu, rho):
        # c(u, v) equals the joint bivariate t density over the product of
        # the univariate t densities, evaluated at the t quantiles.
        rng = np.random.default_rng(11)
        u = rng.uniform(0.02, 0.98, 40)
        v = rng.uniform(0.02, 0.98, 40)
        x = t_dist.ppf(u, nu)
        y = t_dist.ppf(v, nu)
        joint = multivariate_t(loc=[0, 0], shape=[[1, rho], [rho, 1]], df=nu)
        expected = (
            joint.logpdf(np.column_stack([x, y]))
            - t_dist.logpdf(x, nu)
            - t_dist.logpdf(y, nu)
        )
        spec = CopulaSpec(family="student_t", nu=nu, rho=rho)
        assert_allclose(spec.log_density(u, v), expected, atol=1e-12)

    @pytest.mark.parametrize("nu,rho", REPRESENTATIVE_T_PARAMS)
    def test_density_integrates_to_one(self, nu, rho):
        spec = CopulaSpec(family="student_t", nu=nu, rho=rho)
        total, _ = integrate.dblquad(
            lambda b, a: float(np.exp(spec.log_density(a, b))),
            0.0, 1.0, 0.0, 1.0, epsabs=1e-6, epsrel=1e-6,
        )
        assert abs(total - 1.0) < 1e-4

    def test_cdf_matches_brute_force_integral(self):
        spec = CopulaSpec(family="student_t", nu=5, rho=0.29)
        for (u, v) in [(0.3, 0.7), (0.5, 0.5), (0.9, 0.2), (0.05, 0.95)]:
            brute, _ = integrate.dblquad(
                lambda b, a: float(np.exp(spec.log_density(a, b))),
                0.0, u, 0.0, v, epsabs=1e-9, epsrel=1e-9,
            )
            assert abs(float(spec.cdf(u, v)) - brute) < 1e-5

    def test_cdf_margins_and_frechet_bounds(self):
        spec = CopulaSpec(family="student_t", nu=4, rho=-0.4)
        u = np.linspace(0.05, 0.95, 10)
        assert_allclose(spec.cdf(u, np.full_like(u, 1.0 - 1e-9)), u, atol=1e-7)
        rng = np.random.default_rng(12)
        a = rng.uniform(0.01, 0.99, 200)
        b = rng.uniform(0.01, 0.99, 200)
        c = spec.cdf(a, b)
        assert np.all(c <= np.minimum(a, b) + 1e-9)
        assert np.all(c >= np.maximum(a + b - 1.0, 0.0) - 1e-9)

    def test_sample_margins_uniform_and_tau_identity(self):
        # For elliptical copulas Kendall tau equals 2/pi * arcsin(rho).
        spec = CopulaSpec(family="student_t", nu=8, rho=0.166)
        draws = spec.sample(100_000, np.random.default_rng(7))
        assert draws.shape == (100_000, 2)
        for col in range(2):
            sorted_col = np.sort(draws[:, col])
            grid = np.arange(1, 100_001) / 100_001.0
            assert float(np.max(np.abs(sorted_col - grid))) < 0.01
        tau = kendall_tau(draws)
        assert abs(tau - 2.0 / math.pi * math.asin(0.166)) < 0.02

    def test_independence_sample_and_cdf(self):
        spec = CopulaSpec(family="independence")
        draws = spec.sample(1000, 3)
        assert draws.shape == (1000, 2)
        assert_allclose(spec.cdf(0.3, 0.6), 0.18, atol=1e-15)
        assert_allclose(spec.log_density([0.2, 0.9], [0.5, 0.1]), [0.0, 0.0])

    def test_dict_round_trip(self):
        spec = CopulaSpec(family="student_t", nu=6, rho=-0.3)
        back = CopulaSpec.from_dict(spec.to_dict())
        assert back.nu == 6 and back.rho == -0.3
        with pytest.raises(DomainError):
            CopulaSpec.from_dict({"nu": 4})
        updated = spec.with_p_value(0.42)
        assert updated.p_value == 0.42 and spec.p_value is None


class TestFitBivariate:
    def test_input_validation(self):
        rng = np.random.default_rng(0)
        with pytest.raises(DomainError):
            fit_bivariate(rng.random((29, 2)))
        with pytest.raises(DomainError):
            fit_bivariate(rng.random((40, 3)))
        bad = rng.random((40, 2))
        bad[0, 0] = 1.0
        with pytest.raises(DomainError):
            fit_bivariate(bad)

    def test_rho_recovery_rate(self):
        # 100 samples of size 465 from a t copula with nu=5, rho=0.29: the
        # fitted rho lands within 0.1 of the truth in at least 90 of them,
        # and the degrees of freedom concentrate near the generating value.
        spec = CopulaSpec(family="student_t", nu=5, rho=0.29)
        rng = np.random.default_rng(20250825)
        rhos, nus, t_count = [], [], 0
        for _ in range(100):
            fitted = fit_bivariate(ranked_pairs(spec.sample(465, rng)))
            if fitted.family == "student_t":
                t_count += 1
                rhos.append(fitted.rho)
                nus.append(fitted.nu)
        assert t_count >= 95
        rhos = np.array(rhos)
        nus = np.array(nus)
        assert int(np.sum(np.abs(rhos - 0.29) < 0.1)) >= 90
        assert 3 <= int(np.median(nus)) <= 8
        assert int(np.sum((nus >= 3) & (nus <= 8))) >= int(0.85 * t_count)

    def test_independence_selected_under_null(self):
        rng = np.random.default_rng(20250825)
        selected = 0
        for _ in range(100):
            fitted = fit_bivariate(ranked_pairs(rng.random((465, 2))))
            selected += fitted.family == "independence"
        assert selected >= 90

    def test_single_sample_regression_values(self):
        # One sample of size 465 from t(nu=8, rho=0.166): the refit recovers
        # rho within 0.1 and reports a standard error near 0.05.
        spec = CopulaSpec(family="student_t", nu=8, rho=0.166)
        pairs = ranked_pairs(spec.sample(465, np.random.default_rng(0)))
        fitted = fit_bivariate(pairs)
        assert fitted.family == "student_t"
        assert abs(fitted.rho - 0.166) <= 0.1
        assert 0.03 <= fitted.rho_se <= 0.07
        assert fitted.log_pseudo_likelihood > 0.0

    def test_independence_spec_fields(self):
        rng = np.random.default_rng(1)
        fitted = fit_bivariate(ranked_pairs(rng.random((465, 2))))
        assert fitted.family == "independence"
        assert fitted.nu is None and fitted.rho is None
        assert fitted.log_pseudo_likelihood == 0.0


class TestKendallTau:
    def test_perfect_concordance_and_discordance(self):
        x = np.array([0.1, 0.4, 0.5, 0.9])
        assert kendall_tau(np.column_stack([x, x ** 2])) == pytest.approx(1.0)
        assert kendall_tau(np.column_stack([x, -x])) == pytest.approx(-1.0)

    def test_independent_uniforms_near_zero(self):
        rng = np.random.default_rng(0)
        pairs = rng.random((465, 2))
        assert abs(kendall_tau(pairs)) <= 0.1

    def test_matches_brute_force_concordance_count(self):
        rng = np.random.default_rng(10)
        pairs = rng.random((60, 2))
        x, y = pairs[:, 0], pairs[:, 1]
        concordant = discordant = 0
        for i in range(60):
            for j in range(i + 1, 60):
                sign = (x[i] - x[j]) * (y[i] - y[j])
                concordant += sign > 0
                discordant += sign < 0
        expected = (concordant - discordant) / (60 * 59 / 2)
        assert kendall_tau(pairs) == pytest.approx(expected, abs=1e-12)

    def test_too_few_pairs(self):
        with pytest.raises(DomainError):
            kendall_tau(np.array([[0.5, 0.5]]))


class TestGofCvm:
    def test_size_calibration_under_independence(self):
        # Data simulated from the fitted spec: the bootstrap p-value is
        # uniform, so the 5%-level rejection rate over 200 trials stays
        # within 3%..7%.
        spec = CopulaSpec(family="independence")
        rng = np.random.default_rng(2)
        rejections = 0
        for _ in range(200):
            pairs = rng.random((465, 2))
            p = gof_cvm(spec, pairs, n_bootstrap=99, rng=rng.spawn(1)[0])
            rejections += p <= 0.05
        assert 0.03 <= rejections / 200.0 <= 0.07

    def test_refit_path_not_oversized(self):
        # Data simulated from a fitted t copula and tested against it:
        # p-values spread over the unit interval instead of piling up at
        # the rejection end.
        truth = CopulaSpec(family="student_t", nu=5, rho=0.29)
        rng = np.random.default_rng(20250825)
        p_values = []
        for _ in range(6):
            pairs = ranked_pairs(truth.sample(300, rng))
            fitted = fit_bivariate(pairs)
            p_values.append(gof_cvm(fitted, pairs, n_bootstrap=49,
                                    rng=rng.spawn(1)[0]))
        assert sum(p <= 0.05 for p in p_values) <= 1
        assert max(p_values) >= 0.5

    def test_power_against_comonotone_data(self):
        rng = np.random.default_rng(4)
        u = rng.random(465)
        p = gof_cvm(CopulaSpec(family="independence"),
                    np.column_stack([u, u]), n_bootstrap=199, rng=5)
        assert p < 0.01

    def test_deterministic_given_seed(self):
        spec = CopulaSpec(family="independence")
        pairs = np.random.default_rng(6).random((80, 2))
        p1 = gof_cvm(spec, pairs, n_bootstrap=49, rng=123)
        p2 = gof_cvm(spec, pairs, n_bootstrap=49, rng=123)
        assert p1 == p2

    def test_validation(self):
        spec = CopulaSpec(family="independence")
        pairs = np.random.default_rng(6).random((80, 2))
        with pytest.raises(DomainError):
            gof_cvm(spec, pairs, n_bootstrap=0)


class TestBuildTree:
    INDEX = TriangleIndex(8, 8)

    @classmethod
    def panels_from_rows(cls, rows, ids, index=None):
        index = index or cls.INDEX
        return [make_panel(i, row, index) for i, row in zip(ids, rows)]

    def test_two_lines_single_node(self):
        rng = np.random.default_rng(20)
        n = self.INDEX.n_upper
        z = rng.standard_normal((2, n))
        panels = self.panels_from_rows([z[0], 0.6 * z[0] + 0.8 * z[1]], ["A", "B"])
        tree = build_tree(panels, pairing=[("A", "B")])
        assert tree.n_leaves == 2
        assert tree.n_copulas == 1
        assert isinstance(tree.root.left, CopulaLeaf)
        assert isinstance(tree.root.right, CopulaLeaf)

    def test_copula_count_is_leaves_minus_one(self):
        rng = np.random.default_rng(21)
        n = self.INDEX.n_upper
        rows = rng.standard_normal((6, n))
        ids = ["L%d" % k for k in range(6)]
        tree = build_tree(
            self.panels_from_rows(rows, ids),
            pairing=[("L0", "L1"), ("L2", "L3"), ("L4", "L5")],
        )
        assert tree.n_leaves == 6
        assert tree.n_copulas == 5
        assert sorted(tree.leaf_ids) == sorted(ids)

    def test_most_dependent_clusters_join_first(self):
        # Four lines: one configured pair plus two singleton clusters that
        # share a strong common factor.  The greedy tau rule must join the
        # two factor-driven singletons before anything else in >= 95 of 100
        # replications.
        rng = np.random.default_rng(20250825)
        n = self.INDEX.n_upper
        hits = 0
        for _ in range(100):
            z = rng.standard_normal((4, n))
            factor = rng.standard_normal(n)
            rows = [z[0], 0.5 * z[0] + math.sqrt(0.75) * z[1],
                    1.5 * factor + z[2], 1.5 * factor + z[3]]
            panels = self.panels_from_rows(rows, ["L1", "L2", "L3", "L4"])
            tree = build_tree(panels, pairing=[("L1", "L2"), ("L3",), ("L4",)])
            stack = [tree.root]
            while stack:
                node = stack.pop()
                if isinstance(node, CopulaNode):
                    if leaf_set(node) == frozenset({"L3", "L4"}):
                        hits += 1
                        break
                    stack.extend([node.left, node.right])
        assert hits >= 95

    def test_six_line_regional_shape(self):
        # Six lines in three configured pairs; the four lines of the second
        # and third pair share a regional factor, so those two clusters join
        # each other before joining the first pair's cluster.
        index = TriangleIndex(10, 10)
        n = index.n_upper
        rng = np.random.default_rng(20250825)
        want = {
            frozenset({"ON_PA", "ON_CA"}),
            frozenset({"AB_PA", "AB_CA", "ATL_PA", "ATL_CA"}),
        }
        for _ in range(10):
            z = rng.standard_normal((6, n))
            shared = rng.standard_normal(n)
            rows = [
                z[0],
                0.4 * z[0] + math.sqrt(1 - 0.16) * z[1],
                0.9 * shared + z[2],
                0.9 * shared + z[3],
                0.9 * shared + z[4],
                0.9 * shared + z[5],
            ]
            ids = ["ON_PA", "ON_CA", "AB_PA", "AB_CA", "ATL_PA", "ATL_CA"]
            tree = build_tree(
                self.panels_from_rows(rows, ids, index),
                pairing=[("ON_PA", "ON_CA"), ("AB_PA", "AB_CA"),
                         ("ATL_PA", "ATL_CA")],
            )
            assert {leaf_set(tree.root.left), leaf_set(tree.root.right)} == want

    def test_pairing_validation(self):
        rng = np.random.default_rng(22)
        n = self.INDEX.n_upper
        rows = rng.standard_normal((3, n))
        panels = self.panels_from_rows(rows, ["A", "B", "C"])
        with pytest.raises(DomainError):
            build_tree(panels[:1], pairing=[("A",)])
        with pytest.raises(DomainError):
            build_tree(panels, pairing=[("A", "B", "C")])
        with pytest.raises(DomainError):
            build_tree(panels, pairing=[("A", "B"), ("X",)])
        with pytest.raises(DomainError):
            build_tree(panels, pairing=[("A", "B"), ("A",)])
        with pytest.raises(DomainError):
            build_tree(panels, pairing=[("A", "B")])

    def test_mismatched_panels_rejected(self):
        rng = np.random.default_rng(23)
        small = TriangleIndex(8, 8)
        big = TriangleIndex(9, 9)
        a = make_panel("A", rng.standard_normal(small.n_upper), small)
        b = make_panel("B", rng.standard_normal(big.n_upper), big)
        with pytest.raises(DomainError):
            build_tree([a, b], pairing=[("A", "B")])

    def test_json_round_trip(self, tmp_path):
        tree = CopulaTree(
            root=CopulaNode(
                spec=CopulaSpec(family="independence"),
                left=CopulaNode(
                    spec=CopulaSpec(family="student_t", nu=8, rho=0.166),
                    left=CopulaLeaf("ON_PA"),
                    right=CopulaLeaf("ON_CA"),
                ),
                right=CopulaNode(
                    spec=CopulaSpec(family="student_t", nu=4, rho=0.228),
                    left=CopulaNode(
                        spec=CopulaSpec(family="student_t", nu=5, rho=0.290),
                        left=CopulaLeaf("AB_PA"),
                        right=CopulaLeaf("AB_CA"),
                    ),
                    right=CopulaNode(
                        spec=CopulaSpec(family="independence"),
                        left=CopulaLeaf("ATL_PA"),
                        right=CopulaLeaf("ATL_CA"),
                    ),
                ),
            )
        )
        doc = tree.to_dict()
        assert doc["family"] == "independence"
        assert doc["children"][0]["children"] == ["ON_PA", "ON_CA"]
        path = tmp_path / "tree.json"
        tree.save(path)
        loaded = CopulaTree.load(path)
        assert loaded.leaf_ids == tree.leaf_ids
        assert loaded.n_copulas == 5
        specs = loaded.specs
        assert specs[0].family == "independence"
        assert specs[1].nu == 8 and specs[1].rho == 0.166

    def test_from_dict_validation(self):
        with pytest.raises(DomainError):
            CopulaTree.from_dict("just_a_leaf")
        with pytest.raises(DomainError):
            CopulaTree.from_dict({"family": "independence", "children": ["A"]})
        with pytest.raises(DomainError):
            CopulaTree.from_dict({"family": "independence", "children": [1, 2]})
        with pytest.raises(DomainError):
            CopulaTree.from_dict(
                {"family": "independence", "children": ["A", "A"]}
            )
