import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from crowdlend import fairness
from crowdlend.dataset import FeatureSchema
from crowdlend.fairness import DebiasError


def two_groups(n, rng):
    g = np.r_[np.zeros(n, dtype=int), np.ones(n, dtype=int)]
    return g[rng.permutation(2 * n)]


class TestThreshold:
    def test_order_statistic(self):
        s = [0.2, 0.5, 0.9]
        t = fairness.funding_threshold(s, 2)
        assert 0.2 < t <= 0.5
        assert fairness.funded_mask(s, 2).tolist() == [False, True, True]

    def test_limits(self):
        s = np.array([0.3, 0.1, 0.7])
        assert fairness.funding_threshold(s, 3) <= s.min()
        assert fairness.funding_threshold(s, 0) > s.max()
        assert fairness.funded_mask(s, 0).sum() == 0 and fairness.funded_mask(s, 3).all()

    def test_ties_admit_high_index_first(self):
        assert fairness.funded_mask([0.5, 0.5, 0.5, 0.1], 2).tolist() == [False, True, True, False]

    @given(st.lists(st.floats(0, 1), min_size=1, max_size=50), st.data())
    def test_exact_count(self, s, data):
        c = data.draw(st.integers(0, len(s)))
        m = fairness.funded_mask(s, c)
        assert m.sum() == c
        if 0 < c < len(s):
            assert min(np.array(s)[m]) >= max(np.array(s)[~m])

    def test_bad_count(self):
        with pytest.raises(ValueError):
            fairness.funded_mask([0.1], 2)

    def test_expected_count(self):
        assert fairness.expected_positive_count([0.4, 0.4, 0.9]) == 2


class TestReport:
    def test_hand_parity(self):
        groups = [0, 0, 0, 0, 1, 1, 1, 1]
        funded = [1, 1, 0, 0, 1, 1, 1, 0]
        scores = np.linspace(0.1, 0.8, 8)
        labels = [1, 0, 1, 0, 1, 0, 1, 0]
        r = fairness.fairness_report(scores, labels, groups, funded=np.array(funded, bool))
        assert r.rows[0].difference == pytest.approx(-0.25)
        # TPR: group0 funded 1 of 2 positives, group1 2 of 2
        assert r.row("True positive rate").difference == pytest.approx(-0.5)
        assert r.row("False positive rate").difference == pytest.approx(0.0)

    def test_symmetric_groups(self):
        s = np.tile([0.2, 0.4, 0.6, 0.8], 2)
        y = np.tile([0, 1, 0, 1], 2)
        g = np.repeat([0, 1], 4)
        r = fairness.fairness_report(s, y, g, threshold=0.5)
        assert all(row.difference == 0 for row in r.rows)

    def test_welch(self):
        rng = np.random.default_rng(0)
        s = rng.random(300)
        y = rng.integers(0, 2, 300)
        g = rng.integers(0, 2, 300)
        r = fairness.fairness_report(s, y, g, threshold=0.5)
        ref = stats.ttest_ind(s[(g == 0) & (y == 1)], s[(g == 1) & (y == 1)], equal_var=False).pvalue
        assert r.row("Average score of positive class").p_value == pytest.approx(ref)

    def test_absent_metric(self):
        r = fairness.fairness_report([0.2, 0.8, 0.6], [1, 1, 0], [0, 0, 1], threshold=0.5)
        assert r.row("True positive rate").group1 is None
        assert r.row("True positive rate").difference is None

    def test_errors(self):
        with pytest.raises(ValueError):
            fairness.fairness_report([0.1, 0.2], [0, 1], [0, 0], threshold=0.5)
        with pytest.raises(ValueError):
            fairness.fairness_report([0.1, 0.2], [0, 1], [0, 2], threshold=0.5)

    def test_stars_and_csv(self, tmp_path):
        assert [fairness.stars(p) for p in (0.0005, 0.005, 0.03, 0.07, 0.2)] == ["***", "**", "*", ".", ""]
        rng = np.random.default_rng(1)
        g = np.repeat([0, 1], 200)
        s = np.r_[rng.random(200) * 0.5, 0.5 + rng.random(200) * 0.5]
        r = fairness.audit(s, rng.integers(0, 2, 400), g)
        r.to_csv(tmp_path / "f.csv")
        lines = (tmp_path / "f.csv").read_text().splitlines()
        assert lines[0] == "metric,Group0,Group1,difference,p_value"
        assert lines[3].startswith("Prob. of being funded,") and "***" in lines[3]


class TestContinuous:
    def test_matches_direct_kernel_sum(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=60)
        g = np.repeat([0, 1], 30)
        out = fairness.debias_continuous(x, g)
        for i in (0, 17, 45):
            own = x[g == g[i]]
            # Scott's factor times the group's own spread
            h = own.std() * 30 ** -0.2
            ref = np.mean([stats.norm.cdf((x[i] - p) / h) for p in own])
            assert out[i] == pytest.approx(ref, abs=1e-12)
        kde = stats.gaussian_kde(x[g == 0], bw_method="scott")
        # scipy uses the unbiased variance, so rescale before comparing
        kde.set_bandwidth(kde.factor * math.sqrt(29 / 30))
        assert out[0] == pytest.approx(kde.integrate_box_1d(-np.inf, x[0]), abs=1e-10)

    def test_same_distribution_ks(self):
        rng = np.random.default_rng(3)
        g = two_groups(2000, rng)
        x = rng.lognormal(size=4000)
        out = fairness.debias_continuous(x, g)
        ks = stats.ks_2samp(out[g == 0], out[g == 1])
        crit = 1.628 * math.sqrt(2 / 2000)
        assert ks.statistic < crit

    def test_shifted_groups(self):
        rng = np.random.default_rng(4)
        g = two_groups(2000, rng)
        x = rng.normal(size=4000) + 1.5 * g
        assert stats.ks_2samp(x[g == 0], x[g == 1]).statistic > 0.4
        out = fairness.debias_continuous(x, g)
        assert stats.ks_2samp(out[g == 0], out[g == 1]).pvalue > 0.01
        for a in (0, 1):
            assert stats.kstest(out[g == a], "uniform").statistic < 0.05

    def test_median_near_half(self):
        rng = np.random.default_rng(5)
        g = two_groups(600, rng)
        x = rng.gamma(2.0, size=1200) + g
        cdf = fairness.KdeCdf.fit(x, g)
        for a in (0, 1):
            med = np.median(x[g == a])
            assert abs(cdf.cdf([med], [a])[0] - 0.5) <= 0.05

    @settings(max_examples=30)
    @given(st.lists(st.integers(-10_000, 10_000), min_size=4, max_size=40, unique=True))
    def test_strictly_increasing_within_group(self, xs):
        x = np.array(xs) / 100.0
        g = np.arange(len(x)) % 2
        out = fairness.debias_continuous(x, g)
        assert np.all((out >= 0) & (out <= 1))
        for a in (0, 1):
            o = np.argsort(x[g == a])
            assert np.all(np.diff(out[g == a][o]) >= 0)
        # strict wherever float precision can resolve the gap
        big = fairness.debias_continuous(np.array([0.0, 1.0, 2.0, 3.0]), [0, 0, 1, 1])
        assert big[0] < big[1] and big[2] < big[3]

    def test_constant_group(self):
        with pytest.raises(DebiasError):
            fairness.debias_continuous([1.0, 1.0, 2.0, 3.0], [0, 0, 1, 1])


class TestCategorical:
    def test_midpoint_alpha(self):
        p0, p1 = (0.7, 0.3), (0.4, 0.6)
        assert fairness.feasible_interval_k2(p0, p1) == pytest.approx((0.1, 0.4))
        alpha, exact = fairness.solve_alpha(p0, p1)
        assert exact
        np.testing.assert_allclose(alpha, [0.25, 0.15, 0.45, 0.15], atol=1e-12)
        A, b = fairness.constraint_system(p0, p1)
        np.testing.assert_allclose(A @ alpha, b, atol=1e-12)

    def test_family_endpoints_feasible(self):
        p0, p1 = (0.7, 0.3), (0.4, 0.6)
        for a in (0.1, 0.4):
            al = fairness.alpha_k2(p0, p1, a)
            assert np.all(al >= -1e-12)
            A, b = fairness.constraint_system(p0, p1)
            np.testing.assert_allclose(A @ al, b, atol=1e-12)

    def test_sigma_table(self):
        k = 3
        assert fairness.sigma(np.arange(1, 7), 0, k).tolist() == [1, 2, 3, 1, 2, 3]
        assert fairness.sigma(np.arange(1, 7), 1, k).tolist() == [1, 1, 2, 2, 3, 3]
        for t in range(1, 4):
            for a in (0, 1):
                assert set(fairness.sigma(np.array(fairness.preimage(t, a, k)), a, k)) == {t}

    @settings(max_examples=25)
    @given(st.integers(2, 5), st.integers(0, 10_000))
    def test_reconstruction(self, k, seed):
        rng = np.random.default_rng(seed)
        g = rng.integers(0, 2, 300)
        x = rng.integers(1, k + 1, 300)
        xt, alpha = fairness.debias_categorical(x, g, k, seed)
        assert np.all((xt >= 1) & (xt <= 2 * k))
        np.testing.assert_array_equal(fairness.sigma(xt.astype(int), g, k), x)
        assert np.all(alpha >= 0)

    def test_group_independence(self):
        rng = np.random.default_rng(6)
        n = 4000
        g = rng.integers(0, 2, n)
        probs = {0: [0.5, 0.3, 0.2], 1: [0.3, 0.4, 0.3]}
        x = np.array([rng.choice(3, p=probs[a]) + 1 for a in g])
        assert stats.chi2_contingency(np.array([np.bincount(x[g == a], minlength=4)[1:] for a in (0, 1)]))[1] < 1e-6
        xt, _ = fairness.debias_categorical(x, g, 3, seed=1)
        table = np.array([np.bincount(xt[g == a].astype(int), minlength=7)[1:] for a in (0, 1)])
        table = table[:, table.sum(axis=0) > 0]
        assert stats.chi2_contingency(table)[1] > 0.01

    def test_infeasible_falls_back(self):
        # alpha_1 <= 0.2 from group 1 forces alpha_4 >= 0.4, but group 1 caps it at 0.3
        with pytest.warns(UserWarning, match="bias reduced"):
            alpha, exact = fairness.solve_alpha([0.6, 0.3, 0.1], [0.2, 0.3, 0.5])
        assert not exact and np.all(alpha >= 0)

    def test_equal_marginals(self):
        p = np.array([0.5, 0.2, 0.3])
        alpha, exact = fairness.solve_alpha(p, p)
        assert exact
        A, b = fairness.constraint_system(p, p)
        np.testing.assert_allclose(A @ alpha, b, atol=1e-9)

    def test_absent_category(self):
        rng = np.random.default_rng(7)
        g = np.repeat([0, 1], 100)
        x = np.r_[rng.integers(1, 3, 100), rng.integers(1, 4, 100)]
        xt, alpha = fairness.debias_categorical(x, g, 3)
        np.testing.assert_array_equal(fairness.sigma(xt.astype(int), g, 3), x)

    def test_bad_values(self):
        with pytest.raises(DebiasError):
            fairness.debias_categorical([1, 4], [0, 1], 3)


class TestOrdinal:
    def test_jitter_ranges(self):
        ranges = [(0.5, 1.5), (1.5, 2.5), (2.5, 3.5)]
        x = np.tile([1, 2, 3], 100)
        j = fairness.jitter(x, ranges, np.random.default_rng(0))
        for t in (1, 2, 3):
            assert np.all((j[x == t] >= t - 0.5) & (j[x == t] < t + 0.5))

    def test_order_across_levels(self):
        rng = np.random.default_rng(8)
        x = rng.integers(1, 4, 200)
        g = rng.integers(0, 2, 200)
        out = fairness.debias_ordinal(x, [(0.5, 1.5), (1.5, 2.5), (2.5, 3.5)], g, seed=3)
        for a in (0, 1):
            lo = out[(g == a) & (x == 1)].max()
            hi = out[(g == a) & (x == 3)].min()
            assert lo < hi

    def test_identical_distributions(self):
        rng = np.random.default_rng(9)
        g = two_groups(1500, rng)
        x = rng.integers(1, 8, 3000)
        ranges = [(t - 0.5, t + 0.5) for t in range(1, 8)]
        out = fairness.debias_ordinal(x, ranges, g, seed=0)
        assert stats.ks_2samp(out[g == 0], out[g == 1]).pvalue > 0.01

    def test_overlap_rejected(self):
        with pytest.raises(DebiasError):
            fairness.jitter([1], [(0, 2), (1, 3)], np.random.default_rng(0))


class TestMixed:
    def test_no_point_mass(self):
        rng = np.random.default_rng(10)
        x = rng.normal(size=100) + 5
        g = np.repeat([0, 1], 50)
        u, xt = fairness.debias_mixed(x, 0.0, g)
        np.testing.assert_allclose(xt, fairness.debias_continuous(x, g))
        assert set(fairness.sigma(u.astype(int), g, 2)) == {1}

    def test_all_point_mass(self):
        g = np.repeat([0, 1], 50)
        u, xt = fairness.debias_mixed(np.zeros(100), 0.0, g, seed=1)
        assert set(fairness.sigma(u.astype(int), g, 2)) == {2}
        assert np.all((xt >= 0) & (xt < 1)) and len(np.unique(xt)) == 100

    def test_group_entirely_at_mass(self):
        with pytest.raises(DebiasError):
            fairness.debias_mixed([0, 0, 1, 2, 0, 3], 0.0, [0, 0, 1, 1, 0, 1])

    def test_independence(self):
        rng = np.random.default_rng(11)
        n = 4000
        g = rng.integers(0, 2, n)
        zero = rng.random(n) < np.where(g == 1, 0.55, 0.25)
        x = np.where(zero, 0.0, rng.lognormal(1.0 + 0.8 * g, 0.5))
        u, xt = fairness.debias_mixed(x, 0.0, g, seed=2)
        np.testing.assert_array_equal(fairness.sigma(u.astype(int), g, 2), zero + 1)
        table = np.array([np.bincount(u[g == a].astype(int), minlength=5)[1:] for a in (0, 1)])
        table = table[:, table.sum(axis=0) > 0]
        assert stats.chi2_contingency(table)[1] > 0.01
        assert stats.ks_2samp(xt[g == 0], xt[g == 1]).pvalue > 0.01


SCHEMA = FeatureSchema.parse(
    "c: continuous\nk: categorical k=3\no: ordinal levels=1..5\nm: mixed a=0.0\nn: continuous\n")


def sample_matrix(n, rng, shift=0.8):
    g = rng.integers(0, 2, n)
    c = rng.normal(size=n) + shift * g
    k = np.where(rng.random(n) < 0.3 + 0.3 * g, 1, rng.integers(2, 4, n))
    o = np.clip(np.round(3 + rng.normal(size=n) + shift * g), 1, 5)
    m = np.where(rng.random(n) < 0.4, 0.0, rng.lognormal(shift * g, 0.5))
    miss = rng.normal(size=n) - shift * g
    miss[rng.random(n) < 0.1] = np.nan
    return np.column_stack([c, k, o, m, miss]), g


class TestMatrix:
    def test_shapes_and_independence(self):
        rng = np.random.default_rng(12)
        X, g = sample_matrix(4000, rng)
        d = fairness.debias_matrix(X, SCHEMA, g, seed=5)
        assert d.names == ["c", "k", "o", "m_indicator", "m", "n_indicator", "n"]
        assert d.values.shape == (4000, 7)
        for j, name in enumerate(d.names):
            col = d.values[:, j]
            if name in ("k", "m_indicator", "n_indicator"):
                table = np.array([np.bincount(col[g == a].astype(int), minlength=7) for a in (0, 1)])
                table = table[:, table.sum(axis=0) > 0]
                assert stats.chi2_contingency(table)[1] > 0.01, name
            else:
                assert stats.ks_2samp(col[g == 0], col[g == 1]).pvalue > 0.01, name

    def test_no_group_difference_is_rank_transform(self):
        rng = np.random.default_rng(13)
        X = rng.normal(size=(500, 1))
        g = np.repeat([0, 1], 250)
        d = fairness.debias_matrix(X, FeatureSchema.parse("c: continuous"), g, names=["c"])
        rho = stats.spearmanr(d.values[:, 0], X[:, 0]).statistic
        assert rho > 0.99

    def test_seeds_differ(self):
        rng = np.random.default_rng(14)
        X, g = sample_matrix(500, rng)
        a = fairness.debias_matrix(X, SCHEMA, g, seed=1).values
        b = fairness.debias_matrix(X, SCHEMA, g, seed=2).values
        c = fairness.debias_matrix(X, SCHEMA, g, seed=1).values
        assert not np.array_equal(a, b)
        np.testing.assert_array_equal(a, c)
        # continuous columns do not depend on the seed
        np.testing.assert_array_equal(a[:, 0], b[:, 0])

    def test_column_order_independent(self):
        rng = np.random.default_rng(15)
        X, g = sample_matrix(400, rng)
        a = fairness.debias_matrix(X, SCHEMA, g, seed=3)
        perm = [4, 2, 0, 3, 1]
        names = [SCHEMA.names[i] for i in perm]
        b = fairness.debias_matrix(X[:, perm], SCHEMA, g, seed=3, names=names)
        for name in a.names:
            np.testing.assert_array_equal(a.values[:, a.names.index(name)], b.values[:, b.names.index(name)])

    def test_json_round_trip(self, tmp_path):
        rng = np.random.default_rng(16)
        X, g = sample_matrix(300, rng)
        tr = fairness.Debiaser.fit(X, SCHEMA, g, seed=9)
        tr.save(tmp_path / "d.json")
        back = fairness.Debiaser.load(tmp_path / "d.json")
        Xt, gt = sample_matrix(100, rng)
        np.testing.assert_array_equal(tr.apply(Xt, gt), back.apply(Xt, gt))
        assert json.loads(tr.dumps())["seed"] == 9

    def test_errors_name_the_column(self):
        X = np.column_stack([np.ones(10), np.arange(10.0)])
        g = np.repeat([0, 1], 5)
        schema = FeatureSchema.parse("flat: continuous\nok: continuous")
        with pytest.raises(DebiasError, match="flat"):
            fairness.debias_matrix(X, schema, g)
        with pytest.raises(DebiasError):
            fairness.debias_matrix(X, FeatureSchema.parse("ok: continuous"), g, names=["zz", "ok"])
