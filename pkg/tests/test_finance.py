import datetime as dt

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from crowdlend import finance

# 40-digit reference values for the $5000 / 16.2% / 36-month loan at 2.8%/12,
# computed independently with mpmath annuity sums.
PAYMENT = 176.279266275460545
NPV_COMPLETED = 1080.031186654513
NPV_DEFAULT_12 = -2916.385318930461
CUM_PRINCIPAL_12 = 1406.770414122079


def loop_npv(series, d):
    return sum(v / (1 + d) ** t for t, v in enumerate(series))


class TestSchedule:
    def test_reference_payment(self):
        s = finance.schedule(5000, 0.162, 36)
        assert s.payment == pytest.approx(PAYMENT, abs=1e-9)
        assert round(s.payment, 2) == 176.28

    def test_zero_rate(self):
        s = finance.schedule(1200, 0.0, 12)
        assert s.payment == 100.0
        assert np.all(s.interest == 0)

    def test_interest_is_prior_balance_times_rate(self):
        s = finance.schedule(5000, 0.162, 36)
        balance = 5000 - np.r_[0, np.cumsum(s.principal)[:-1]]
        np.testing.assert_allclose(s.interest, balance * 0.162 / 12, atol=1e-9)

    @given(st.floats(100, 50000), st.floats(0, 0.35), st.integers(1, 60))
    def test_principal_sums_to_amount(self, amount, rate, term):
        s = finance.schedule(amount, rate, term)
        assert abs(s.principal.sum() - amount) <= 0.01

    @pytest.mark.parametrize("args", [(0, 0.1, 12), (100, -0.01, 12), (100, 0.1, 0)])
    def test_bad_inputs(self, args):
        with pytest.raises(ValueError):
            finance.schedule(*args)


class TestDefaultMonth:
    def test_edges(self):
        s = finance.schedule(5000, 0.162, 36)
        assert finance.infer_default_month(s, 0.0) == 0
        assert finance.infer_default_month(s, 5000.0) == 36

    def test_twelve_months(self):
        s = finance.schedule(5000, 0.162, 36)
        assert s.cumulative_principal()[11] == pytest.approx(CUM_PRINCIPAL_12, abs=1e-8)
        assert finance.infer_default_month(s, CUM_PRINCIPAL_12) == 12
        # a partial thirteenth payment is discarded
        assert finance.infer_default_month(s, CUM_PRINCIPAL_12 + 50) == 12

    @given(st.floats(0, 5000), st.floats(0, 5000))
    def test_monotone(self, a, b):
        s = finance.schedule(5000, 0.162, 36)
        lo, hi = sorted((a, b))
        assert finance.infer_default_month(s, lo) <= finance.infer_default_month(s, hi)


class TestCashflowsAndNpv:
    def test_completed_series(self):
        cf = finance.cashflows(5000, 0.162, 36, False)
        assert cf[0] == -5000 and len(cf) == 37
        np.testing.assert_allclose(cf[1:], PAYMENT, atol=1e-9)

    def test_default_after_twelve(self):
        cf = finance.cashflows(5000, 0.162, 36, True, CUM_PRINCIPAL_12)
        assert np.count_nonzero(cf[1:]) == 12
        assert np.all(cf[13:] == 0)

    def test_default_at_zero(self):
        cf = finance.cashflows(5000, 0.162, 36, True, 0.0)
        assert cf[0] == -5000 and np.all(cf[1:] == 0)

    def test_reference_npvs(self):
        d = 0.028 / 12
        assert finance.npv(finance.cashflows(5000, 0.162, 36, False), d) == pytest.approx(NPV_COMPLETED, abs=1e-6)
        dflt = finance.cashflows(5000, 0.162, 36, True, CUM_PRINCIPAL_12)
        assert finance.npv(dflt, d) == pytest.approx(NPV_DEFAULT_12, abs=1e-6)

    def test_zero_discount(self):
        cf = finance.cashflows(3000, 0.2, 24, False)
        assert finance.npv(cf, 0.0) == pytest.approx(cf[1:].sum() - 3000, abs=1e-9)

    def test_npv_matches_loop(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            cf = np.r_[-rng.uniform(100, 1000), rng.uniform(0, 100, 24)]
            d = rng.uniform(0, 0.02)
            assert finance.npv(cf, d) == pytest.approx(loop_npv(cf, d), rel=1e-12)

    def test_annuity_identity(self):
        # discounting at the loan's own rate gives zero
        cf = finance.cashflows(8000, 0.19, 36, False)
        assert abs(finance.npv(cf, 0.19 / 12)) < 0.01

    def test_additive_over_rows(self):
        rng = np.random.default_rng(1)
        m = np.column_stack([-rng.uniform(100, 500, 10), rng.uniform(0, 40, (10, 12))])
        assert finance.npv(m.sum(axis=0)) == pytest.approx(finance.npv(m).sum(), rel=1e-12)

    @given(st.floats(0, 0.05), st.floats(0, 0.05))
    def test_decreasing_in_discount(self, a, b):
        cf = finance.cashflows(5000, 0.162, 36, False)
        lo, hi = sorted((a, b))
        if hi - lo > 1e-6:
            assert finance.npv(cf, lo) > finance.npv(cf, hi)

    def test_bad_discount(self):
        with pytest.raises(ValueError):
            finance.npv([-1, 2], -1.0)

    def test_write_cashflows(self, tmp_path, small_loans):
        path = tmp_path / "cf.csv"
        finance.write_cashflows(path, small_loans[:3])
        rows = path.read_text().splitlines()
        assert rows[0] == "loan_id,t,amount"
        assert rows[1].startswith(f"{small_loans[0].loan_id},0,-")


class TestIrr:
    def test_one_period(self):
        assert finance.irr([-100, 110]) == pytest.approx(0.10, abs=1e-9)

    def test_break_even(self):
        assert finance.irr([-100, 50, 50]) == pytest.approx(0.0, abs=1e-9)

    def test_no_inflows(self):
        assert finance.irr([-100, 0, 0]) == -1.0

    def test_matches_polynomial_root(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            cf = np.r_[-rng.uniform(500, 1000), rng.uniform(0, 100, 12)]
            # NPV(r) = 0  <=>  sum cf_t x^(T-t) = 0 with x = 1 + r
            roots = np.roots(cf)
            real = roots[(abs(roots.imag) < 1e-9) & (roots.real > 0)].real
            assert len(real) == 1
            assert finance.irr(cf) == pytest.approx(real[0] - 1, abs=1e-7)

    def test_rows_agree_with_scalar(self):
        rng = np.random.default_rng(3)
        flows = np.column_stack([-rng.uniform(100, 1000, 30), rng.uniform(0, 80, (30, 18))])
        rows = finance.irr_rows(flows)
        for f, r in zip(flows, rows):
            assert r == pytest.approx(finance.irr(f), abs=1e-8)

    def test_rows_special_cases(self):
        out = finance.irr_rows(np.array([[0.0, 1.0, 1.0], [-5.0, 0.0, 0.0]]))
        assert np.isnan(out[0]) and out[1] == -1.0

    @settings(max_examples=200)
    @given(st.floats(1, 1e5), st.lists(st.floats(0, 1e4), min_size=1, max_size=48))
    def test_residual(self, invest, inflows):
        cf = np.r_[-invest, inflows]
        # roots closer to -1 than float spacing are not representable
        assume(sum(inflows) >= 1e-3 * invest)
        r = finance.irr(cf)
        assert abs(finance.npv(cf, r)) <= 1e-6 * invest

    def test_annualize(self):
        assert finance.annualize(0.01) == pytest.approx(1.01 ** 12 - 1)
        assert finance.annualize(0.01, "simple") == pytest.approx(0.12)
        with pytest.raises(ValueError):
            finance.annualize(0.01, "other")


class TestRates:
    def test_premium(self):
        assert finance.risk_premium(0.18, dt.date(2008, 1, 1), finance.RateTable.constant(0.028)) == pytest.approx(0.152)

    def test_fixed_mode_preserves_order(self):
        t = finance.RateTable.constant(0.03)
        d = dt.date(2008, 1, 1)
        assert finance.risk_premium(0.20, d, t) > finance.risk_premium(0.15, d, t)

    def test_dated_mode_can_reverse_rank(self):
        t = finance.RateTable([dt.date(2007, 1, 1), dt.date(2008, 1, 1)], [0.05, 0.02])
        # 0.16 in 2007 vs 0.15 in 2008: raw order and premium order disagree
        a = finance.risk_premium(0.16, dt.date(2007, 6, 1), t)
        b = finance.risk_premium(0.15, dt.date(2008, 6, 1), t)
        assert a == pytest.approx(0.11) and b == pytest.approx(0.13)
        assert a < b

    def test_lookup_nearest_prior(self):
        t = finance.RateTable([dt.date(2007, 1, 1), dt.date(2007, 2, 1)], [0.04, 0.03])
        assert t.lookup(dt.date(2007, 1, 31)) == 0.04
        assert t.lookup(dt.date(2007, 2, 1)) == 0.03
        with pytest.raises(KeyError):
            t.lookup(dt.date(2006, 12, 31))

    def test_range_checked(self):
        with pytest.raises(ValueError):
            finance.RateTable([dt.date(2007, 1, 1)], [0.25])
        with pytest.raises(ValueError):
            finance.RateTable.constant(-0.01)

    def test_csv_round_trip(self, tmp_path):
        t = finance.RateTable([dt.date(2007, 1, 1), dt.date(2007, 2, 1)], [0.04, 0.0312])
        t.to_csv(tmp_path / "r.csv")
        u = finance.RateTable.from_csv(tmp_path / "r.csv")
        assert u.dates == t.dates and u.rates == t.rates
