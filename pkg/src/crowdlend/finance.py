"""Loan cashflow reconstruction, NPV/IRR and risk premium.

Rates are annual nominal fractions; the monthly rate is ``annual / 12``.
Cashflow series are plain numpy arrays indexed by month, with the funded
amount as a negative entry at ``t = 0``.
"""

from __future__ import annotations

import bisect
import csv
import datetime as dt
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import brentq

DEFAULT_DISCOUNT = 0.028 / 12


@dataclass(frozen=True)
class AmortizationSchedule:
    amount: float
    annual_rate: float
    payment: float
    principal: np.ndarray
    interest: np.ndarray

    @property
    def term_months(self) -> int:
        return len(self.principal)

    def cumulative_principal(self) -> np.ndarray:
        return np.cumsum(self.principal)


def monthly_payment(amount, annual_rate, term_months):
    """Level annuity payment; works elementwise on arrays."""
    amount = np.asarray(amount, dtype=float)
    r = np.asarray(annual_rate, dtype=float) / 12.0
    with np.errstate(divide="ignore", invalid="ignore"):
        # expm1/log1p keep tiny positive rates accurate
        pay = amount * r / -np.expm1(-term_months * np.log1p(r))
    return np.where(r == 0, amount / term_months, pay)


def schedule(amount: float, annual_rate: float, term_months: int) -> AmortizationSchedule:
    """Level-payment amortization at ``annual_rate / 12`` per month."""
    if amount <= 0:
        raise ValueError("amount must be positive")
    if annual_rate < 0:
        raise ValueError("annual_rate must be nonnegative")
    if term_months < 1:
        raise ValueError("term_months must be >= 1")
    r = annual_rate / 12.0
    pay = float(monthly_payment(amount, annual_rate, term_months))
    principal = np.empty(term_months)
    interest = np.empty(term_months)
    balance = amount
    for m in range(term_months):
        interest[m] = balance * r
        principal[m] = pay - interest[m]
        balance -= principal[m]
    # absorb float drift into the final installment
    principal[-1] += balance
    return AmortizationSchedule(amount, annual_rate, pay, principal, interest)


def infer_default_month(sched: AmortizationSchedule, principal_paid: float) -> int:
    """Number of scheduled payments fully covered by ``principal_paid``.

    Partial payments are discarded (floor convention). A relative slack of
    1e-9 of the amount absorbs rounding in recorded principal totals.
    """
    cum = sched.cumulative_principal()
    slack = 1e-9 * sched.amount
    return int(np.searchsorted(cum, principal_paid + slack, side="right"))


def cashflows(amount: float, annual_rate: float, term_months: int, defaulted: bool,
              principal_paid: float = 0.0) -> np.ndarray:
    """Monthly cashflow series of length ``term_months + 1``."""
    sched = schedule(amount, annual_rate, term_months)
    flows = np.zeros(term_months + 1)
    flows[0] = -amount
    n_paid = infer_default_month(sched, principal_paid) if defaulted else term_months
    flows[1:n_paid + 1] = sched.payment
    return flows


def loan_cashflows(loan) -> np.ndarray:
    """Cashflow series for a :class:`~crowdlend.dataset.LoanRecord`."""
    return cashflows(loan.listing.amount, loan.final_rate, loan.term_months,
                     loan.defaulted, loan.principal_paid)


def cashflow_matrix(loans) -> np.ndarray:
    """Stack loan cashflows into an ``(n_loans, max_term + 1)`` matrix."""
    loans = list(loans)
    if not loans:
        return np.zeros((0, 1))
    width = max(l.term_months for l in loans) + 1
    out = np.zeros((len(loans), width))
    for i, loan in enumerate(loans):
        cf = loan_cashflows(loan)
        out[i, :len(cf)] = cf
    return out


def write_cashflows(path, loans) -> None:
    """Long-format dump: one ``loan_id, t, amount`` row per nonzero flow."""
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["loan_id", "t", "amount"])
        for loan in loans:
            for t, v in enumerate(loan_cashflows(loan)):
                if v != 0:
                    w.writerow([loan.loan_id, t, f"{v:.6f}"])


def discount_factors(n: int, monthly_discount) -> np.ndarray:
    return (1.0 + np.asarray(monthly_discount, dtype=float)[..., None]) ** -np.arange(n)


def npv(series, monthly_discount: float = DEFAULT_DISCOUNT):
    """Net present value of one series, or of each row of a 2-D array."""
    if monthly_discount <= -1:
        raise ValueError("discount must exceed -1")
    series = np.asarray(series, dtype=float)
    disc = (1.0 + monthly_discount) ** -np.arange(series.shape[-1])
    return series @ disc


def _npv_rows(flows: np.ndarray, rates: np.ndarray) -> np.ndarray:
    t = np.arange(flows.shape[1])
    return np.sum(flows * (1.0 + rates[:, None]) ** -t, axis=1)


def irr(series, tol: float = 1e-6) -> float:
    """Monthly internal rate of return of a conventional series.

    Returns -1.0 when nothing is ever paid back. Raises ``ValueError`` if no
    sign change is found after widening the bracket.
    """
    series = np.asarray(series, dtype=float)
    outflow = -series[0]
    inflow = series[1:].sum()
    if outflow <= 0 or np.any(series[1:] < 0):
        raise ValueError("series must be one outflow followed by nonnegative inflows")
    if inflow <= 0:
        return -1.0
    t = np.arange(len(series))

    def f(r):
        return float(series @ (1.0 + r) ** -t)

    lo, hi = -0.5, 1.0
    while f(lo) < 0:
        lo = -1.0 + (lo + 1.0) / 10.0
        if lo + 1.0 < 1e-12:
            raise ValueError("IRR bracket failed on the low side")
    while f(hi) > 0:
        hi *= 4.0
        if hi > 1e6:
            raise ValueError("IRR bracket failed on the high side")
    root = brentq(f, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)
    if abs(f(root)) > tol * outflow:
        raise ValueError("IRR did not converge")
    return root


def irr_rows(flows: np.ndarray, iters: int = 200) -> np.ndarray:
    """Vectorized bisection IRR for each row of a cashflow matrix.

    Rows with no investment get NaN; rows with no inflow get -1.
    """
    flows = np.atleast_2d(np.asarray(flows, dtype=float))
    n = flows.shape[0]
    out = np.full(n, np.nan)
    invest = -flows[:, 0]
    inflow = flows[:, 1:].sum(axis=1)
    ok = invest > 0
    out[ok & (inflow <= 0)] = -1.0
    rows = np.flatnonzero(ok & (inflow > 0))
    if rows.size == 0:
        return out
    f = flows[rows]
    lo = np.full(rows.size, -0.999999)
    hi = np.full(rows.size, 1.0)
    # widen the upper bracket where NPV is still positive
    for _ in range(60):
        pos = _npv_rows(f, hi) > 0
        if not pos.any():
            break
        hi[pos] *= 2.0
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        v = _npv_rows(f, mid)
        up = v > 0
        lo = np.where(up, mid, lo)
        hi = np.where(up, hi, mid)
        if np.all(hi - lo < 1e-15):
            break
    out[rows] = 0.5 * (lo + hi)
    return out


def annualize(monthly, method: str = "compound"):
    """Annualized IRR; ``compound`` gives (1+m)^12 - 1, ``simple`` gives 12m."""
    monthly = np.asarray(monthly, dtype=float)
    if method == "compound":
        res = (1.0 + monthly) ** 12 - 1.0
    elif method == "simple":
        res = 12.0 * monthly
    else:
        raise ValueError(f"unknown annualization method {method!r}")
    return res if res.ndim else float(res)


@dataclass
class RateTable:
    """Risk-free rate lookup, either by date (nearest prior entry) or fixed."""

    dates: list[dt.date] = field(default_factory=list)
    rates: list[float] = field(default_factory=list)
    fixed: float | None = None

    def __post_init__(self):
        if self.fixed is not None:
            if not 0 <= self.fixed <= 0.2:
                raise ValueError("risk-free rate must lie in [0, 0.2]")
            return
        pairs = sorted(zip(self.dates, self.rates))
        self.dates = [d for d, _ in pairs]
        self.rates = [float(r) for _, r in pairs]
        for r in self.rates:
            if not 0 <= r <= 0.2:
                raise ValueError(f"risk-free rate {r} outside [0, 0.2]")

    @classmethod
    def constant(cls, rate: float) -> "RateTable":
        return cls(fixed=rate)

    @classmethod
    def from_csv(cls, path) -> "RateTable":
        dates, rates = [], []
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            for row in reader:
                if not row or row[0].strip().lower() in ("date", ""):
                    continue
                dates.append(dt.date.fromisoformat(row[0].strip()))
                rates.append(float(row[1]))
        return cls(dates, rates)

    def to_csv(self, path) -> None:
        with open(Path(path), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["date", "rate"])
            for d, r in zip(self.dates, self.rates):
                w.writerow([d.isoformat(), repr(r)])

    def lookup(self, date: dt.date) -> float:
        if self.fixed is not None:
            return self.fixed
        i = bisect.bisect_right(self.dates, date) - 1
        if i < 0:
            raise KeyError(f"no risk-free rate on or before {date}")
        return self.rates[i]


def risk_premium(final_rate: float, date: dt.date, rates: RateTable) -> float:
    return final_rate - rates.lookup(date)
