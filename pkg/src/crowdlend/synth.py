"""Seeded synthetic loan markets with known default probabilities.

Borrowers carry three latent factors (credit quality, capacity, behaviour).
The true default probability is a logistic function of those factors, so an
oracle scorer exists. Observed columns are noisy transforms of the factors,
optionally shifted by a binary sensitive attribute that never touches the
true risk. Crowd pricing is a saturating function of true risk plus noise
whose downward part is never corrected.
"""

from __future__ import annotations

import calendar
import datetime as dt
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from . import finance
from .dataset import GRADES, FeatureSchema, ListingRecord, LoanRecord

SCHEMA_TEXT = """\
amount: continuous
credit_history_days: continuous
income: continuous
dti: continuous
bank_util: continuous
revolving_balance: continuous
delinquent_amount: mixed a=0.0
employment_status: categorical k=3
homeowner: categorical k=2
scorex_bin: ordinal levels=1..11
credit_grade: ordinal levels=AA,A,B,C,D,E,HR
"""

HIGH_OCCUPATIONS = {"nurse": 0.92, "teacher_aide": 0.88, "secretary": 0.95, "receptionist": 0.90}
LOW_OCCUPATIONS = {"electrician": 0.03, "construction": 0.08, "engineer": 0.15, "mechanic": 0.05}
MID_OCCUPATIONS = {"manager": 0.45, "analyst": 0.55, "sales": 0.50}


def schema() -> FeatureSchema:
    return FeatureSchema.parse(SCHEMA_TEXT)


def group_mapping() -> dict[str, float]:
    return {**HIGH_OCCUPATIONS, **LOW_OCCUPATIONS, **MID_OCCUPATIONS}


@dataclass(frozen=True)
class GeneratorConfig:
    n: int = 20000
    seed: int = 0
    n_months: int = 19
    start: dt.date = dt.date(2007, 3, 1)
    term_months: int = 36
    default_rate: float = 0.30
    risk_scale: float = 2.6
    # crowd pricing
    crowd_noise: float = 0.05
    crowd_down_noise: float = 0.045
    one_sided: bool = True
    crowd_scorex_bias: float = 0.0
    scorex_signal: float = 1.0
    # sensitive attribute
    group_strength: float = 0.0
    unassigned_fraction: float = 0.15
    # crowd funding (markets only)
    tolerance_range: tuple[float, float] = (0.35, 0.95)
    cross_month_fraction: float = 0.03
    mean_default_payments: float = 12.0

    def __post_init__(self):
        if self.n < 0:
            raise ValueError("n must be nonnegative")
        if min(self.crowd_noise, self.crowd_down_noise, self.risk_scale) < 0:
            raise ValueError("noise scales must be nonnegative")
        if not 0 < self.default_rate < 1:
            raise ValueError("default_rate must be in (0, 1)")


def crowd_curve(p):
    """Premium the crowd would charge at true risk ``p``; flattens for risky loans."""
    return 0.04 + 0.20 * (1.0 - np.exp(-np.asarray(p) / 0.25))


def _month_start(start: dt.date, k: int) -> dt.date:
    y, m = divmod(start.month - 1 + k, 12)
    return dt.date(start.year + y, m + 1, 1)


def risk_free_table(cfg: GeneratorConfig) -> finance.RateTable:
    """Monthly 3-year rate drifting from 4.6% down to about 2%."""
    dates = [_month_start(cfg.start, k) for k in range(cfg.n_months + 1)]
    frac = np.linspace(0, 1, len(dates))
    rates = 0.046 - 0.026 * frac + 0.002 * np.sin(frac * 9)
    return finance.RateTable(dates, [round(float(r), 5) for r in rates])


@dataclass
class Population:
    """Per-borrower arrays; everything downstream is derived from these."""

    p_true: np.ndarray
    premium: np.ndarray
    group: np.ndarray
    month: np.ndarray
    columns: dict[str, np.ndarray]
    occupation: np.ndarray
    grade: np.ndarray
    scorex: np.ndarray
    history: np.ndarray
    amount: np.ndarray


def _population(cfg: GeneratorConfig, n: int, rng: np.random.Generator) -> Population:
    z = rng.standard_normal((n, 3))
    group = (rng.random(n) < 0.5).astype(int)
    # observed features see a group-shifted copy of the latent factors
    shift = cfg.group_strength * (2 * group - 1)
    zo = z.copy()
    zo[:, 0] += shift
    zo[:, 1] += shift
    e = rng.standard_normal((n, 8))

    amount = np.clip(np.round(np.exp(8.4 + 0.25 * zo[:, 1] + 0.55 * e[:, 0]) / 25) * 25, 1000, 25000)
    history = np.clip(np.exp(8.35 + 0.35 * zo[:, 2] + 0.12 * e[:, 1]), 90, 20000).astype(int)
    income = np.exp(10.7 + 0.45 * zo[:, 1] + 0.15 * e[:, 2])
    dti = np.clip(0.32 - 0.09 * zo[:, 1] + 0.08 * e[:, 3], 0.01, 2.0)
    bank_util = 1.0 / (1.0 + np.exp(1.2 * zo[:, 0] - 0.3 * e[:, 4]))
    revolving = np.exp(9.3 + 0.3 * zo[:, 1] - 0.3 * zo[:, 2] + 0.6 * e[:, 5])
    clean = rng.random(n) < 1.0 / (1.0 + np.exp(-(0.4 + 1.1 * zo[:, 0])))
    delinquent = np.where(clean, 0.0, np.round(np.exp(6.5 - 0.6 * zo[:, 0] + 0.8 * e[:, 6]), 2))
    emp_score = 0.9 * zo[:, 1] + rng.standard_normal(n)
    employment = np.where(emp_score > 0.3, 1, np.where(emp_score > -0.9, 2, 3)).astype(float)
    homeowner = (rng.random(n) < 1.0 / (1.0 + np.exp(-(0.7 * zo[:, 1] - 0.1)))).astype(float) + 1.0
    sx_lat = cfg.scorex_signal * zo[:, 0] + 0.6 * e[:, 7]
    sx_lat = (sx_lat - sx_lat.mean()) / (sx_lat.std() + 1e-12) if n > 1 else sx_lat
    scorex = np.clip(np.round(6 + 2.2 * sx_lat), 1, 11).astype(int)
    grade_lat = 0.8 * zo[:, 0] + 0.6 * rng.standard_normal(n)
    grade = np.clip(np.round(3.5 - 1.5 * grade_lat), 0, 6).astype(int)

    score = -(0.62 * z[:, 0] + 0.5 * z[:, 1] + 0.55 * z[:, 2]) + 0.25 * np.maximum(z[:, 0], 0) ** 2
    score = cfg.risk_scale * (score - score.mean()) / (score.std() + 1e-12) if n > 1 else score * 0
    if n:
        shift0 = brentq(lambda c: np.mean(1 / (1 + np.exp(-(score + c)))) - cfg.default_rate, -20, 20)
    else:
        shift0 = 0.0
    p_true = 1.0 / (1.0 + np.exp(-(score + shift0)))

    noise = cfg.crowd_noise * rng.standard_normal(n)
    # underpricing is proportional to true risk and never bid back up
    down = cfg.crowd_down_noise * np.abs(rng.standard_normal(n)) * p_true / cfg.default_rate
    premium = crowd_curve(p_true) + noise - (down if cfg.one_sided else down * rng.choice([-1, 1], n))
    premium -= cfg.crowd_scorex_bias * (scorex - 6) / 5
    premium = np.clip(premium, 0.005, 0.27)

    occ_hi, occ_lo, occ_mid = (np.array(list(d)) for d in (HIGH_OCCUPATIONS, LOW_OCCUPATIONS, MID_OCCUPATIONS))
    occupation = np.where(group == 1, rng.choice(occ_hi, n), rng.choice(occ_lo, n)).astype(object)
    mid = rng.random(n) < cfg.unassigned_fraction
    occupation[mid] = rng.choice(occ_mid, int(mid.sum()))

    cols = {
        "income": np.round(income, 2), "dti": np.round(dti, 4), "bank_util": np.round(bank_util, 4),
        "revolving_balance": np.round(revolving, 2), "delinquent_amount": delinquent,
        "employment_status": employment, "homeowner": homeowner,
    }
    month = rng.integers(0, cfg.n_months, n)
    return Population(p_true, premium, group, month, cols, occupation, grade, scorex, history, amount)


def _days_in_month(d: dt.date) -> int:
    return calendar.monthrange(d.year, d.month)[1]


def _dates(cfg: GeneratorConfig, month: np.ndarray, rng):
    """Creation and origination dates; a few listings straddle two months."""
    created, originated = [], []
    for m in month:
        first = _month_start(cfg.start, int(m))
        dim = _days_in_month(first)
        o = first + dt.timedelta(days=int(rng.integers(0, dim)))
        lag = int(rng.integers(0, 4))
        c = o - dt.timedelta(days=lag)
        if c.month != o.month or rng.random() < cfg.cross_month_fraction:
            # listing opened in the previous month
            c = first - dt.timedelta(days=int(rng.integers(1, 8)))
        originated.append(o)
        created.append(c)
    return created, originated


def _listing(i: int, pop: Population, amount, max_rate, created) -> ListingRecord:
    feats = {k: float(v[i]) for k, v in pop.columns.items()}
    return ListingRecord(
        listing_id=f"L{i:06d}", amount=float(amount[i]), max_borrower_rate=float(max_rate[i]),
        creation_date=created[i], credit_grade=GRADES[pop.grade[i]], scorex_bin=int(pop.scorex[i]),
        credit_history_days=int(pop.history[i]), features=feats, occupation=str(pop.occupation[i]),
        location=None)


def _loan(listing: ListingRecord, rate: float, orig: dt.date, p: float, term: int,
          mean_paid: float, rng) -> LoanRecord:
    defaulted = rng.random() < p
    sched = finance.schedule(listing.amount, rate, term)
    if defaulted:
        m = int(min(rng.poisson(mean_paid), term - 1))
        principal = float(sched.principal[:m].sum())
        interest = float(sched.interest[:m].sum())
    else:
        principal, interest = listing.amount, float(sched.interest.sum())
    return LoanRecord(listing, rate, orig, term, round(principal, 6), round(interest, 6),
                      "Defaulted" if defaulted else "Completed", int(defaulted))


@dataclass
class Market:
    listings: list[ListingRecord]
    funded: np.ndarray
    loans: list[LoanRecord]
    p_true: np.ndarray
    premium: np.ndarray
    group: np.ndarray
    rates: finance.RateTable
    config: GeneratorConfig
    loan_index: np.ndarray = field(default=None)

    @property
    def unfunded(self) -> list[ListingRecord]:
        return [l for l, f in zip(self.listings, self.funded) if not f]

    @property
    def loan_p_true(self) -> np.ndarray:
        return self.p_true[self.loan_index]


def _final_rates(cfg, pop, originated, rates):
    rf = np.array([rates.lookup(d) for d in originated])
    return np.round(rf + pop.premium, 6)


def generate(cfg: GeneratorConfig = GeneratorConfig()) -> tuple[list[LoanRecord], np.ndarray]:
    """``cfg.n`` funded loans and their true default probabilities."""
    rng = np.random.default_rng(cfg.seed)
    pop = _population(cfg, cfg.n, rng)
    created, originated = _dates(cfg, pop.month, rng)
    rates = risk_free_table(cfg)
    final = _final_rates(cfg, pop, originated, rates)
    max_rate = np.minimum(0.35, np.ceil((final + rng.uniform(0.0, 0.06, cfg.n)) * 1e4) / 1e4)
    loans = []
    for i in range(cfg.n):
        listing = _listing(i, pop, pop.amount, max_rate, created)
        loans.append(_loan(listing, float(final[i]), originated[i], float(pop.p_true[i]),
                           cfg.term_months, cfg.mean_default_payments, rng))
    return loans, pop.p_true


def generate_market(cfg: GeneratorConfig = GeneratorConfig()) -> Market:
    """``cfg.n`` listings shown to monthly crowds; each crowd funds by its own tolerance.

    Crowd ``m`` funds a listing when its premium is below the crowd's
    tolerance quantile and the rate fits under the borrower's maximum.
    """
    rng = np.random.default_rng(cfg.seed)
    pop = _population(cfg, cfg.n, rng)
    created, originated = _dates(cfg, pop.month, rng)
    rates = risk_free_table(cfg)
    final = _final_rates(cfg, pop, originated, rates)
    lo, hi = cfg.tolerance_range
    tol_q = rng.permutation(np.linspace(lo, hi, cfg.n_months))
    cut = np.quantile(pop.premium, tol_q) if cfg.n else tol_q
    # borrower caps are drawn on a coarse grid so cells stay populated
    max_rate = np.minimum(0.35, np.round(rng.uniform(0.12, 0.36, cfg.n), 2))
    # the crowd of the creation month decides; listings opened before the
    # window fall to the first crowd
    crowd = np.array([(c.year - cfg.start.year) * 12 + c.month - cfg.start.month for c in created],
                     dtype=int)
    crowd = np.clip(crowd, 0, cfg.n_months - 1)
    funded = (pop.premium <= cut[crowd]) & (final <= max_rate)
    listings, loans, idx = [], [], []
    for i in range(cfg.n):
        listing = _listing(i, pop, pop.amount, max_rate, created)
        listings.append(listing)
        if funded[i]:
            loans.append(_loan(listing, float(final[i]), originated[i], float(pop.p_true[i]),
                               cfg.term_months, cfg.mean_default_payments, rng))
            idx.append(i)
    return Market(listings, funded, loans, pop.p_true, pop.premium, pop.group, rates, cfg,
                  np.array(idx, dtype=int))
