"""Machine-vs-crowd portfolio comparisons on funded loans.

Comparison 1 ranks loans by a risk score and grows budget-limited
portfolios. Comparison 2 (contraction) lets the machine prune the most
lenient crowd quintile's portfolio down to each other quintile's return
variance, within cells where listings look randomly assigned to crowds.
"""

from __future__ import annotations

import csv
import logging
import warnings
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import betainc

from . import finance
from .dataset import Cell, build_cells, feature_matrix, filter_cells
from .metrics import quantile_bin

log = logging.getLogger(__name__)


def _ids(loans) -> np.ndarray:
    return np.array([l.loan_id for l in loans], dtype=object)


def rank_order(scores, ids=None) -> np.ndarray:
    """Ascending score order; equal scores fall back to loan id."""
    scores = np.asarray(scores, dtype=float)
    if ids is None:
        return np.argsort(scores, kind="stable")
    return np.lexsort((np.asarray(ids, dtype=str), scores))


@dataclass
class Portfolio:
    loan_ids: list[str]
    investment: float
    npv: float
    irr: float
    variance: float | None = None

    def annual_irr(self, method: str = "compound") -> float:
        return finance.annualize(self.irr, method)


def loan_npvs(loans, discount: float = finance.DEFAULT_DISCOUNT) -> np.ndarray:
    return finance.npv(finance.cashflow_matrix(loans), discount)


def make_portfolio(loans, members: Sequence[int], discount: float = finance.DEFAULT_DISCOUNT,
                   variances=None, flows=None) -> Portfolio:
    members = np.asarray(members, dtype=int)
    flows = finance.cashflow_matrix(loans) if flows is None else flows
    total = flows[members].sum(axis=0) if len(members) else np.zeros(flows.shape[1])
    irr = float(finance.irr_rows(total[None, :])[0])
    var = None if variances is None else float(np.sum(np.asarray(variances)[members]))
    return Portfolio([loans[i].loan_id for i in members], float(-total[0]),
                     float(finance.npv(total, discount)), irr, var)


def rank_portfolio(loans, scores, budget: float, discount: float = finance.DEFAULT_DISCOUNT,
                   variances=None) -> Portfolio:
    """Safest loans first, stopping before the first loan that would exceed ``budget``."""
    order = rank_order(scores, _ids(loans))
    amounts = np.array([loans[i].listing.amount for i in order])
    k = int(np.searchsorted(np.cumsum(amounts), budget * (1 + 1e-12), side="right"))
    return make_portfolio(loans, order[:k], discount, variances)


@dataclass
class ReturnCurve:
    """One point per loan added in ascending score order."""

    size: np.ndarray
    investment: np.ndarray
    npv: np.ndarray
    irr: np.ndarray  # monthly; NaN below the minimum portfolio size
    order: np.ndarray

    def annual_irr(self, method: str = "compound") -> np.ndarray:
        return finance.annualize(self.irr, method)

    def at_budgets(self, budgets) -> list[tuple[float, float, float, float]]:
        """(budget, investment, NPV, monthly IRR) for each budget, per the ranking rule."""
        out = []
        for q in budgets:
            k = int(np.searchsorted(self.investment, q * (1 + 1e-12), side="right"))
            if k == 0:
                out.append((q, 0.0, 0.0, float("nan")))
            else:
                out.append((q, float(self.investment[k - 1]), float(self.npv[k - 1]),
                            float(self.irr[k - 1])))
        return out


def return_curve(loans, scores, discount: float = finance.DEFAULT_DISCOUNT,
                 min_irr_size: int = 200) -> ReturnCurve:
    order = rank_order(scores, _ids(loans))
    flows = finance.cashflow_matrix(loans)[order]
    cum = np.cumsum(flows, axis=0)
    size = np.arange(1, len(order) + 1)
    npv = finance.npv(cum, discount)
    irr = np.full(len(order), np.nan)
    keep = size >= min_irr_size
    if keep.any():
        irr[keep] = finance.irr_rows(cum[keep])
    return ReturnCurve(size, -cum[:, 0], npv, irr, order)


def scorex_scores(loans) -> np.ndarray:
    """Rank key that adds the best credit-score bins first."""
    return np.array([-(l.listing.scorex_bin or 0) for l in loans], dtype=float)


def random_curve(loans, budgets, n_reps: int = 100, seed: int = 0,
                 discount: float = finance.DEFAULT_DISCOUNT) -> np.ndarray:
    """Mean NPV at each budget when loans are added in random order."""
    rng = np.random.default_rng(seed)
    amounts = np.array([l.listing.amount for l in loans])
    npvs = loan_npvs(loans, discount)
    budgets = np.asarray(budgets, dtype=float)
    acc = np.zeros(len(budgets))
    for _ in range(n_reps):
        perm = rng.permutation(len(loans))
        ci, cn = np.cumsum(amounts[perm]), np.cumsum(npvs[perm])
        k = np.searchsorted(ci, budgets * (1 + 1e-12), side="right")
        acc += np.where(k > 0, cn[np.maximum(k - 1, 0)], 0.0)
    return acc / n_reps


def write_budget_table(path, budgets, machine: ReturnCurve, crowd: ReturnCurve,
                       method: str = "compound") -> None:
    """Investment / NPV / IRR rows for both orderings at each budget."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["investment", "machine_npv", "machine_irr", "premium_npv", "premium_irr"])
        for (q, _, mn, mi), (_, _, cn, ci) in zip(machine.at_budgets(budgets), crowd.at_budgets(budgets)):
            w.writerow([f"{q:.2f}", f"{mn:.2f}", _fmt_rate(finance.annualize(mi, method)),
                        f"{cn:.2f}", _fmt_rate(finance.annualize(ci, method))])


def _fmt_rate(x) -> str:
    return "" if np.isnan(x) else f"{float(x):.4f}"


def write_curve(path, curve: ReturnCurve, loans, method: str = "compound") -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["size", "loan_id", "investment", "npv", "irr"])
        air = curve.annual_irr(method)
        for i in range(len(curve.size)):
            w.writerow([int(curve.size[i]), loans[curve.order[i]].loan_id,
                        f"{curve.investment[i]:.2f}", f"{curve.npv[i]:.2f}", _fmt_rate(air[i])])


# ---------------------------------------------------------------- risk per loan

def estimate_default_prob(labels, scores, n_bins: int = 100) -> np.ndarray:
    """Empirical default rate of each loan's score-quantile bin."""
    labels = np.asarray(labels, dtype=float)
    bins = quantile_bin(scores, n_bins)
    rate = np.bincount(bins, labels, n_bins) / np.maximum(np.bincount(bins, minlength=n_bins), 1)
    return rate[bins]


def loan_return_variance(loan, p_default: float, discount: float = finance.DEFAULT_DISCOUNT,
                         default_payments: int = 12) -> float:
    return float(return_variances([loan], [p_default], discount, default_payments)[0])


def outcome_npvs(loans, discount: float = finance.DEFAULT_DISCOUNT, default_payments: int = 12):
    """NPV if repaid in full and if defaulting after ``default_payments`` payments."""
    amount = np.array([l.listing.amount for l in loans])
    rate = np.array([l.final_rate for l in loans])
    term = np.array([l.term_months for l in loans])
    pay = finance.monthly_payment(amount, rate, term)
    a = discount
    annuity = lambda m: (1 - (1 + a) ** -m) / a if a != 0 else m  # noqa: E731
    r_paid = -amount + pay * annuity(term)
    r_def = -amount + pay * annuity(np.minimum(default_payments, term))
    return r_paid, r_def


def return_variances(loans, p_default, discount: float = finance.DEFAULT_DISCOUNT,
                     default_payments: int = 12) -> np.ndarray:
    """Two-point return variance ``p(1-p)(R_paid - R_default)^2`` per loan."""
    p = np.asarray(p_default, dtype=float)
    if np.any((p < 0) | (p > 1)):
        raise ValueError("default probabilities must lie in [0, 1]")
    r_paid, r_def = outcome_npvs(loans, discount, default_payments)
    return p * (1 - p) * (r_paid - r_def) ** 2


# ---------------------------------------------------------------- crowds and cells

def month_of(d) -> tuple[int, int]:
    return (d.year, d.month)


@dataclass
class Crowd:
    crowd_id: tuple[int, int]
    loan_ids: list[str]
    variance: float = 0.0


def assign_crowds(loans, variances=None) -> dict[tuple[int, int], Crowd]:
    """One crowd per origination month; listings opened in another month are dropped."""
    crowds: dict = {}
    for i, loan in enumerate(loans):
        m = month_of(loan.origination_date)
        if month_of(loan.listing.creation_date) != m:
            continue
        c = crowds.setdefault(m, Crowd(m, []))
        c.loan_ids.append(loan.loan_id)
        if variances is not None:
            c.variance += float(variances[i])
    return dict(sorted(crowds.items()))


@dataclass
class CrowdQuintile:
    index: int
    crowds: list[tuple[int, int]]
    loan_ids: list[str]


def quintile_sizes(n_crowds: int, n_groups: int = 5) -> list[int]:
    """Equal split with the remainder going to the lowest quintiles."""
    base, rem = divmod(n_crowds, n_groups)
    return [base + (1 if q < rem else 0) for q in range(n_groups)]


def cell_quintiles(crowd_var: dict, n_groups: int = 5) -> dict[tuple[int, int], int]:
    """Map crowd -> quintile (1 = lowest portfolio variance)."""
    ranked = sorted(crowd_var, key=lambda c: (crowd_var[c], c))
    out, pos = {}, 0
    for q, size in enumerate(quintile_sizes(len(ranked), n_groups), start=1):
        for c in ranked[pos:pos + size]:
            out[c] = q
        pos += size
    return out


# ---------------------------------------------------------------- randomization check

def f_test(y, quintile, n_groups: int = 5) -> tuple[float, float, int]:
    """Joint F-test of quintile indicators (last quintile baseline).

    Returns (F, p-value, n). Rank-deficient designs fall back to the
    pseudo-inverse with reduced numerator degrees of freedom.
    """
    y = np.asarray(y, dtype=float)
    quintile = np.asarray(quintile)
    n = len(y)
    D = np.column_stack([np.ones(n)] + [(quintile == q).astype(float) for q in range(1, n_groups)])
    rank = np.linalg.matrix_rank(D)
    if rank < D.shape[1]:
        warnings.warn("collinear quintile indicators; using pseudo-inverse")
    beta = np.linalg.pinv(D) @ y
    ssr_u = float(np.sum((y - D @ beta) ** 2))
    ssr_r = float(np.sum((y - y.mean()) ** 2))
    d1, d2 = rank - 1, n - rank
    if d1 <= 0 or d2 <= 0:
        return float("nan"), float("nan"), n
    if ssr_u <= 1e-14 * max(ssr_r, 1e-300):
        return float("inf"), 0.0, n
    F = ((ssr_r - ssr_u) / d1) / (ssr_u / d2)
    F = max(F, 0.0)
    p = float(betainc(d2 / 2.0, d1 / 2.0, d2 / (d2 + d1 * F)))
    return float(F), p, n


def risk_index(funded_X, funded_labels, all_X) -> np.ndarray:
    """OLS of the default label on features (with intercept), applied to every listing."""
    funded_X = np.asarray(funded_X, dtype=float)
    all_X = np.asarray(all_X, dtype=float)
    mean = np.nanmean(funded_X, axis=0)
    fx = np.where(np.isnan(funded_X), mean, funded_X)
    ax = np.where(np.isnan(all_X), mean, all_X)
    A = np.column_stack([np.ones(len(fx)), fx])
    beta, *_ = np.linalg.lstsq(A, np.asarray(funded_labels, dtype=float), rcond=None)
    return np.column_stack([np.ones(len(ax)), ax]) @ beta


@dataclass
class CellCheck:
    cell_id: tuple
    f_stat: float
    p_value: float
    n: int


def randomization_check(cell_rows: dict, index: np.ndarray, n_groups: int = 5) -> list[CellCheck]:
    """Per-cell F-test of the risk index on crowd-quintile indicators.

    ``cell_rows`` maps cell id -> (row indices into ``index``, quintile per row).
    Cells with five or fewer rows are skipped.
    """
    out = []
    for cid, (rows, quint) in cell_rows.items():
        if len(rows) <= n_groups:
            continue
        F, p, n = f_test(index[rows], quint, n_groups)
        if np.isnan(p):
            continue
        out.append(CellCheck(cid, F, p, n))
    return out


def p_value_histogram(checks: Sequence[CellCheck], n_bins: int = 20):
    return np.histogram([c.p_value for c in checks], bins=n_bins, range=(0.0, 1.0))


# ---------------------------------------------------------------- contraction

@dataclass
class ContractionCurve:
    variance: np.ndarray
    npv: np.ndarray
    irr: np.ndarray
    size: np.ndarray

    def npv_at(self, variance: float) -> float:
        """Curve NPV at ``variance`` by linear interpolation; NaN outside its range."""
        order = np.argsort(self.variance, kind="stable")
        v, r = self.variance[order], self.npv[order]
        if variance < v[0] - 1e-9 or variance > v[-1] + 1e-9:
            return float("nan")
        return float(np.interp(variance, v, r))

    def irr_at(self, variance: float) -> float:
        order = np.argsort(self.variance, kind="stable")
        v, r = self.variance[order], self.irr[order]
        ok = ~np.isnan(r)
        if not ok.any() or variance < v[ok][0] - 1e-9 or variance > v[-1] + 1e-9:
            return float("nan")
        return float(np.interp(variance, v[ok], r[ok]))


@dataclass
class QuintilePoint:
    index: int
    variance: float
    npv: float
    irr: float
    size: int


def contraction(loans, members: Sequence[int], machine_scores, variances,
                discount: float = finance.DEFAULT_DISCOUNT) -> ContractionCurve:
    """Remove the highest-scored loan one at a time from ``members``.

    The first point is the full portfolio and the last is the empty one.
    """
    members = np.asarray(members, dtype=int)
    if len(members) == 0:
        raise ValueError("contraction needs a nonempty starting portfolio")
    scores = np.asarray(machine_scores, dtype=float)[members]
    ids = _ids([loans[i] for i in members])
    order = members[rank_order(scores, ids)]
    flows = finance.cashflow_matrix([loans[i] for i in order])
    cum = np.vstack([np.zeros(flows.shape[1]), np.cumsum(flows, axis=0)])[::-1]
    var = np.r_[0.0, np.cumsum(np.asarray(variances, dtype=float)[order])][::-1]
    size = np.arange(len(order), -1, -1)
    irr = np.full(len(size), np.nan)
    irr[:-1] = finance.irr_rows(cum[:-1])
    return ContractionCurve(var, finance.npv(cum, discount), irr, size)


@dataclass
class Comparison2:
    cells: list[Cell]
    checks: list[CellCheck]
    quintile_members: dict[int, list[int]]
    quintiles: list[QuintilePoint]
    curve: ContractionCurve
    loan_variance: np.ndarray
    p_default: np.ndarray

    def improvements(self) -> dict[int, tuple[float, float, bool]]:
        """Quintile -> (curve NPV at matched variance, quintile NPV, machine better)."""
        out = {}
        for q in self.quintiles:
            if q.index == 5:
                continue
            at = self.curve.npv_at(q.variance)
            out[q.index] = (at, q.npv, bool(at >= q.npv))
        return out

    def write_curve(self, path, method: str = "compound") -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["series", "variance", "npv", "irr", "size"])
            air = finance.annualize(self.curve.irr, method)
            for v, n, i, s in zip(self.curve.variance, self.curve.npv, air, self.curve.size):
                w.writerow(["machine", f"{v:.6g}", f"{n:.2f}", _fmt_rate(i), int(s)])
            for q in self.quintiles:
                w.writerow([f"quintile{q.index}", f"{q.variance:.6g}", f"{q.npv:.2f}",
                            _fmt_rate(finance.annualize(q.irr, method)), q.size])

    def write_pvalues(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["cell", "n", "f_stat", "p_value"])
            for c in self.checks:
                w.writerow(["/".join(str(x) for x in c.cell_id), c.n, f"{c.f_stat:.6g}",
                            f"{c.p_value:.6g}"])


def compare_contraction(loans, unfunded, machine_scores, feature_names: Sequence[str],
                        discount: float = finance.DEFAULT_DISCOUNT, bin_by: str = "machine",
                        premiums=None, min_crowds: int = 5, n_bins: int = 100,
                        default_payments: int = 12, min_p_value: float = 0.0,
                        merge_history: bool = False) -> Comparison2:
    """Full contraction comparison over funded ``loans`` and ``unfunded`` listings.

    ``bin_by='premium'`` estimates per-loan default probability from
    risk-premium bins instead of machine-score bins. Cells whose
    randomization p-value falls below ``min_p_value`` are excluded from the
    contraction.
    """
    loans = list(loans)
    machine_scores = np.asarray(machine_scores, dtype=float)
    labels = np.array([l.default_label for l in loans])
    if bin_by == "machine":
        p_def = estimate_default_prob(labels, machine_scores, n_bins)
    elif bin_by == "premium":
        if premiums is None:
            raise ValueError("premium binning needs premiums")
        p_def = estimate_default_prob(labels, premiums, n_bins)
    else:
        raise ValueError(f"unknown binning mode {bin_by!r}")
    variances = return_variances(loans, p_def, discount, default_payments)

    eligible = [i for i, l in enumerate(loans)
                if month_of(l.listing.creation_date) == month_of(l.origination_date)]
    listings = [loans[i].listing for i in eligible] + list(unfunded)
    n_funded = len(eligible)
    crowd_of = [month_of(loans[i].origination_date) for i in eligible]
    crowd_of += [month_of(l.creation_date) for l in unfunded]
    row_of = {l.listing_id: r for r, l in enumerate(listings)}

    cells = build_cells(listings)
    crowd_var: dict = {}
    crowd_loans: dict = {}
    for c in cells:
        cv, cl = defaultdict(float), defaultdict(list)
        for lid in c.members:
            r = row_of[lid]
            if r < n_funded:
                cv[crowd_of[r]] += variances[eligible[r]]
                cl[crowd_of[r]].append(eligible[r])
        crowd_var[c.cell_id], crowd_loans[c.cell_id] = dict(cv), dict(cl)

    X = feature_matrix(listings, feature_names)
    index = risk_index(X[:n_funded], labels[eligible], X)

    def rows_for(cell: Cell, quint: dict):
        rows, q = [], []
        for lid in cell.members:
            r = row_of[lid]
            if crowd_of[r] in quint:
                rows.append(r)
                q.append(quint[crowd_of[r]])
        return np.array(rows, dtype=int), np.array(q, dtype=int)

    if merge_history:
        def accept(merged: Cell) -> bool:
            cv = defaultdict(float)
            for lid in merged.members:
                r = row_of[lid]
                if r < n_funded:
                    cv[crowd_of[r]] += variances[eligible[r]]
            if len(set(np.round(list(cv.values()), 6))) < min_crowds:
                return False
            rows, q = rows_for(merged, cell_quintiles(cv))
            if len(rows) <= 5:
                return False
            return f_test(index[rows], q)[1] >= max(min_p_value, 0.05)

        cells = _merge_with_crowds(cells, accept, row_of, n_funded, crowd_of, variances,
                                   eligible, crowd_var, crowd_loans)

    kept = filter_cells(cells, crowd_var, min_crowds)
    cell_rows, quint_of = {}, {}
    for c in kept:
        quint_of[c.cell_id] = cell_quintiles(crowd_var[c.cell_id])
        cell_rows[c.cell_id] = rows_for(c, quint_of[c.cell_id])
    checks = randomization_check(cell_rows, index)
    passing = {c.cell_id for c in checks if c.p_value >= min_p_value}

    members: dict[int, list[int]] = {q: [] for q in range(1, 6)}
    for c in kept:
        if c.cell_id not in passing:
            continue
        for crowd, q in quint_of[c.cell_id].items():
            members[q].extend(crowd_loans[c.cell_id].get(crowd, []))
    for q in members:
        members[q] = sorted(members[q])
    if not members[5]:
        raise ValueError("quintile 5 portfolio is empty; no usable cells")

    flows = finance.cashflow_matrix(loans)
    points = []
    for q in range(1, 6):
        if not members[q]:
            raise ValueError(f"quintile {q} has no loans")
        pf = make_portfolio(loans, members[q], discount, variances, flows)
        points.append(QuintilePoint(q, pf.variance, pf.npv, pf.irr, len(members[q])))
    curve = contraction(loans, members[5], machine_scores, variances, discount)
    return Comparison2(kept, checks, members, points, curve, variances, p_def)


def _merge_with_crowds(cells, accept, row_of, n_funded, crowd_of, variances, eligible,
                       crowd_var, crowd_loans):
    from .dataset import merge_history_bins

    merged = merge_history_bins(cells, accept)
    for c in merged:
        if c.cell_id in crowd_var:
            continue
        cv, cl = defaultdict(float), defaultdict(list)
        for lid in c.members:
            r = row_of[lid]
            if r < n_funded:
                cv[crowd_of[r]] += variances[eligible[r]]
                cl[crowd_of[r]].append(eligible[r])
        crowd_var[c.cell_id], crowd_loans[c.cell_id] = dict(cv), dict(cl)
    return merged


# ---------------------------------------------------------------- borrower profiles

@dataclass
class ProfileCurve:
    size: np.ndarray
    mean_scorex: np.ndarray
    homeowner_share: np.ndarray
    mean_history: np.ndarray


def borrower_profile_curve(loans, scores, homeowner_feature: str = "homeowner",
                           owner_code: float = 2.0) -> ProfileCurve:
    """Running borrower-profile means as loans are added safest-first."""
    order = rank_order(scores, _ids(loans))
    sx = np.array([loans[i].listing.scorex_bin for i in order], dtype=float)
    own = np.array([loans[i].listing.features.get(homeowner_feature) == owner_code for i in order],
                   dtype=float)
    hist = np.array([loans[i].listing.credit_history_days for i in order], dtype=float)
    k = np.arange(1, len(order) + 1)
    return ProfileCurve(k, np.cumsum(sx) / k, np.cumsum(own) / k, np.cumsum(hist) / k)


def write_profiles(path, machine: ProfileCurve, premium: ProfileCurve) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["size", "machine_scorex", "machine_homeowner", "machine_history",
                    "premium_scorex", "premium_homeowner", "premium_history"])
        for i in range(len(machine.size)):
            w.writerow([int(machine.size[i]), f"{machine.mean_scorex[i]:.6f}",
                        f"{machine.homeowner_share[i]:.6f}", f"{machine.mean_history[i]:.4f}",
                        f"{premium.mean_scorex[i]:.6f}", f"{premium.homeowner_share[i]:.6f}",
                        f"{premium.mean_history[i]:.4f}"])
