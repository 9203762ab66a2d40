"""Group fairness audit and sensitive-attribute debiasing of features.

The audit thresholds payback scores so the number funded equals the
expected number of paid-back loans, then compares five statistics across
two groups. Debiasing replaces each feature column by a version whose
distribution no longer depends on the group:

* continuous: the group's own kernel-smoothed CDF,
* categorical (k levels): a 2k-level variable whose marginal is shared by
  both groups and which maps back to the original level given the group,
* ordinal: jitter inside each level's range, then the continuous transform,
* mixed: an indicator handled as categorical plus a continuous part.

Transforms are fit once (on training rows) and can be re-applied to new
rows; the fitted parameters serialize to JSON.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
import zlib
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog, nnls
from scipy.special import ndtr
from scipy.stats import ttest_ind

from .dataset import CATEGORICAL, CONTINUOUS, MIXED, ORDINAL, FeatureSchema
from .metrics import auc_concordance


class DebiasError(ValueError):
    pass


# ---------------------------------------------------------------- audit

def funded_mask(scores, count: int) -> np.ndarray:
    """Fund exactly ``count`` rows, highest scores first.

    Among equal scores the higher row index is admitted first.
    """
    scores = np.asarray(scores, dtype=float)
    n = len(scores)
    if not 0 <= count <= n:
        raise ValueError(f"count must be in [0, {n}]")
    order = np.argsort(scores, kind="stable")
    mask = np.zeros(n, dtype=bool)
    if count:
        mask[order[n - count:]] = True
    return mask


def funding_threshold(scores, count: int) -> float:
    """Score cutoff ``t`` such that ``count`` scores are >= t when scores are distinct."""
    scores = np.sort(np.asarray(scores, dtype=float))
    n = len(scores)
    if not 0 <= count <= n:
        raise ValueError(f"count must be in [0, {n}]")
    if count == 0:
        return float(np.nextafter(scores[-1], np.inf)) if n else math.inf
    return float(scores[n - count])


def expected_positive_count(payback_prob) -> int:
    return int(round(float(np.sum(payback_prob))))


def stars(p: float | None) -> str:
    if p is None or np.isnan(p):
        return ""
    for cut, mark in ((0.001, "***"), (0.01, "**"), (0.05, "*"), (0.1, ".")):
        if p < cut:
            return mark
    return ""


@dataclass
class MetricRow:
    name: str
    group0: float | None
    group1: float | None
    p_value: float | None

    @property
    def difference(self) -> float | None:
        if self.group0 is None or self.group1 is None:
            return None
        return self.group0 - self.group1


METRIC_NAMES = (
    "Prob. of being funded",
    "True positive rate",
    "False positive rate",
    "Average score of positive class",
    "Average score of negative class",
)


@dataclass
class FairnessReport:
    n: int
    auc: float | None
    rows: list[MetricRow]
    group_names: tuple[str, str] = ("Group0", "Group1")

    def row(self, name: str) -> MetricRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    @property
    def parity_gap(self) -> float:
        return abs(self.rows[0].difference)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["metric", self.group_names[0], self.group_names[1], "difference", "p_value"])
            w.writerow(["Number of observations", self.n, "", "", ""])
            w.writerow(["AUC", _f4(self.auc), "", "", ""])
            for r in self.rows:
                d = r.difference
                w.writerow([r.name, _f4(r.group0), _f4(r.group1),
                            "" if d is None else f"{d:.4f}{stars(r.p_value)}",
                            "" if r.p_value is None else f"{r.p_value:.4g}"])


def _f4(x) -> str:
    return "" if x is None else f"{x:.4f}"


def _compare(a: np.ndarray, b: np.ndarray):
    if len(a) == 0 or len(b) == 0:
        return None, None, None
    p = None
    if len(a) > 1 and len(b) > 1:
        if np.var(a) == 0 and np.var(b) == 0:
            p = 1.0 if a[0] == b[0] else 0.0
        else:
            p = float(ttest_ind(a, b, equal_var=False).pvalue)
    return float(a.mean()), float(b.mean()), p


def fairness_report(scores, labels, groups, threshold: float | None = None,
                    funded=None) -> FairnessReport:
    """Five group statistics for payback ``scores`` (label 1 = paid back).

    Funding is ``scores >= threshold`` unless an explicit ``funded`` mask
    is given. Differences are group 0 minus group 1 with Welch t-test
    p-values; a metric with an empty class in either group is left blank.
    """
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(int)
    groups = np.asarray(groups).astype(int)
    if not set(np.unique(groups)) <= {0, 1}:
        raise ValueError("groups must be binary 0/1")
    if not (groups == 0).any() or not (groups == 1).any():
        raise ValueError("both groups must be nonempty")
    if funded is None:
        if threshold is None:
            raise ValueError("give a threshold or a funded mask")
        funded = scores >= threshold
    yhat = np.asarray(funded, dtype=float)
    g0, g1 = groups == 0, groups == 1
    pos, neg = labels == 1, labels == 0
    rows = []
    for name, vals, sel in ((METRIC_NAMES[0], yhat, None), (METRIC_NAMES[1], yhat, pos),
                            (METRIC_NAMES[2], yhat, neg), (METRIC_NAMES[3], scores, pos),
                            (METRIC_NAMES[4], scores, neg)):
        m0 = g0 if sel is None else g0 & sel
        m1 = g1 if sel is None else g1 & sel
        rows.append(MetricRow(name, *_compare(vals[m0], vals[m1])))
    auc = None
    if pos.any() and neg.any():
        auc = auc_concordance(scores, labels)
    return FairnessReport(len(scores), auc, rows)


def audit(payback_scores, labels, groups) -> FairnessReport:
    """Report with the funded count set to the expected number of paybacks."""
    count = expected_positive_count(payback_scores)
    return fairness_report(payback_scores, labels, groups, funded=funded_mask(payback_scores, count))


# ---------------------------------------------------------------- continuous

def _check_groups(groups) -> np.ndarray:
    groups = np.asarray(groups)
    if groups.size and not set(np.unique(groups).tolist()) <= {0, 1}:
        raise DebiasError("groups must be 0/1 for every row")
    return groups.astype(int)


@dataclass
class KdeCdf:
    """Gaussian-kernel CDF per group.

    Each group is standardized by its own mean and spread, so the bandwidth
    ``n_a ** -0.2`` is Scott's factor applied to that group's scale.
    """

    center: dict[int, float]
    scale: dict[int, float]
    points: dict[int, np.ndarray]
    bandwidth: dict[int, float]

    @classmethod
    def fit(cls, values, groups) -> "KdeCdf":
        values = np.asarray(values, dtype=float)
        groups = _check_groups(groups)
        if np.isnan(values).any():
            raise DebiasError("continuous transform got missing values")
        center, scale, pts, bw = {}, {}, {}, {}
        for a in (0, 1):
            v = values[groups == a]
            if len(np.unique(v)) < 2:
                raise DebiasError(f"group {a} needs at least two distinct values")
            center[a], scale[a] = float(v.mean()), float(v.std())
            if not scale[a] > 0:
                raise DebiasError(f"group {a} has no measurable spread")
            pts[a] = np.sort((v - center[a]) / scale[a])
            bw[a] = len(v) ** -0.2
        return cls(center, scale, pts, bw)

    def cdf(self, values, groups, block: int = 2048) -> np.ndarray:
        values = np.asarray(values, dtype=float)
        groups = _check_groups(groups)
        out = np.empty(len(values))
        for a in (0, 1):
            idx = np.flatnonzero(groups == a)
            z = (values[idx] - self.center[a]) / self.scale[a]
            p, h = self.points[a], self.bandwidth[a]
            for s in range(0, len(idx), block):
                out[idx[s:s + block]] = ndtr((z[s:s + block, None] - p[None, :]) / h).mean(axis=1)
        return out

    def to_json(self) -> dict:
        d = {key: {str(a): getattr(self, key)[a] for a in (0, 1)} for key in ("center", "scale", "bandwidth")}
        d["points"] = {str(a): self.points[a].tolist() for a in (0, 1)}
        return d

    @classmethod
    def from_json(cls, d: dict) -> "KdeCdf":
        def per_group(key, conv=float):
            return {a: conv(d[key][str(a)]) for a in (0, 1)}
        return cls(per_group("center"), per_group("scale"), per_group("points", np.array),
                   per_group("bandwidth"))


def debias_continuous(values, groups, seed: int = 0) -> np.ndarray:
    """Each value's position in its own group's smoothed distribution, in [0, 1]."""
    return KdeCdf.fit(values, groups).cdf(values, groups)


# ---------------------------------------------------------------- categorical

def sigma(s, group, k: int):
    """Original level (1..k) of transformed level ``s`` (1..2k) for ``group``."""
    s = np.asarray(s)
    group = np.asarray(group)
    return np.where(group == 0, (s - 1) % k + 1, (s + 1) // 2)


def preimage(t: int, group: int, k: int) -> tuple[int, int]:
    return (t, t + k) if group == 0 else (2 * t - 1, 2 * t)


def constraint_system(p0, p1) -> tuple[np.ndarray, np.ndarray]:
    """Rows: P(X=t|A=a) = sum of alpha over the preimage of t under group a."""
    k = len(p0)
    A = np.zeros((2 * k, 2 * k))
    for t in range(1, k + 1):
        for a, row in ((0, t - 1), (1, k + t - 1)):
            for s in preimage(t, a, k):
                A[row, s - 1] = 1.0
    return A, np.r_[p0, p1].astype(float)


def feasible_interval_k2(p0, p1) -> tuple[float, float]:
    """Range of alpha_1 for k=2; the other components follow from it."""
    lo = max(0.0, p0[0] - p1[1])
    hi = min(p1[0], p0[0])
    return lo, hi


def alpha_k2(p0, p1, a: float) -> np.ndarray:
    return np.array([a, p1[0] - a, p0[0] - a, a - (p0[0] - p1[1])])


def solve_alpha(p0, p1) -> tuple[np.ndarray, bool]:
    """Shared marginal of the transformed variable; returns (alpha, exact).

    k=2 takes the midpoint of the one-parameter family. Larger k maximizes
    the smallest component by linear programming, falling back to
    nonnegative least squares when the system has no exact solution.
    """
    p0 = np.asarray(p0, dtype=float)
    p1 = np.asarray(p1, dtype=float)
    k = len(p0)
    if k != len(p1) or k < 2:
        raise DebiasError("both groups need the same k >= 2 levels")
    if k == 2:
        lo, hi = feasible_interval_k2(p0, p1)
        if lo <= hi + 1e-12:
            return np.maximum(alpha_k2(p0, p1, (lo + hi) / 2), 0.0), True
    A, b = constraint_system(p0, p1)
    n = 2 * k
    # variables: alpha (n) and the floor tau; maximize tau
    c = np.r_[np.zeros(n), -1.0]
    A_ub = np.hstack([-np.eye(n), np.ones((n, 1))])
    res = linprog(c, A_ub=A_ub, b_ub=np.zeros(n), A_eq=np.hstack([A, np.zeros((n, 1))]), b_eq=b,
                  bounds=[(0, None)] * n + [(0, None)], method="highs")
    if res.status == 0:
        return np.maximum(res.x[:n], 0.0), True
    warnings.warn("categorical constraints infeasible; bias reduced but not removed")
    alpha, _ = nnls(A, b)
    return alpha, False


def level_probs(values, groups, k: int) -> tuple[np.ndarray, np.ndarray]:
    values = np.asarray(values)
    groups = _check_groups(groups)
    out = []
    for a in (0, 1):
        v = values[groups == a].astype(int)
        if len(v) == 0:
            raise DebiasError(f"group {a} is empty")
        out.append(np.bincount(v - 1, minlength=k)[:k] / len(v))
    return out[0], out[1]


@dataclass
class CategoricalTransform:
    k: int
    alpha: np.ndarray
    exact: bool = True

    @classmethod
    def fit(cls, values, groups, k: int) -> "CategoricalTransform":
        values = np.asarray(values, dtype=float)
        if np.isnan(values).any():
            raise DebiasError("categorical transform got missing values")
        if values.size and (values.min() < 1 or values.max() > k or np.any(values != np.round(values))):
            raise DebiasError(f"categorical values must be integers in 1..{k}")
        alpha, exact = solve_alpha(*level_probs(values, groups, k))
        return cls(k, alpha, exact)

    def apply(self, values, groups, rng: np.random.Generator) -> np.ndarray:
        values = np.asarray(values, dtype=float)
        groups = _check_groups(groups)
        k = self.k
        if values.size and (np.isnan(values).any() or values.min() < 1 or values.max() > k):
            raise DebiasError(f"categorical values must be integers in 1..{k}")
        t = values.astype(int)
        s_lo = np.where(groups == 0, t, 2 * t - 1)
        s_hi = np.where(groups == 0, t + k, 2 * t)
        w_lo, w_hi = self.alpha[s_lo - 1], self.alpha[s_hi - 1]
        tot = w_lo + w_hi
        p_hi = np.where(tot > 0, w_hi / np.where(tot > 0, tot, 1.0), 0.5)
        u = rng.random(len(t))
        return np.where(u < p_hi, s_hi, s_lo).astype(float)

    def to_json(self) -> dict:
        return {"k": self.k, "alpha": self.alpha.tolist(), "exact": self.exact}

    @classmethod
    def from_json(cls, d: dict) -> "CategoricalTransform":
        return cls(d["k"], np.array(d["alpha"]), d["exact"])


def debias_categorical(values, groups, k: int, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    tr = CategoricalTransform.fit(values, groups, k)
    return tr.apply(values, groups, np.random.default_rng(seed)), tr.alpha


# ---------------------------------------------------------------- ordinal

def jitter(values, ranges, rng: np.random.Generator) -> np.ndarray:
    """Replace level t (1-based) by a uniform draw from its range."""
    values = np.asarray(values, dtype=float)
    ranges = np.asarray(ranges, dtype=float)
    if np.any(ranges[:, 0] >= ranges[:, 1]) or np.any(ranges[1:, 0] < ranges[:-1, 1]):
        raise DebiasError("ordinal ranges must be ordered and non-overlapping")
    if values.size and (np.isnan(values).any() or values.min() < 1 or values.max() > len(ranges)):
        raise DebiasError(f"ordinal levels must be in 1..{len(ranges)}")
    t = values.astype(int) - 1
    lo, hi = ranges[t, 0], ranges[t, 1]
    return lo + (hi - lo) * rng.random(len(t))


def debias_ordinal(values, ranges, groups, seed: int = 0) -> np.ndarray:
    j = jitter(values, ranges, np.random.default_rng(seed))
    return debias_continuous(j, groups)


# ---------------------------------------------------------------- mixed

def _at_mass(values: np.ndarray, a: float) -> np.ndarray:
    return np.isnan(values) if math.isnan(a) else values == a


@dataclass
class MixedTransform:
    point_mass: float
    indicator: CategoricalTransform
    cdf: KdeCdf | None

    @classmethod
    def fit(cls, values, groups, point_mass: float) -> "MixedTransform":
        values = np.asarray(values, dtype=float)
        groups = _check_groups(groups)
        u = _at_mass(values, point_mass)
        ind = CategoricalTransform.fit(u + 1.0, groups, 2)
        cdf = None
        if not u.all():
            for a in (0, 1):
                if (groups == a).any() and u[groups == a].all():
                    raise DebiasError(f"group {a} lies entirely at the point mass")
            cdf = KdeCdf.fit(values[~u], groups[~u])
        return cls(point_mass, ind, cdf)

    def apply(self, values, groups, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        values = np.asarray(values, dtype=float)
        groups = _check_groups(groups)
        u = _at_mass(values, self.point_mass)
        u_t = self.indicator.apply(u + 1.0, groups, rng)
        x_t = rng.random(len(values))
        if (~u).any():
            if self.cdf is None:
                raise DebiasError("no continuous part was seen when fitting")
            x_t[~u] = self.cdf.cdf(values[~u], groups[~u])
        return u_t, x_t

    def to_json(self) -> dict:
        return {"point_mass": None if math.isnan(self.point_mass) else self.point_mass,
                "indicator": self.indicator.to_json(),
                "cdf": None if self.cdf is None else self.cdf.to_json()}

    @classmethod
    def from_json(cls, d: dict) -> "MixedTransform":
        a = math.nan if d["point_mass"] is None else d["point_mass"]
        return cls(a, CategoricalTransform.from_json(d["indicator"]),
                   None if d["cdf"] is None else KdeCdf.from_json(d["cdf"]))


def debias_mixed(values, point_mass: float, groups, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    tr = MixedTransform.fit(values, groups, point_mass)
    return tr.apply(values, groups, np.random.default_rng(seed))


# ---------------------------------------------------------------- whole matrix

def column_rng(seed: int, name: str, stage: str) -> np.random.Generator:
    """Independent stream per (seed, column, stage) so column order does not matter."""
    return np.random.default_rng([seed, zlib.crc32(name.encode()), zlib.crc32(stage.encode())])


@dataclass
class ColumnTransform:
    name: str
    kind: str
    params: dict = field(default_factory=dict)
    # fitted pieces; exactly one is set depending on kind
    cdf: KdeCdf | None = None
    categorical: CategoricalTransform | None = None
    mixed: MixedTransform | None = None

    def output_names(self) -> list[str]:
        if self.kind == MIXED:
            return [f"{self.name}_indicator", self.name]
        return [self.name]


@dataclass
class Debiaser:
    columns: list[ColumnTransform]
    seed: int

    @property
    def output_names(self) -> list[str]:
        return [n for c in self.columns for n in c.output_names()]

    @classmethod
    def fit(cls, matrix, schema: FeatureSchema, groups, names=None, seed: int = 0) -> "Debiaser":
        """Fit every column on ``matrix`` (rows aligned with ``groups``).

        A continuous column with missing values is handled as mixed with its
        point mass at the missing value.
        """
        matrix = np.asarray(matrix, dtype=float)
        groups = _check_groups(groups)
        names = list(names or schema.names)
        if matrix.shape[1] != len(names):
            raise DebiasError("matrix width does not match the feature names")
        cols = []
        for j, name in enumerate(names):
            if name not in schema:
                raise DebiasError(f"column {name!r} has no schema kind")
            kind = schema[name]
            x = matrix[:, j]
            try:
                cols.append(_fit_column(name, kind, x, groups, seed))
            except DebiasError as exc:
                raise DebiasError(f"column {name!r}: {exc}") from None
        return cls(cols, seed)

    def apply(self, matrix, groups, stage: str = "apply") -> np.ndarray:
        """Transform rows; ``stage`` names the random substream used for sampling."""
        matrix = np.asarray(matrix, dtype=float)
        groups = _check_groups(groups)
        out = []
        for j, col in enumerate(self.columns):
            x = matrix[:, j]
            rng = column_rng(self.seed, col.name, stage)
            try:
                out.extend(_apply_column(col, x, groups, rng))
            except DebiasError as exc:
                raise DebiasError(f"column {col.name!r}: {exc}") from None
        return np.column_stack(out) if out else np.empty((len(matrix), 0))

    def dumps(self) -> str:
        cols = []
        for c in self.columns:
            d = {"name": c.name, "kind": c.kind, "params": c.params}
            if c.cdf is not None:
                d["cdf"] = c.cdf.to_json()
            if c.categorical is not None:
                d["categorical"] = c.categorical.to_json()
            if c.mixed is not None:
                d["mixed"] = c.mixed.to_json()
            cols.append(d)
        return json.dumps({"seed": self.seed, "columns": cols}, sort_keys=True)

    @classmethod
    def loads(cls, text: str) -> "Debiaser":
        d = json.loads(text)
        cols = []
        for c in d["columns"]:
            cols.append(ColumnTransform(
                c["name"], c["kind"], c["params"],
                KdeCdf.from_json(c["cdf"]) if "cdf" in c else None,
                CategoricalTransform.from_json(c["categorical"]) if "categorical" in c else None,
                MixedTransform.from_json(c["mixed"]) if "mixed" in c else None))
        return cls(cols, d["seed"])

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.dumps())

    @classmethod
    def load(cls, path) -> "Debiaser":
        with open(path, encoding="utf-8") as fh:
            return cls.loads(fh.read())


def _fit_column(name, kind, x, groups, seed) -> ColumnTransform:
    if kind.kind == CONTINUOUS and not np.isnan(x).any():
        return ColumnTransform(name, CONTINUOUS, cdf=KdeCdf.fit(x, groups))
    if kind.kind in (CONTINUOUS, MIXED):
        a = math.nan if kind.kind == CONTINUOUS else float(kind.point_mass)
        return ColumnTransform(name, MIXED, mixed=MixedTransform.fit(x, groups, a))
    if kind.kind == CATEGORICAL:
        return ColumnTransform(name, CATEGORICAL, categorical=CategoricalTransform.fit(x, groups, kind.k))
    ranges = [list(r) for r in kind.level_ranges()]
    j = jitter(x, ranges, column_rng(seed, name, "fit"))
    return ColumnTransform(name, ORDINAL, {"ranges": ranges}, cdf=KdeCdf.fit(j, groups))


def _apply_column(col: ColumnTransform, x, groups, rng) -> list[np.ndarray]:
    if col.kind == CONTINUOUS:
        if np.isnan(x).any():
            raise DebiasError("missing values in a column fitted without them")
        return [col.cdf.cdf(x, groups)]
    if col.kind == MIXED:
        return list(col.mixed.apply(x, groups, rng))
    if col.kind == CATEGORICAL:
        return [col.categorical.apply(x, groups, rng)]
    return [col.cdf.cdf(jitter(x, col.params["ranges"], rng), groups)]


@dataclass
class DebiasedMatrix:
    values: np.ndarray
    names: list[str]
    transform: Debiaser
    seed: int


def debias_matrix(matrix, schema: FeatureSchema, groups, seed: int = 0, names=None) -> DebiasedMatrix:
    """Fit on ``matrix`` and transform the same rows.

    Ordinal jitter draws are shared between fitting and transforming so each
    training row is evaluated at the point it contributed to the fit.
    """
    tr = Debiaser.fit(matrix, schema, groups, names, seed)
    matrix = np.asarray(matrix, dtype=float)
    groups = _check_groups(groups)
    out = []
    for j, col in enumerate(tr.columns):
        x = matrix[:, j]
        if col.kind == ORDINAL:
            jj = jitter(x, col.params["ranges"], column_rng(seed, col.name, "fit"))
            out.append(col.cdf.cdf(jj, groups))
        else:
            out.extend(_apply_column(col, x, groups, column_rng(seed, col.name, "train")))
    values = np.column_stack(out) if out else np.empty((len(matrix), 0))
    return DebiasedMatrix(values, tr.output_names, tr, seed)
