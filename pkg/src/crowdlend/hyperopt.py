"""Cross-validated Bayesian hyperparameter search.

A Gaussian-process surrogate with a squared-exponential kernel is refit
each round; the next point maximizes expected improvement over random
candidates drawn from the unit cube.
"""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.stats import norm, qmc

from . import gbdt
from .metrics import auc_concordance

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Param:
    lower: float
    upper: float
    scale: str = "linear"
    integer: bool = False

    def __post_init__(self):
        if not self.lower < self.upper:
            raise ValueError("lower bound must be below upper bound")
        if self.scale not in ("linear", "log"):
            raise ValueError(f"unknown scale {self.scale!r}")
        if self.scale == "log" and self.lower <= 0:
            raise ValueError("log scale needs positive bounds")

    def from_unit(self, u: float) -> float:
        u = min(max(float(u), 0.0), 1.0)
        if self.scale == "log":
            lo, hi = math.log(self.lower), math.log(self.upper)
            v = math.exp(lo + u * (hi - lo))
        else:
            v = self.lower + u * (self.upper - self.lower)
        v = min(max(v, self.lower), self.upper)
        return int(round(v)) if self.integer else v

    def to_unit(self, v: float) -> float:
        if self.scale == "log":
            lo, hi = math.log(self.lower), math.log(self.upper)
            return (math.log(v) - lo) / (hi - lo)
        return (v - self.lower) / (self.upper - self.lower)


class ParamSpace(dict):
    """Ordered mapping of hyperparameter name to :class:`Param`."""

    def decode(self, u: np.ndarray) -> dict:
        return {name: p.from_unit(x) for (name, p), x in zip(self.items(), u)}

    def encode(self, params: dict) -> np.ndarray:
        return np.array([p.to_unit(params[name]) for name, p in self.items()])


DEFAULT_SPACE = ParamSpace(
    n_trees=Param(20, 300, integer=True),
    gamma=Param(0.0, 5.0),
    lam=Param(0.01, 10.0, scale="log"),
    learning_rate=Param(0.01, 0.3, scale="log"),
    max_depth=Param(2, 8, integer=True),
    row_subsample=Param(0.5, 1.0),
    col_subsample=Param(0.5, 1.0),
)


# ---------------------------------------------------------------- cross-validation

def kfold_indices(n: int, k: int, seed: int = 0) -> list[np.ndarray]:
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(f) for f in np.array_split(perm, k)]


def kfold_cv_auc(X, y, config: gbdt.TrainConfig, k: int = 5, seed: int = 0) -> float:
    """Mean held-out AUC over ``k`` folds; single-class folds are skipped."""
    if k < 2:
        raise ValueError("k must be >= 2")
    X = np.asarray(X, dtype=float)
    y = np.asarray(y).astype(int)
    if y.min() == y.max():
        raise ValueError("cross-validation needs both classes")
    aucs = []
    for i, test in enumerate(kfold_indices(len(y), k, seed)):
        if y[test].min() == y[test].max():
            warnings.warn(f"fold {i} has a single class; skipped")
            continue
        mask = np.ones(len(y), dtype=bool)
        mask[test] = False
        model = gbdt.train(X[mask], y[mask], config)
        aucs.append(auc_concordance(gbdt.predict_proba(model, X[test]), y[test]))
    if not aucs:
        raise ValueError("every fold had a single class")
    return float(np.mean(aucs))


# ---------------------------------------------------------------- GP surrogate

@dataclass
class GPSurrogate:
    X: np.ndarray
    y: np.ndarray
    length_scales: np.ndarray
    signal_var: float = 1.0
    noise_var: float = 0.0
    prior_mean: float = 0.0
    _chol: tuple | None = field(default=None, repr=False)

    def kernel(self, A: np.ndarray, B: np.ndarray) -> np.ndarray:
        d = (A[:, None, :] - B[None, :, :]) / self.length_scales
        return self.signal_var * np.exp(-0.5 * np.sum(d * d, axis=-1))

    def factor(self):
        if self._chol is None:
            K = self.kernel(self.X, self.X)
            n = len(self.X)
            jitter = 1e-10 * self.signal_var
            while True:
                try:
                    self._chol = cho_factor(K + (self.noise_var + jitter) * np.eye(n), lower=True)
                    break
                except np.linalg.LinAlgError:
                    jitter *= 10
                    if jitter > 1e-2 * self.signal_var:
                        raise np.linalg.LinAlgError("kernel matrix singular after jitter escalation")
        return self._chol


def gp_posterior(surrogate: GPSurrogate, query) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean and variance at one point or a batch of points."""
    if len(surrogate.X) == 0:
        raise ValueError("posterior needs at least one observation")
    Q = np.atleast_2d(np.asarray(query, dtype=float))
    chol = surrogate.factor()
    ks = surrogate.kernel(Q, surrogate.X)
    alpha = cho_solve(chol, surrogate.y - surrogate.prior_mean)
    mean = surrogate.prior_mean + ks @ alpha
    v = cho_solve(chol, ks.T)
    var = np.maximum(surrogate.signal_var - np.sum(ks * v.T, axis=1), 0.0)
    if np.ndim(query) == 1:
        return float(mean[0]), float(var[0])
    return mean, var


_LENGTH_GRID = (0.03, 0.06, 0.1, 0.2, 0.35, 0.6, 1.0, 2.0)
_NOISE_GRID = (1e-6, 1e-4, 1e-2, 1e-1)


def fit_surrogate(X, y) -> GPSurrogate:
    """Pick an isotropic length-scale and noise ratio by marginal likelihood.

    The signal variance is profiled out in closed form for each grid point.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, d = X.shape
    mu = float(y.mean())
    r = y - mu
    if np.allclose(r, 0):
        return GPSurrogate(X, y, np.full(d, 0.2), 1e-12, 0.0, mu)
    best, best_ll = None, -np.inf
    for ell in _LENGTH_GRID:
        C = np.exp(-0.5 * np.sum(((X[:, None] - X[None]) / ell) ** 2, axis=-1))
        for eta in _NOISE_GRID:
            try:
                L = np.linalg.cholesky(C + (eta + 1e-10) * np.eye(n))
            except np.linalg.LinAlgError:
                continue
            a = np.linalg.solve(L, r)
            s2 = float(a @ a) / n
            ll = -0.5 * n * math.log(s2) - np.sum(np.log(np.diag(L)))
            if ll > best_ll:
                best_ll, best = ll, (ell, eta, s2)
    ell, eta, s2 = best
    return GPSurrogate(X, y, np.full(d, ell), s2, eta * s2, mu)


def expected_improvement(mean, var, best: float, xi: float = 0.0):
    mean = np.asarray(mean, dtype=float)
    sd = np.sqrt(np.asarray(var, dtype=float))
    imp = mean - best - xi
    with np.errstate(divide="ignore", invalid="ignore"):
        z = imp / sd
        ei = imp * norm.cdf(z) + sd * norm.pdf(z)
    return np.where(sd > 0, np.maximum(ei, 0.0), np.maximum(imp, 0.0))


# ---------------------------------------------------------------- optimizer

@dataclass
class BayesOptResult:
    best_params: dict
    best_score: float
    params: list[dict]
    scores: list[float]

    def best_so_far(self) -> list[float]:
        return list(np.maximum.accumulate(self.scores))

    def to_csv(self, path) -> None:
        names = list(self.params[0]) if self.params else []
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration", *names, "score"])
            for i, (p, s) in enumerate(zip(self.params, self.scores)):
                w.writerow([i, *(repr(p[n]) for n in names), repr(s)])


def bayes_opt(space: ParamSpace, objective: Callable[[dict], float], budget: int = 50,
              seed: int = 0, n_candidates: int = 1024) -> BayesOptResult:
    """Maximize ``objective`` over ``space`` with ``budget`` evaluations."""
    if budget < 5:
        raise ValueError("budget must be >= 5")
    dim = len(space)
    rng = np.random.default_rng(seed)
    n_warm = min(max(5, 2 * dim), budget)
    U = list(qmc.LatinHypercube(d=dim, seed=rng).random(n_warm))
    raw: list[float | None] = []
    params: list[dict] = []

    def evaluate(u):
        p = space.decode(u)
        try:
            s = float(objective(p))
            if not math.isfinite(s):
                raise ValueError("non-finite score")
        except Exception as exc:  # noqa: BLE001 - any failing trial is scored as worst
            log.warning("objective failed at %s: %s", p, exc)
            s = None
        params.append(p)
        raw.append(s)

    def filled():
        ok = [s for s in raw if s is not None]
        worst = min(ok) if ok else 0.0
        return np.array([worst if s is None else s for s in raw])

    for u in U:
        evaluate(u)
    while len(raw) < budget:
        y = filled()
        cand = rng.random((n_candidates, dim))
        if all(s is None for s in raw):
            u = cand[0]
        else:
            sur = fit_surrogate(np.array(U), y)
            mean, var = gp_posterior(sur, cand)
            ei = expected_improvement(mean, var, float(y.max()))
            u = cand[int(np.argmax(ei))] if ei.max() > 0 else cand[int(np.argmax(mean))]
        U.append(u)
        evaluate(u)
    scores = filled()
    i = int(np.argmax(scores))
    return BayesOptResult(params[i], float(scores[i]), params, [float(s) for s in scores])


def tune(X, y, space: ParamSpace = DEFAULT_SPACE, budget: int = 50, seed: int = 0,
         k: int = 5, base: gbdt.TrainConfig = gbdt.TrainConfig()) -> tuple[gbdt.TrainConfig, BayesOptResult]:
    """Search ``space`` for the config with best ``k``-fold CV AUC."""
    def objective(p):
        return kfold_cv_auc(X, y, replace(base, **p), k=k, seed=seed)

    result = bayes_opt(space, objective, budget=budget, seed=seed)
    return replace(base, **result.best_params), result
