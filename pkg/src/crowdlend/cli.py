"""Command-line pipeline: synth, ingest, train, tune, evaluate, compare,
contract, profile, audit, debias.

Every command writes UTF-8 CSV/JSON into ``--out-dir`` along with a
``manifest.json`` (seed, config hash, library versions, timestamp). Errors
print one line ``crowdlend: error: <kind>: <message>`` and exit 2 for bad
usage or configuration, 1 for failures while running.
"""

from __future__ import annotations

import argparse
import csv
import datetime as dt
import hashlib
import json
import logging
import os
import platform
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np
import scipy

from . import dataset, fairness, finance, gbdt, hyperopt, metrics, portfolio, synth
from .dataset import DataError, FeatureSchema

SEED_ENV = "CROWDLEND_SEED"
PROG = "crowdlend"
log = logging.getLogger(PROG)


class UsageError(Exception):
    """Bad flags, config values or missing input files (exit 2)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------- config

TRAIN_KEYS = {f.name: f.type for f in fields(gbdt.TrainConfig)}
OTHER_KEYS = {
    "train_fraction": float, "n": int, "group_strength": float, "budget": int, "folds": int,
    "n_bins": int, "random_reps": int, "debias_runs": int, "market": bool,
}


def _coerce(key: str, raw: str):
    typ = TRAIN_KEYS.get(key) or OTHER_KEYS.get(key)
    if typ is None:
        raise UsageError(f"unknown config key {key!r}")
    typ = {"int": int, "float": float, "bool": bool}.get(typ, typ) if isinstance(typ, str) else typ
    try:
        if typ is bool:
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        return typ(raw)
    except ValueError:
        raise UsageError(f"config key {key!r}: cannot parse {raw!r}") from None


def read_config(path) -> dict:
    """Flat ``key = value`` text; ``#`` starts a comment."""
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise UsageError(f"config file not found: {path}")
    out = {}
    for lineno, line in enumerate(p.read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}: line {lineno}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k] = _coerce(k, v)
    return out


def train_config(args, cfg: dict) -> gbdt.TrainConfig:
    vals = {k: v for k, v in cfg.items() if k in TRAIN_KEYS}
    vals["seed"] = args.seed
    try:
        return gbdt.TrainConfig(**vals)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid training config: {exc}") from None


def setting(args, cfg: dict, key: str, default):
    flag = getattr(args, key, None)
    if flag is not None:
        return flag
    return cfg.get(key, default)


def default_seed() -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


# ---------------------------------------------------------------- io helpers

def _need(path, what: str) -> Path:
    if path is None:
        raise UsageError(f"--{what} is required")
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} file not found: {path}")
    return p


def _schema(args) -> FeatureSchema:
    return FeatureSchema.read(_need(args.schema, "schema"))


def _loans(args, schema):
    return dataset.load_loans(_need(args.input, "input"), schema)


def _rates(args) -> finance.RateTable:
    if args.fixed_rf is not None:
        if not 0 <= args.fixed_rf <= 0.2:
            raise UsageError("--fixed-rf must lie in [0, 0.2]")
        return finance.RateTable.constant(args.fixed_rf)
    return finance.RateTable.from_csv(_need(args.rates, "rates"))


def _premiums(loans, rates: finance.RateTable) -> np.ndarray:
    return np.array([finance.risk_premium(l.final_rate, l.origination_date, rates) for l in loans])


def read_predictions(path) -> dict[str, tuple[str, float]]:
    """loan_id -> (split, predicted default probability)."""
    out = {}
    with open(_need(path, "predictions"), newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            out[row["loan_id"]] = (row["split"], float(row["p_default"]))
    return out


def scored_loans(args, schema, split: str = "test"):
    """Loans in ``split`` (or all) with their predicted default probabilities."""
    loans = _loans(args, schema)
    preds = read_predictions(args.predictions)
    keep = [l for l in loans if l.loan_id in preds and (split == "all" or preds[l.loan_id][0] == split)]
    if not keep:
        raise DataError(f"no {split} loans matched the predictions file")
    return keep, np.array([preds[l.loan_id][1] for l in keep])


def write_rows(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _r(x) -> str:
    return "" if x is None or (isinstance(x, float) and np.isnan(x)) else repr(float(x))


def write_manifest(out: Path, args, cfg: dict) -> None:
    settings = {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(args).items())
                if k != "func"}
    blob = json.dumps({"args": settings, "config": cfg}, sort_keys=True, default=str)
    try:
        from importlib.metadata import version
        pkg = version("artifact")
    except Exception:  # noqa: BLE001 - not installed as a distribution
        pkg = "unknown"
    manifest = {
        "command": args.command,
        "seed": args.seed,
        "config_hash": hashlib.sha256(blob.encode()).hexdigest(),
        "settings": settings,
        "config": cfg,
        "versions": {"python": platform.python_version(), "numpy": np.__version__,
                     "scipy": scipy.__version__, "crowdlend": pkg},
        "timestamp": dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds"),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n",
                                       encoding="utf-8")


# ---------------------------------------------------------------- commands

def cmd_synth(args, cfg, out: Path) -> None:
    n = setting(args, cfg, "n", 20000)
    strength = setting(args, cfg, "group_strength", 0.0)
    market = bool(args.market or cfg.get("market", False))
    try:
        gcfg = synth.GeneratorConfig(n=n, seed=args.seed, group_strength=strength)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    schema = synth.schema()
    if market:
        mk = synth.generate_market(gcfg)
        loans, p_loans, unfunded = mk.loans, mk.loan_p_true, mk.unfunded
    else:
        loans, p_loans = synth.generate(gcfg)
        unfunded = []
    dataset.write_loans(out / "loans.csv", loans, schema)
    dataset.write_listings(out / "listings.csv", unfunded, schema)
    schema.write(out / "schema.txt")
    synth.risk_free_table(gcfg).to_csv(out / "rates.csv")
    write_rows(out / "group_map.csv", ["label", "concentration"],
               [[k, repr(v)] for k, v in sorted(synth.group_mapping().items())])
    # ground truth sidecar; never read by training code
    write_rows(out / "truth.csv", ["loan_id", "p_true"],
               [[l.loan_id, repr(float(p))] for l, p in zip(loans, p_loans)])
    print(f"wrote {len(loans)} loans and {len(unfunded)} unfunded listings to {out}")


def cmd_ingest(args, cfg, out: Path) -> None:
    schema = _schema(args)
    loans = _loans(args, schema)
    dataset.write_loans(out / "loans.csv", loans, schema)
    finance.write_cashflows(out / "cashflows.csv", loans)
    labels = dataset.default_labels(loans)
    months = sorted({(l.origination_date.year, l.origination_date.month) for l in loans})
    summary = {
        "loans": len(loans),
        "default_rate": float(labels.mean()) if len(loans) else None,
        "total_investment": float(sum(l.listing.amount for l in loans)),
        "months": len(months),
        "first_origination": min(l.origination_date for l in loans).isoformat() if loans else None,
        "last_origination": max(l.origination_date for l in loans).isoformat() if loans else None,
    }
    if args.listings:
        summary["unfunded_listings"] = len(dataset.load_listings(_need(args.listings, "listings"), schema))
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"ingested {len(loans)} loans")


def _split(args, cfg, loans):
    frac = setting(args, cfg, "train_fraction", 0.6)
    try:
        return dataset.split_train_test(loans, frac, args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _write_predictions(path, rows) -> None:
    write_rows(path, ["loan_id", "split", "p_default"], [[i, s, _r(p)] for i, s, p in rows])


def cmd_train(args, cfg, out: Path) -> None:
    schema = _schema(args)
    loans = _loans(args, schema)
    tc = train_config(args, cfg)
    train, test = _split(args, cfg, loans)
    names = schema.names
    model = gbdt.train(dataset.feature_matrix(train, names), dataset.default_labels(train), tc, names)
    gbdt.save(model, out / "model.txt")
    rows = []
    for split, part in (("train", train), ("test", test)):
        p = gbdt.predict_proba(model, dataset.feature_matrix(part, names))
        rows += [(l.loan_id, split, v) for l, v in zip(part, p)]
    rows.sort(key=lambda r: r[0])
    _write_predictions(out / "predictions.csv", rows)
    y_te = dataset.default_labels(test)
    p_te = np.array([r[2] for r in rows if r[1] == "test"])
    ids_te = [r[0] for r in rows if r[1] == "test"]
    y_map = {l.loan_id: y for l, y in zip(test, y_te)}
    auc = metrics.auc_concordance(p_te, [y_map[i] for i in ids_te])
    print(f"trained {len(model.trees)} trees on {len(train)} loans; test AUC {auc:.4f}")


def cmd_tune(args, cfg, out: Path) -> None:
    schema = _schema(args)
    loans = _loans(args, schema)
    train, _ = _split(args, cfg, loans)
    budget = setting(args, cfg, "budget", 50)
    k = setting(args, cfg, "folds", 5)
    base = train_config(args, cfg)
    if budget < 5 or k < 2:
        raise UsageError("--budget must be >= 5 and --folds >= 2")
    best, result = hyperopt.tune(dataset.feature_matrix(train, schema.names),
                                 dataset.default_labels(train), budget=budget, seed=args.seed,
                                 k=k, base=base)
    result.to_csv(out / "trials.csv")
    lines = [f"{f.name} = {getattr(best, f.name)!r}" for f in fields(best)]
    (out / "best_config.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"best CV AUC {result.best_score:.4f} after {len(result.scores)} evaluations")


def _evaluate_scores(out: Path, prefix: str, p, y, prem, n_bins: int) -> list:
    roc_m = metrics.roc_curve(p, y)
    roc_p = metrics.roc_curve(prem, y)
    roc_m.to_csv(out / f"{prefix}roc_machine.csv")
    roc_p.to_csv(out / f"{prefix}roc_premium.csv")
    bins = metrics.quantile_bin(p, min(n_bins, len(p)))
    metrics.calibration_table(p, y, bins, prem).to_csv(out / f"{prefix}calibration.csv", "mean_premium")
    return [roc_m.auc, roc_p.auc]


def cmd_evaluate(args, cfg, out: Path) -> None:
    schema = _schema(args)
    rates = _rates(args)
    n_bins = setting(args, cfg, "n_bins", 100)
    tc = train_config(args, cfg)
    names = schema.names
    if args.rolling is not None or args.periods is not None:
        loans = _loans(args, schema)
        if args.rolling is not None:
            p, targets = _rolling_predictions(loans, names, tc, args.rolling)
            mode = f"rolling_{args.rolling}"
        else:
            p, targets = _period_predictions(loans, names, tc, args.periods)
            mode = f"periods_{args.periods}"
        test = [loans[i] for i in targets]
        _write_predictions(out / "predictions.csv", [(l.loan_id, "test", v) for l, v in zip(test, p)])
    else:
        test, p = scored_loans(args, schema)
        mode = "holdout"
    y = dataset.default_labels(test)
    prem = _premiums(test, rates)
    auc_m, auc_p = _evaluate_scores(out, "", p, y, prem, n_bins)
    write_rows(out / "metrics.csv", ["mode", "n", "auc_machine", "auc_premium"],
               [[mode, len(test), f"{auc_m:.6f}", f"{auc_p:.6f}"]])
    print(f"{mode}: machine AUC {auc_m:.4f}, premium AUC {auc_p:.4f} on {len(test)} loans")


def _rolling_predictions(loans, names, tc, window: int):
    """Score each loan with a model trained on loans from the preceding window.

    Targets sharing an origination date share a training set and a model.
    Loans with an empty or single-class window are not scored.
    """
    if window <= 0:
        raise UsageError("--rolling must be positive")
    X = dataset.feature_matrix(loans, names)
    y = dataset.default_labels(loans)
    windows = dataset.rolling_window_split(loans, window)
    by_date: dict = {}
    for i, l in enumerate(loans):
        by_date.setdefault(l.origination_date, []).append(i)
    scores, targets = {}, []
    for d in sorted(by_date):
        idx = by_date[d]
        tr = np.sort(windows[idx[0]])
        if len(tr) == 0 or y[tr].min() == y[tr].max():
            continue
        model = gbdt.train(X[tr], y[tr], tc, names)
        for i, v in zip(idx, gbdt.predict_proba(model, X[idx])):
            scores[i] = v
    targets = sorted(scores)
    if not targets:
        raise DataError("no loan had a usable training window")
    return np.array([scores[i] for i in targets]), targets


def _period_predictions(loans, names, tc, n_periods: int):
    """Train on each period and score the next one."""
    if n_periods < 2:
        raise UsageError("--periods must be >= 2")
    parts = dataset.time_period_split(loans, n_periods)
    pos = {l.loan_id: i for i, l in enumerate(loans)}
    scores, targets = [], []
    for a, b in zip(parts, parts[1:]):
        ya = dataset.default_labels(a)
        if len(a) == 0 or len(b) == 0 or ya.min() == ya.max():
            continue
        model = gbdt.train(dataset.feature_matrix(a, names), ya, tc, names)
        scores.extend(gbdt.predict_proba(model, dataset.feature_matrix(b, names)))
        targets.extend(pos[l.loan_id] for l in b)
    if not targets:
        raise DataError("no period pair was usable")
    return np.array(scores), targets


def _budget_grid(spec: str | None, total: float) -> list[float]:
    if spec is None:
        return [total * f for f in (0.02, 0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0)]
    out = []
    for tok in spec.split(","):
        tok = tok.strip()
        try:
            out.append(total * float(tok[:-1]) / 100 if tok.endswith("%") else float(tok))
        except ValueError:
            raise UsageError(f"bad --budget-grid entry {tok!r}") from None
        if out[-1] < 0:
            raise UsageError("--budget-grid entries must be nonnegative")
    return out


def cmd_compare(args, cfg, out: Path) -> None:
    schema = _schema(args)
    rates = _rates(args)
    loans, p = scored_loans(args, schema)
    prem = _premiums(loans, rates)
    min_size = args.min_portfolio_irr
    total = float(sum(l.listing.amount for l in loans))
    budgets = _budget_grid(args.budget_grid, total)
    curves = {
        "machine": portfolio.return_curve(loans, p, min_irr_size=min_size),
        "premium": portfolio.return_curve(loans, prem, min_irr_size=min_size),
        "scorex": portfolio.return_curve(loans, portfolio.scorex_scores(loans), min_irr_size=min_size),
    }
    for name, c in curves.items():
        portfolio.write_curve(out / f"curve_{name}.csv", c, loans)
    portfolio.write_budget_table(out / "budget_table.csv", budgets, curves["machine"], curves["premium"])
    reps = setting(args, cfg, "random_reps", 100)
    rnd = portfolio.random_curve(loans, budgets, reps, args.seed)
    write_rows(out / "random_curve.csv", ["investment", "mean_npv"],
               [[f"{q:.2f}", f"{v:.2f}"] for q, v in zip(budgets, rnd)])
    m, c = curves["machine"], curves["premium"]
    print(f"market NPV {m.npv[-1]:.2f}; best machine NPV {m.npv.max():.2f}, best premium NPV {c.npv.max():.2f}")


def cmd_contract(args, cfg, out: Path) -> None:
    schema = _schema(args)
    rates = _rates(args)
    loans, p = scored_loans(args, schema)
    unfunded = dataset.load_listings(_need(args.listings, "listings"), schema) if args.listings else []
    prem = _premiums(loans, rates)
    n_bins = setting(args, cfg, "n_bins", 100)
    try:
        res = portfolio.compare_contraction(loans, unfunded, p, schema.names, bin_by=args.bins,
                                            premiums=prem, n_bins=n_bins,
                                            min_p_value=args.min_p_value)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    res.write_curve(out / "contraction.csv")
    res.write_pvalues(out / "pvalues.csv")
    counts, edges = portfolio.p_value_histogram(res.checks)
    write_rows(out / "pvalue_histogram.csv", ["lower", "upper", "count"],
               [[f"{a:.2f}", f"{b:.2f}", int(c)] for a, b, c in zip(edges, edges[1:], counts)])
    rows = []
    for q, (curve_npv, q_npv, better) in sorted(res.improvements().items()):
        pt = res.quintiles[q - 1]
        rows.append([q, f"{pt.variance:.6g}", f"{q_npv:.2f}", _fmt2(curve_npv), int(better)])
    write_rows(out / "quintile_summary.csv",
               ["quintile", "variance", "quintile_npv", "machine_npv", "machine_better"], rows)
    print(f"{len(res.cells)} cells, {len(res.checks)} tested; machine better on "
          f"{sum(r[-1] for r in rows)}/{len(rows)} quintiles")


def _fmt2(x) -> str:
    return "" if np.isnan(x) else f"{x:.2f}"


def cmd_profile(args, cfg, out: Path) -> None:
    schema = _schema(args)
    rates = _rates(args)
    loans, p = scored_loans(args, schema)
    prem = _premiums(loans, rates)
    portfolio.write_profiles(out / "profiles.csv", portfolio.borrower_profile_curve(loans, p),
                             portfolio.borrower_profile_curve(loans, prem))
    print(f"wrote profile curves for {len(loans)} loans")


def _cutoffs(args) -> tuple[float, float]:
    try:
        hi, lo = (float(x) for x in args.cutoffs.split(","))
    except ValueError:
        raise UsageError("--cutoffs must be two numbers 'high,low'") from None
    if not 0 <= lo < hi <= 1:
        raise UsageError("--cutoffs need 0 <= low < high <= 1")
    return hi, lo


def _groups(args, loans) -> np.ndarray:
    mapping = dataset.load_group_mapping(_need(args.group_map, "group-map"))
    hi, lo = _cutoffs(args)
    return dataset.assign_groups(loans, mapping, hi, lo, args.group_attribute).array(loans)


def _audit_rows(report: fairness.FairnessReport, label: str):
    rows = [[label, "n", report.n, "", "", ""], [label, "AUC", _fmt4(report.auc), "", "", ""]]
    for r in report.rows:
        d = r.difference
        rows.append([label, r.name, _fmt4(r.group0), _fmt4(r.group1),
                     "" if d is None else f"{d:.4f}{fairness.stars(r.p_value)}",
                     "" if r.p_value is None else f"{r.p_value:.4g}"])
    return rows


def _fmt4(x) -> str:
    return "" if x is None else f"{x:.4f}"


AUDIT_HEADER = ["model", "metric", "group0", "group1", "difference", "p_value"]


def cmd_audit(args, cfg, out: Path) -> None:
    schema = _schema(args)
    loans, p = scored_loans(args, schema)
    g = _groups(args, loans)
    keep = g >= 0
    if not keep.any():
        raise DataError("no loan was assigned to a group")
    y_pay = 1 - dataset.default_labels(loans)[keep]
    report = fairness.audit(1 - p[keep], y_pay, g[keep])
    write_rows(out / "fairness.csv", AUDIT_HEADER, _audit_rows(report, "original"))
    print(f"parity difference {report.rows[0].difference:+.4f} on {int(keep.sum())} assigned loans")


def cmd_debias(args, cfg, out: Path) -> None:
    schema = _schema(args)
    loans = _loans(args, schema)
    tc = train_config(args, cfg)
    g_all = _groups(args, loans)
    assigned = [l for l, g in zip(loans, g_all) if g >= 0]
    if len(assigned) < 2:
        raise DataError("too few loans assigned to a group")
    train, test = _split(args, cfg, assigned)
    g_tr, g_te = _groups(args, train), _groups(args, test)
    names = schema.names
    X_tr, X_te = dataset.feature_matrix(train, names), dataset.feature_matrix(test, names)
    y_tr, y_te = dataset.default_labels(train), dataset.default_labels(test)

    base = gbdt.train(X_tr, y_tr, tc, names)
    p_base = gbdt.predict_proba(base, X_te)
    rows = _audit_rows(fairness.audit(1 - p_base, 1 - y_te, g_te), "original")

    runs = setting(args, cfg, "debias_runs", 1)
    summary = []
    for k in range(runs):
        seed = args.seed + k
        try:
            dm = fairness.debias_matrix(X_tr, schema, g_tr, seed=seed, names=names)
            Xd_te = dm.transform.apply(X_te, g_te)
        except fairness.DebiasError as exc:
            raise DataError(str(exc)) from None
        model = gbdt.train(dm.values, y_tr, tc, dm.names)
        p = gbdt.predict_proba(model, Xd_te)
        rep = fairness.audit(1 - p, 1 - y_te, g_te)
        summary.append([seed, f"{rep.auc:.6f}", f"{rep.rows[0].difference:.6f}"])
        if k == 0:
            dm.transform.save(out / "debias.json")
            rows += _audit_rows(rep, "debiased")
            _write_predictions(out / "predictions_debiased.csv",
                               sorted((l.loan_id, "test", v) for l, v in zip(test, p)))
    write_rows(out / "fairness.csv", AUDIT_HEADER, rows)
    write_rows(out / "debias_runs.csv", ["seed", "auc", "parity_difference"], summary)
    aucs = [float(r[1]) for r in summary]
    print(f"debiased AUC {np.mean(aucs):.4f} (sd {np.std(aucs):.4f}) over {runs} run(s)")


COMMANDS = {
    "synth": cmd_synth, "ingest": cmd_ingest, "train": cmd_train, "tune": cmd_tune,
    "evaluate": cmd_evaluate, "compare": cmd_compare, "contract": cmd_contract,
    "profile": cmd_profile, "audit": cmd_audit, "debias": cmd_debias,
}

HELP = {
    "synth": "generate a synthetic loan set (and unfunded listings with --market)",
    "ingest": "validate a loan CSV and write a normalized copy plus summary",
    "train": "fit the boosted-tree default model on a random train split",
    "tune": "Bayesian search over tree hyperparameters by k-fold CV AUC",
    "evaluate": "ROC/AUC and calibration of machine scores vs risk premiums",
    "compare": "budget-ranked portfolios and return curves (machine vs premium)",
    "contract": "contraction of the most lenient crowd quintile's portfolio",
    "profile": "running borrower-profile means along both orderings",
    "audit": "fairness statistics for two proxy groups",
    "debias": "debias features, retrain and audit again",
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--input", help="loan CSV (default: none)")
    common.add_argument("--schema", help="feature schema file (default: none)")
    common.add_argument("--rates", help="risk-free rate CSV with date,rate columns (default: none)")
    common.add_argument("--fixed-rf", type=float, default=None,
                        help="use this constant risk-free rate instead of --rates (default: off)")
    common.add_argument("--predictions", help="predictions CSV written by train (default: none)")
    common.add_argument("--listings", help="unfunded listings CSV (default: none)")
    common.add_argument("--seed", type=int, default=None,
                        help=f"random seed (default: ${SEED_ENV} or 0)")
    common.add_argument("--out-dir", default=".", help="output directory (default: .)")
    common.add_argument("--config", help="flat key = value config file; flags win (default: none)")
    common.add_argument("--train-fraction", type=float, default=None,
                        help="train share of a random split (default: 0.6)")
    common.add_argument("--budget-grid", default=None,
                        help="comma list of budgets; 'x%%' means x percent of total "
                             "(default: 2,5,10,20,...,100%%)")
    common.add_argument("--bins", choices=("machine", "premium"), default="machine",
                        help="score used to bin loans for default probabilities (default: machine)")
    common.add_argument("--group-map", help="label,concentration CSV (default: none)")
    common.add_argument("--group-attribute", choices=("occupation", "location"), default="occupation",
                        help="listing field looked up in the group map (default: occupation)")
    common.add_argument("--cutoffs", default="0.75,0.25",
                        help="group cutoffs 'high,low' (default: 0.75,0.25)")
    common.add_argument("--rolling", type=int, default=None,
                        help="evaluate with a rolling training window of this many days (default: off)")
    common.add_argument("--periods", type=int, default=None,
                        help="evaluate by training on each of n periods and scoring the next (default: off)")
    common.add_argument("--min-portfolio-irr", type=int, default=200,
                        help="smallest portfolio size with a reported IRR (default: 200)")
    common.add_argument("--min-p-value", type=float, default=0.0,
                        help="drop cells whose randomization p-value is below this (default: 0)")
    common.add_argument("--n", type=int, default=None, help="synth: number of rows (default: 20000)")
    common.add_argument("--group-strength", type=float, default=None,
                        help="synth: feature shift by sensitive group (default: 0)")
    common.add_argument("--market", action="store_true",
                        help="synth: simulate monthly crowds and emit unfunded listings (default: off)")
    common.add_argument("--budget", type=int, default=None, help="tune: evaluations (default: 50)")
    common.add_argument("--folds", type=int, default=None, help="tune: CV folds (default: 5)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = _Parser(prog=PROG, description="Machine vs crowd lending analyses.")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=HELP[name], description=HELP[name])
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        raise UsageError("a command is required: " + ", ".join(COMMANDS))
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    cfg = read_config(args.config)
    if args.seed is None:
        args.seed = default_seed()
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    COMMANDS[args.command](args, cfg, out)
    write_manifest(out, args, cfg)
    return 0


def main(argv=None) -> int:
    try:
        return run(argv)
    except UsageError as exc:
        print(f"{PROG}: error: usage: {exc}", file=sys.stderr)
        return 2
    except (DataError, ValueError, KeyError, OSError, np.linalg.LinAlgError) as exc:
        msg = str(exc).replace("\n", " ")
        print(f"{PROG}: error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
