"""Loan and listing records, CSV/schema I/O, proxy groups, splits and cells."""

from __future__ import annotations

import csv
import datetime as dt
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

GRADES = ("AA", "A", "B", "C", "D", "E", "HR")

LISTING_COLUMNS = [
    "listing_id", "amount", "max_borrower_rate", "creation_date", "credit_grade",
    "scorex_bin", "credit_history_days", "occupation", "location",
]
LOAN_COLUMNS = LISTING_COLUMNS + [
    "final_rate", "origination_date", "term_months", "principal_paid",
    "interest_paid", "status", "default_label",
]

CONTINUOUS, CATEGORICAL, ORDINAL, MIXED = "continuous", "categorical", "ordinal", "mixed"


class DataError(ValueError):
    """Raised for malformed input files or records violating invariants."""


@dataclass(frozen=True)
class FeatureKind:
    kind: str
    k: int | None = None
    levels: tuple[str, ...] | None = None
    ranges: tuple[tuple[float, float], ...] | None = None
    point_mass: float | None = None

    def __post_init__(self):
        if self.kind not in (CONTINUOUS, CATEGORICAL, ORDINAL, MIXED):
            raise DataError(f"unknown feature kind {self.kind!r}")
        if self.kind == CATEGORICAL and (self.k is None or self.k < 2):
            raise DataError("categorical features need k >= 2")
        if self.kind == ORDINAL:
            if not self.levels:
                raise DataError("ordinal features need levels")
            rs = self.level_ranges()
            for (lo, hi), (lo2, _) in zip(rs, rs[1:]):
                if not lo < hi <= lo2:
                    raise DataError("ordinal ranges must be ordered and non-overlapping")
        if self.kind == MIXED and self.point_mass is None:
            raise DataError("mixed features need a point mass value")

    def level_ranges(self) -> list[tuple[float, float]]:
        """Jitter range per level; defaults to (t - 1/2, t + 1/2) for level t."""
        if self.ranges is not None:
            return [tuple(r) for r in self.ranges]
        return [((2 * t - 1) / 2, (2 * t + 1) / 2) for t in range(1, len(self.levels) + 1)]

    def encode(self, raw: str) -> float:
        """Parse a CSV cell into the numeric value used downstream."""
        raw = raw.strip()
        if raw == "" or raw.lower() in ("na", "nan", "missing"):
            return math.nan
        if self.kind in (ORDINAL, CATEGORICAL) and self.levels and raw in self.levels:
            return float(self.levels.index(raw) + 1)
        return float(raw)

    def describe(self) -> str:
        if self.kind == CONTINUOUS:
            return CONTINUOUS
        if self.kind == CATEGORICAL:
            s = f"{CATEGORICAL} k={self.k}"
            return s + (f" levels={','.join(self.levels)}" if self.levels else "")
        if self.kind == MIXED:
            return f"{MIXED} a={self.point_mass!r}"
        s = f"{ORDINAL} levels={','.join(self.levels)}"
        if self.ranges is not None:
            s += " ranges=" + "|".join(f"{lo!r}:{hi!r}" for lo, hi in self.ranges)
        return s


class FeatureSchema(dict):
    """Ordered mapping of feature name to :class:`FeatureKind`."""

    @property
    def names(self) -> list[str]:
        return list(self)

    @classmethod
    def parse(cls, text: str) -> "FeatureSchema":
        """Parse ``name: kind key=value ...`` lines.

        ``levels=1..11`` expands to an integer range; ``ranges`` takes
        ``lo:hi`` pairs separated by ``|``.
        """
        schema = cls()
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if ":" not in line:
                raise DataError(f"schema line {lineno}: expected 'name: kind'")
            name, rest = (s.strip() for s in line.split(":", 1))
            tokens = rest.split()
            if not tokens:
                raise DataError(f"schema line {lineno}: missing kind")
            kind, opts = tokens[0].lower(), {}
            for tok in tokens[1:]:
                key, _, val = tok.partition("=")
                opts[key] = val
            if name in schema:
                raise DataError(f"schema line {lineno}: duplicate feature {name!r}")
            try:
                schema[name] = _kind_from_opts(kind, opts)
            except (ValueError, TypeError) as exc:
                raise DataError(f"schema line {lineno}: {exc}") from None
        return schema

    @classmethod
    def read(cls, path) -> "FeatureSchema":
        return cls.parse(Path(path).read_text())

    def dumps(self) -> str:
        return "".join(f"{name}: {kind.describe()}\n" for name, kind in self.items())

    def write(self, path) -> None:
        Path(path).write_text(self.dumps())


def _kind_from_opts(kind: str, opts: dict) -> FeatureKind:
    levels = None
    if "levels" in opts:
        spec = opts["levels"]
        if ".." in spec:
            a, b = spec.split("..")
            levels = tuple(str(i) for i in range(int(a), int(b) + 1))
        else:
            levels = tuple(spec.split(","))
    ranges = None
    if "ranges" in opts:
        ranges = tuple(tuple(float(x) for x in r.split(":")) for r in opts["ranges"].split("|"))
    if kind == CATEGORICAL:
        k = int(opts["k"]) if "k" in opts else (len(levels) if levels else None)
        return FeatureKind(kind, k=k, levels=levels)
    if kind == MIXED:
        return FeatureKind(kind, point_mass=float(opts.get("a", "nan")))
    return FeatureKind(kind, levels=levels, ranges=ranges)


@dataclass
class ListingRecord:
    listing_id: str
    amount: float
    max_borrower_rate: float
    creation_date: dt.date
    credit_grade: str
    scorex_bin: int | None = None
    credit_history_days: int = 0
    features: dict[str, float] = field(default_factory=dict)
    occupation: str | None = None
    location: str | None = None

    def __post_init__(self):
        if not self.amount > 0:
            raise DataError(f"listing {self.listing_id}: amount must be positive")
        if not 0 <= self.max_borrower_rate <= 0.35:
            raise DataError(f"listing {self.listing_id}: max_borrower_rate outside [0, 0.35]")
        if self.scorex_bin is not None and not 1 <= self.scorex_bin <= 11:
            raise DataError(f"listing {self.listing_id}: scorex_bin outside 1..11")
        if self.credit_history_days < 0:
            raise DataError(f"listing {self.listing_id}: negative credit history")


@dataclass
class LoanRecord:
    listing: ListingRecord
    final_rate: float
    origination_date: dt.date
    term_months: int = 36
    principal_paid: float = 0.0
    interest_paid: float = 0.0
    status: str = "Completed"
    default_label: int = 0

    def __post_init__(self):
        lid = self.listing.listing_id
        if self.status not in ("Completed", "Defaulted"):
            raise DataError(f"loan {lid}: unknown status {self.status!r}")
        if self.default_label not in (0, 1):
            raise DataError(f"loan {lid}: default_label must be 0 or 1")
        if self.status == "Completed" and self.default_label != 0:
            raise DataError(f"loan {lid}: Completed loan cannot carry default_label 1")
        if self.status == "Defaulted" and self.default_label != 1:
            raise DataError(f"loan {lid}: Defaulted loan must carry default_label 1")
        if self.final_rate > self.listing.max_borrower_rate + 1e-12:
            raise DataError(f"loan {lid}: final_rate exceeds max_borrower_rate")
        if self.term_months < 1:
            raise DataError(f"loan {lid}: term_months must be positive")
        if self.principal_paid > self.listing.amount + 0.01:
            raise DataError(f"loan {lid}: principal_paid exceeds amount")

    @property
    def loan_id(self) -> str:
        return self.listing.listing_id

    @property
    def defaulted(self) -> bool:
        return self.status == "Defaulted"


def _core_value(listing: ListingRecord, name: str) -> float | None:
    if name == "amount":
        return listing.amount
    if name == "credit_history_days":
        return float(listing.credit_history_days)
    if name == "scorex_bin":
        return math.nan if listing.scorex_bin is None else float(listing.scorex_bin)
    if name == "credit_grade":
        return float(GRADES.index(listing.credit_grade) + 1)
    if name == "max_borrower_rate":
        return listing.max_borrower_rate
    return None


def feature_matrix(records: Sequence, names: Sequence[str]) -> np.ndarray:
    """Numeric ``(n, len(names))`` matrix from loans or listings.

    Core listing fields (amount, credit grade, ...) may be named directly.
    """
    out = np.empty((len(records), len(names)))
    for i, rec in enumerate(records):
        listing = getattr(rec, "listing", rec)
        for j, name in enumerate(names):
            v = _core_value(listing, name)
            if v is None:
                try:
                    v = listing.features[name]
                except KeyError:
                    raise KeyError(f"record {listing.listing_id} has no feature {name!r}") from None
            out[i, j] = v
    return out


def default_labels(loans: Sequence[LoanRecord]) -> np.ndarray:
    return np.array([l.default_label for l in loans], dtype=int)


# ---------------------------------------------------------------- CSV I/O

def _parse_date(raw: str) -> dt.date:
    return dt.date.fromisoformat(raw.strip())


def _opt(raw: str) -> str | None:
    raw = raw.strip()
    return raw or None


def _parse_listing(row: dict, schema: FeatureSchema) -> ListingRecord:
    feats = {}
    for name, kind in schema.items():
        if name in LISTING_COLUMNS:
            continue
        feats[name] = kind.encode(row[name])
    sx = row["scorex_bin"].strip()
    return ListingRecord(
        listing_id=row["listing_id"].strip(),
        amount=float(row["amount"]),
        max_borrower_rate=float(row["max_borrower_rate"]),
        creation_date=_parse_date(row["creation_date"]),
        credit_grade=row["credit_grade"].strip(),
        scorex_bin=int(float(sx)) if sx else None,
        credit_history_days=int(float(row["credit_history_days"])),
        features=feats,
        occupation=_opt(row["occupation"]),
        location=_opt(row["location"]),
    )


def _parse_loan(row: dict, schema: FeatureSchema) -> LoanRecord:
    return LoanRecord(
        listing=_parse_listing(row, schema),
        final_rate=float(row["final_rate"]),
        origination_date=_parse_date(row["origination_date"]),
        term_months=int(row["term_months"]),
        principal_paid=float(row["principal_paid"]),
        interest_paid=float(row["interest_paid"]),
        status=row["status"].strip(),
        default_label=int(row["default_label"]),
    )


def _read_rows(path, schema: FeatureSchema, required: list[str], parse: Callable) -> list:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in required + schema.names if c not in header]
        if missing:
            raise DataError(f"{path}: header is missing columns {missing}")
        out, errors = [], []
        for rowno, row in enumerate(reader, start=2):
            try:
                out.append(parse(row, schema))
            except (ValueError, KeyError, TypeError) as exc:
                errors.append(f"row {rowno}: {exc}")
    if errors:
        shown = "; ".join(errors[:10])
        more = f" (+{len(errors) - 10} more)" if len(errors) > 10 else ""
        raise DataError(f"{path}: {len(errors)} invalid rows: {shown}{more}")
    return out


def load_loans(path, schema: FeatureSchema) -> list[LoanRecord]:
    """Read funded loans from CSV; every invalid row is reported by number."""
    return _read_rows(path, schema, LOAN_COLUMNS, _parse_loan)


def load_listings(path, schema: FeatureSchema) -> list[ListingRecord]:
    return _read_rows(path, schema, LISTING_COLUMNS, _parse_listing)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    if isinstance(v, dt.date):
        return v.isoformat()
    return str(v)


def _listing_row(l: ListingRecord, extra: list[str]) -> list[str]:
    row = [l.listing_id, l.amount, l.max_borrower_rate, l.creation_date, l.credit_grade,
           l.scorex_bin, l.credit_history_days, l.occupation, l.location]
    return [_fmt(v) for v in row] + [_fmt(l.features.get(n)) for n in extra]


def write_loans(path, loans: Sequence[LoanRecord], schema: FeatureSchema) -> None:
    extra = [n for n in schema.names if n not in LISTING_COLUMNS]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOAN_COLUMNS + extra)
        for loan in loans:
            head = _listing_row(loan.listing, [])
            tail = [loan.final_rate, loan.origination_date, loan.term_months,
                    loan.principal_paid, loan.interest_paid, loan.status, loan.default_label]
            w.writerow(head + [_fmt(v) for v in tail]
                       + [_fmt(loan.listing.features.get(n)) for n in extra])


def write_listings(path, listings: Sequence[ListingRecord], schema: FeatureSchema) -> None:
    extra = [n for n in schema.names if n not in LISTING_COLUMNS]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LISTING_COLUMNS + extra)
        for l in listings:
            w.writerow(_listing_row(l, extra))


def load_group_mapping(path) -> dict[str, float]:
    """Two-column CSV: label, concentration fraction."""
    mapping = {}
    with open(path, newline="") as fh:
        for rowno, row in enumerate(csv.reader(fh), start=1):
            if not row or not row[0].strip():
                continue
            try:
                val = float(row[1])
            except (ValueError, IndexError):
                if rowno == 1:
                    continue  # header
                raise DataError(f"{path}: row {rowno}: bad concentration") from None
            if not 0 <= val <= 1:
                raise DataError(f"{path}: row {rowno}: concentration outside [0, 1]")
            mapping[row[0].strip()] = val
    return mapping


# ---------------------------------------------------------------- groups

@dataclass
class GroupAssignment:
    labels: dict[str, int | None]
    high: float
    low: float

    def array(self, records: Sequence) -> np.ndarray:
        """Group per record as 0/1, with -1 for unassigned."""
        ids = [getattr(r, "listing", r).listing_id for r in records]
        return np.array([-1 if self.labels.get(i) is None else self.labels[i] for i in ids])


def assign_groups(records: Iterable, mapping: dict[str, float], high: float = 0.75,
                  low: float = 0.25, attribute: str = "occupation") -> GroupAssignment:
    """Group 1 at concentration >= high, group 0 at <= low, else unassigned."""
    if not high > low:
        raise ValueError("high cutoff must exceed low cutoff")
    labels = {}
    for rec in records:
        listing = getattr(rec, "listing", rec)
        conc = mapping.get(getattr(listing, attribute))
        if conc is None:
            labels[listing.listing_id] = None
        elif conc >= high:
            labels[listing.listing_id] = 1
        elif conc <= low:
            labels[listing.listing_id] = 0
        else:
            labels[listing.listing_id] = None
    return GroupAssignment(labels, high, low)


# ---------------------------------------------------------------- splits

def split_train_test(records: Sequence, train_fraction: float = 0.6, seed: int = 0):
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must be in (0, 1)")
    n = len(records)
    if n < 2:
        raise ValueError("need at least two records to split")
    perm = np.random.default_rng(seed).permutation(n)
    n_train = min(max(int(round(train_fraction * n)), 1), n - 1)
    train = [records[i] for i in np.sort(perm[:n_train])]
    test = [records[i] for i in np.sort(perm[n_train:])]
    return train, test


def _origination(rec) -> dt.date:
    return getattr(rec, "origination_date", None) or rec.creation_date


def period_length(records: Sequence, n_periods: int) -> tuple[dt.date, float]:
    """Start date and (fractional) length in days of equal calendar periods."""
    dates = [_origination(r) for r in records]
    start, end = min(dates), max(dates)
    span = (end - start).days
    if span == 0:
        raise ValueError("all records share one date; cannot form periods")
    return start, span / n_periods


def time_period_split(records: Sequence, n_periods: int = 4) -> list[list]:
    """Equal-length calendar periods over [first, last] date.

    Intervals are half-open, so a record on a boundary joins the later
    period; the final date closes the last period.
    """
    if n_periods < 1:
        raise ValueError("n_periods must be positive")
    start, length = period_length(records, n_periods)
    out = [[] for _ in range(n_periods)]
    for rec in records:
        k = int(((_origination(rec) - start).days) // length)
        out[min(k, n_periods - 1)].append(rec)
    return out


def rolling_window_split(records: Sequence, window_days: int = 180) -> list[np.ndarray]:
    """Indices of training records for each target record.

    Training loans originated in ``[target - window, target)``; the result
    arrays are views into one date-sorted index array.
    """
    if window_days <= 0:
        raise ValueError("window_days must be positive")
    ords = np.array([_origination(r).toordinal() for r in records], dtype=np.int64)
    order = np.argsort(ords, kind="stable")
    sorted_ords = ords[order]
    lo = np.searchsorted(sorted_ords, ords - window_days, side="left")
    hi = np.searchsorted(sorted_ords, ords, side="left")
    return [order[a:b] for a, b in zip(lo, hi)]


# ---------------------------------------------------------------- cells

RATE_BIN_WIDTH = 0.04


@dataclass
class Cell:
    cell_id: tuple
    members: list[str]
    amount_bin: int
    history_bin: int | None
    rate_bin: int
    grade: str


def _quantile_bins(values: np.ndarray, n_bins: int) -> np.ndarray:
    edges = np.unique(np.quantile(values, np.arange(1, n_bins) / n_bins))
    return np.searchsorted(edges, values, side="right")


def rate_bin(rate: float) -> int:
    return int(math.floor(rate / RATE_BIN_WIDTH + 1e-9))


def build_cells(listings: Sequence) -> list[Cell]:
    """Partition listings by amount sextile, history quintile, 0.04 max-rate bin and grade."""
    listings = [getattr(l, "listing", l) for l in listings]
    if not listings:
        raise ValueError("no listings to partition")
    amounts = np.array([l.amount for l in listings])
    hist = np.array([l.credit_history_days for l in listings], dtype=float)
    a_bin = _quantile_bins(amounts, 6)
    h_bin = _quantile_bins(hist, 5)
    groups = defaultdict(list)
    for l, ab, hb in zip(listings, a_bin, h_bin):
        key = (int(ab), int(hb), rate_bin(l.max_borrower_rate), l.credit_grade)
        groups[key].append(l.listing_id)
    return [Cell(key, members, *key) for key, members in sorted(groups.items())]


def merge_history_bins(cells: Sequence[Cell], accept: Callable[[Cell], bool]) -> list[Cell]:
    """Merge cells differing only in history bin when ``accept`` approves the union."""
    by_rest = defaultdict(list)
    for c in cells:
        by_rest[(c.amount_bin, c.rate_bin, c.grade)].append(c)
    out = []
    for (ab, rb, g), group in sorted(by_rest.items()):
        if len(group) > 1:
            merged = Cell((ab, None, rb, g), [m for c in group for m in c.members], ab, None, rb, g)
            if accept(merged):
                out.append(merged)
                continue
        out.extend(group)
    return out


def filter_cells(cells: Sequence[Cell], crowd_variances: dict, min_crowds: int = 5) -> list[Cell]:
    """Keep cells whose funded loans span ``min_crowds`` crowds of distinct variance.

    ``crowd_variances`` maps a cell id to ``{crowd: portfolio variance}``.
    """
    keep = []
    for c in cells:
        variances = crowd_variances.get(c.cell_id, {})
        if len({round(v, 6) for v in variances.values()}) >= min_crowds:
            keep.append(c)
    return keep
