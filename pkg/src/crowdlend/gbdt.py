"""Second-order gradient-boosted regression trees for binary default prediction.

Trees are fit greedily on exact split points with the regularized gain

    0.5 * [G_L^2/(H_L+lam) + G_R^2/(H_R+lam) - G^2/(H+lam)] - gamma

and leaf weights ``-G/(H+lam)``. Missing values (NaN) follow a per-node
default branch chosen by gain.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

FORMAT_VERSION = 1
_MARGIN_CLIP = 36.0


@dataclass(frozen=True)
class TrainConfig:
    n_trees: int = 100
    gamma: float = 0.0
    lam: float = 1.0
    learning_rate: float = 0.1
    max_depth: int = 8
    row_subsample: float = 1.0
    col_subsample: float = 1.0
    min_child_weight: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 0:
            raise ValueError("n_trees must be >= 0")
        if self.gamma < 0 or self.lam < 0:
            raise ValueError("gamma and lam must be nonnegative")
        if not 0 < self.learning_rate <= 1:
            raise ValueError("learning_rate must be in (0, 1]")
        if self.max_depth < 1:
            raise ValueError("max_depth must be positive")
        if not 0 < self.row_subsample <= 1 or not 0 < self.col_subsample <= 1:
            raise ValueError("subsample fractions must be in (0, 1]")
        if self.min_child_weight < 0:
            raise ValueError("min_child_weight must be nonnegative")


def sigmoid(x):
    x = np.clip(x, -_MARGIN_CLIP, _MARGIN_CLIP)
    return 1.0 / (1.0 + np.exp(-x))


def logistic_loss(margin, label):
    """``y*ln(1+e^-m) + (1-y)*ln(1+e^m)``, stable for large ``|m|``."""
    margin = np.asarray(margin, dtype=float)
    label = np.asarray(label, dtype=float)
    res = label * np.logaddexp(0.0, -margin) + (1.0 - label) * np.logaddexp(0.0, margin)
    return res if res.ndim else float(res)


def grad_hess(margin, label):
    p = 1.0 / (1.0 + np.exp(-np.asarray(margin, dtype=float)))
    g = p - np.asarray(label, dtype=float)
    h = np.maximum(p * (1.0 - p), 1e-16)
    if g.ndim == 0:
        return float(g), float(h)
    return g, h


@dataclass
class RegressionTree:
    """Flat binary tree; ``feature == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    default_left: np.ndarray
    value: np.ndarray

    @property
    def n_leaves(self) -> int:
        return int(np.sum(self.feature < 0))

    def leaf_weights(self) -> np.ndarray:
        return self.value[self.feature < 0]

    def depth(self) -> int:
        def walk(i):
            if self.feature[i] < 0:
                return 0
            return 1 + max(walk(self.left[i]), walk(self.right[i]))
        return walk(0)

    def apply(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(len(X), dtype=np.int64)
        rows = np.arange(len(X))
        while True:
            feat = self.feature[node]
            active = feat >= 0
            if not active.any():
                return node
            r, n, f = rows[active], node[active], feat[active]
            x = X[r, f]
            go_left = np.where(np.isnan(x), self.default_left[n], x < self.threshold[n])
            node[active] = np.where(go_left, self.left[n], self.right[n])

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(X)]


def _best_split(Xn, g, h, lam, gamma, mcw):
    """Best (gain, column, threshold, default_left) over the columns of ``Xn``."""
    n, F = Xn.shape
    G, H = g.sum(), h.sum()
    parent = G * G / (H + lam)
    order = np.argsort(Xn, axis=0, kind="stable")  # NaN sorts last
    xs = np.take_along_axis(Xn, order, axis=0)
    gs, hs = g[order], h[order]
    n_ok = np.sum(~np.isnan(Xn), axis=0)
    GL = np.cumsum(gs, axis=0)
    HL = np.cumsum(hs, axis=0)
    idx = np.arange(n)[:, None]
    # non-missing prefix sums, frozen past the last observed value
    last = np.maximum(n_ok - 1, 0)
    G_ok = np.where(n_ok > 0, GL[last, np.arange(F)], 0.0)
    H_ok = np.where(n_ok > 0, HL[last, np.arange(F)], 0.0)
    G_miss, H_miss = G - G_ok, H - H_ok
    valid = (idx < n_ok - 1)
    valid[:-1] &= xs[1:] > xs[:-1]
    valid[-1] = False

    best = (0.0, -1, 0.0, False)
    for miss_left in (False, True):
        gl = GL + (G_miss if miss_left else 0.0)
        hl = HL + (H_miss if miss_left else 0.0)
        gr, hr = G - gl, H - hl
        with np.errstate(divide="ignore", invalid="ignore"):
            gain = 0.5 * (gl * gl / (hl + lam) + gr * gr / (hr + lam) - parent) - gamma
        ok = valid & (hl >= mcw) & (hr >= mcw)
        gain = np.where(ok, gain, -np.inf)
        flat = int(np.argmax(gain))
        i, j = divmod(flat, F)
        if gain[i, j] > best[0]:
            thr = 0.5 * (xs[i, j] + xs[i + 1, j])
            if not thr > xs[i, j]:  # adjacent floats; keep the split between them
                thr = xs[i + 1, j]
            best = (float(gain[i, j]), j, float(thr), miss_left)
        if not np.any(n_ok < n):
            break
    return best


_MIN_GAIN = 1e-12


def fit_tree(X: np.ndarray, grads: np.ndarray, hesss: np.ndarray, config: TrainConfig,
             columns: Sequence[int] | None = None) -> RegressionTree:
    """Greedy depth-first growth of one regression tree on gradient statistics."""
    X = np.asarray(X, dtype=float)
    if len(X) == 0:
        raise ValueError("cannot fit a tree on zero rows")
    cols = np.arange(X.shape[1]) if columns is None else np.asarray(columns)
    lam, gamma, mcw = config.lam, config.gamma, config.min_child_weight
    feature, threshold, left, right, dleft, value = [], [], [], [], [], []

    def new_node():
        for lst, v in ((feature, -1), (threshold, 0.0), (left, -1), (right, -1),
                       (dleft, False), (value, 0.0)):
            lst.append(v)
        return len(feature) - 1

    root = new_node()
    stack = [(root, np.arange(len(X)), 0)]
    while stack:
        node, rows, depth = stack.pop()
        g, h = grads[rows], hesss[rows]
        G, H = g.sum(), h.sum()
        value[node] = float(-G / (H + lam)) if H + lam > 0 else 0.0
        if depth >= config.max_depth or len(rows) < 2 or len(cols) == 0:
            continue
        gain, j, thr, miss_left = _best_split(X[np.ix_(rows, cols)], g, h, lam, gamma, mcw)
        if j < 0 or gain <= _MIN_GAIN:
            continue
        f = int(cols[j])
        x = X[rows, f]
        go_left = np.where(np.isnan(x), miss_left, x < thr)
        lnode, rnode = new_node(), new_node()
        feature[node], threshold[node] = f, thr
        left[node], right[node], dleft[node] = lnode, rnode, miss_left
        stack.append((rnode, rows[~go_left], depth + 1))
        stack.append((lnode, rows[go_left], depth + 1))

    return RegressionTree(np.array(feature, dtype=np.int64), np.array(threshold),
                          np.array(left, dtype=np.int64), np.array(right, dtype=np.int64),
                          np.array(dleft, dtype=bool), np.array(value))


@dataclass
class BoostedModel:
    trees: list[RegressionTree]
    base_margin: float
    config: TrainConfig
    feature_names: list[str] = field(default_factory=list)

    def margin(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        out = np.full(len(X), self.base_margin)
        for tree in self.trees:
            out += self.config.learning_rate * tree.predict(X)
        return out

    def objective(self, X, labels) -> float:
        """Training loss plus ``sum(gamma*T + 0.5*lam*||eps*w||^2)``."""
        loss = float(np.sum(logistic_loss(self.margin(X), labels)))
        eps, c = self.config.learning_rate, self.config
        reg = sum(c.gamma * t.n_leaves + 0.5 * c.lam * float(np.sum((eps * t.leaf_weights()) ** 2))
                  for t in self.trees)
        return loss + reg


def _logit(p: float) -> float:
    p = min(max(p, 1e-6), 1 - 1e-6)
    return float(np.log(p / (1 - p)))


def train(X, labels, config: TrainConfig = TrainConfig(),
          feature_names: Sequence[str] | None = None) -> BoostedModel:
    """Boost ``config.n_trees`` trees from a base margin at the label log-odds."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(labels, dtype=float)
    if X.ndim != 2 or len(X) != len(y):
        raise ValueError("X must be 2-D with one row per label")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be binary")
    names = list(feature_names) if feature_names is not None else [f"x{i}" for i in range(X.shape[1])]
    model = BoostedModel([], _logit(float(y.mean())) if len(y) else 0.0, config, names)
    if len(y) == 0 or y.min() == y.max():
        return model
    rng = np.random.default_rng(config.seed)
    n, F = X.shape
    n_rows = max(1, int(round(config.row_subsample * n)))
    n_cols = max(1, int(round(config.col_subsample * F)))
    margin = np.full(n, model.base_margin)
    for _ in range(config.n_trees):
        g, h = grad_hess(margin, y)
        rows = np.sort(rng.choice(n, n_rows, replace=False)) if n_rows < n else np.arange(n)
        cols = np.sort(rng.choice(F, n_cols, replace=False)) if n_cols < F else np.arange(F)
        tree = fit_tree(X[rows], g[rows], h[rows], config, columns=cols)
        model.trees.append(tree)
        margin += config.learning_rate * tree.predict(X)
    return model


def _as_matrix(model: BoostedModel, rows) -> np.ndarray:
    if isinstance(rows, Mapping):
        unknown = set(rows) - set(model.feature_names)
        if unknown:
            raise KeyError(f"unknown features {sorted(unknown)}")
        missing = [n for n in model.feature_names if n not in rows]
        if missing:
            raise KeyError(f"missing features {missing}")
        return np.column_stack([np.atleast_1d(np.asarray(rows[n], dtype=float))
                                for n in model.feature_names])
    X = np.asarray(rows, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != len(model.feature_names):
        raise ValueError(f"expected {len(model.feature_names)} features, got {X.shape[1]}")
    return X


def predict_proba(model: BoostedModel, rows) -> np.ndarray:
    """Default probability per row, strictly inside (0, 1)."""
    p = sigmoid(model.margin(_as_matrix(model, rows)))
    return np.clip(p, 1e-15, 1 - 1e-15)


# ---------------------------------------------------------------- serialization

def _hex(x: float) -> str:
    return float(x).hex()


def dumps(model: BoostedModel) -> str:
    lines = [f"crowdlend-gbdt {FORMAT_VERSION}",
             "features " + ",".join(model.feature_names),
             "config " + " ".join(f"{k}={v!r}" for k, v in asdict(model.config).items()),
             f"base_margin {_hex(model.base_margin)}",
             f"trees {len(model.trees)}"]
    for t in model.trees:
        lines.append(f"tree {len(t.feature)}")
        for i in range(len(t.feature)):
            lines.append(f"{t.feature[i]} {_hex(t.threshold[i])} {t.left[i]} {t.right[i]} "
                         f"{int(t.default_left[i])} {_hex(t.value[i])}")
    return "\n".join(lines) + "\n"


def loads(text: str) -> BoostedModel:
    lines = iter(text.splitlines())
    magic, version = next(lines).split()
    if magic != "crowdlend-gbdt" or int(version) != FORMAT_VERSION:
        raise ValueError("not a crowdlend model file or unsupported version")
    names_part = next(lines)[len("features "):]
    names = names_part.split(",") if names_part else []
    cfg = {}
    for tok in next(lines).split()[1:]:
        k, v = tok.split("=", 1)
        cfg[k] = int(v) if k in ("n_trees", "max_depth", "seed") else float(v)
    config = TrainConfig(**cfg)
    base = float.fromhex(next(lines).split()[1])
    n_trees = int(next(lines).split()[1])
    trees = []
    for _ in range(n_trees):
        n_nodes = int(next(lines).split()[1])
        rows = [next(lines).split() for _ in range(n_nodes)]
        trees.append(RegressionTree(
            np.array([int(r[0]) for r in rows], dtype=np.int64),
            np.array([float.fromhex(r[1]) for r in rows]),
            np.array([int(r[2]) for r in rows], dtype=np.int64),
            np.array([int(r[3]) for r in rows], dtype=np.int64),
            np.array([r[4] == "1" for r in rows], dtype=bool),
            np.array([float.fromhex(r[5]) for r in rows])))
    return BoostedModel(trees, base, config, names)


def save(model: BoostedModel, path) -> None:
    Path(path).write_text(dumps(model))


def load(path) -> BoostedModel:
    return loads(Path(path).read_text())


def with_config(config: TrainConfig, **changes) -> TrainConfig:
    return replace(config, **changes)
