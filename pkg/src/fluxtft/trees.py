"""CART regression trees, bagged forests and least-squares boosting.

Split candidates are midpoints between consecutive distinct values; a row
goes left when ``x <= threshold``.  The best split maximises the reduction
in squared error, ties going to the lower feature index and then the lower
threshold.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import DataError, SiteSeries, time_features

FORMAT_VERSION = 1


@dataclass(frozen=True)
class TreeConfig:
    n_trees: int = 200
    max_depth: int | None = None
    min_samples_leaf: int = 1
    max_features: float | int = 1.0
    boosting: bool = False
    learning_rate: float = 0.1
    subsample: float = 1.0
    bootstrap: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if self.min_samples_leaf < 1:
            raise ValueError("min_samples_leaf must be >= 1")
        if self.max_depth is not None and self.max_depth < 0:
            raise ValueError("max_depth must be >= 0 or None")
        if isinstance(self.max_features, float) and not 0.0 < self.max_features <= 1.0:
            raise ValueError("fractional max_features must lie in (0, 1]")
        if self.boosting and not 0.0 < self.learning_rate <= 1.0:
            raise ValueError("learning_rate must lie in (0, 1]")
        if not 0.0 < self.subsample <= 1.0:
            raise ValueError("subsample must lie in (0, 1]")

    @classmethod
    def random_forest(cls, **kw) -> "TreeConfig":
        return cls(**kw)

    @classmethod
    def boosted(cls, **kw) -> "TreeConfig":
        kw.setdefault("max_depth", 6)
        kw.setdefault("n_trees", 100)
        return cls(boosting=True, bootstrap=False, **kw)

    def n_split_features(self, p: int) -> int:
        if isinstance(self.max_features, float):
            return max(1, int(math.ceil(self.max_features * p)))
        return max(1, min(p, int(self.max_features)))


@dataclass
class Tree:
    feature: np.ndarray      # -1 marks a leaf
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    n_samples: np.ndarray
    gain: np.ndarray         # squared-error reduction of the split

    def predict(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(X.shape[0], dtype=np.int64)
        active = self.feature[node] >= 0
        while active.any():
            rows = np.flatnonzero(active)
            nd = node[rows]
            go_left = X[rows, self.feature[nd]] <= self.threshold[nd]
            node[rows] = np.where(go_left, self.left[nd], self.right[nd])
            active[rows] = self.feature[node[rows]] >= 0
        return self.value[node]

    @property
    def depth(self) -> int:
        depth = np.zeros(len(self.feature), dtype=int)
        for i in range(len(self.feature)):
            if self.feature[i] >= 0:
                depth[self.left[i]] = depth[self.right[i]] = depth[i] + 1
        return int(depth.max())

    def to_dict(self) -> dict:
        return {"feature": self.feature.tolist(), "threshold": self.threshold.tolist(),
                "left": self.left.tolist(), "right": self.right.tolist(),
                "value": self.value.tolist(), "n_samples": self.n_samples.tolist(),
                "gain": self.gain.tolist()}

    @classmethod
    def from_dict(cls, d) -> "Tree":
        return cls(np.array(d["feature"], dtype=np.int64), np.array(d["threshold"], dtype=np.float64),
                   np.array(d["left"], dtype=np.int64), np.array(d["right"], dtype=np.int64),
                   np.array(d["value"], dtype=np.float64), np.array(d["n_samples"], dtype=np.int64),
                   np.array(d["gain"], dtype=np.float64))


def _best_split(x: np.ndarray, yc: np.ndarray, min_leaf: int):
    """Best threshold on one feature for centred targets ``yc``.

    Returns ``(gain, threshold)`` or None.  For centred data the SSE
    reduction of splitting after ``i`` rows is ``S_l^2 * n / (n_l * n_r)``.
    """
    n = x.size
    order = np.argsort(x, kind="stable")
    xs = x[order]
    s = np.cumsum(yc[order])[:-1]
    n_l = np.arange(1, n, dtype=np.float64)
    valid = xs[:-1] < xs[1:]
    valid &= (n_l >= min_leaf) & (n - n_l >= min_leaf)
    if not valid.any():
        return None
    gain = np.where(valid, s * s * n / (n_l * (n - n_l)), -np.inf)
    i = int(np.argmax(gain))
    lo, hi = xs[i], xs[i + 1]
    thr = lo + (hi - lo) / 2.0
    if not lo <= thr < hi:
        thr = lo
    return float(gain[i]), float(thr)


def fit_tree(X: np.ndarray, y: np.ndarray, max_depth=None, min_samples_leaf=1,
             n_split_features=None, rng=None) -> Tree:
    """Grow one CART regression tree (depth-first, node 0 is the root)."""
    n, p = X.shape
    m = p if n_split_features is None else n_split_features
    feature, threshold, left, right, value, count, gain = [], [], [], [], [], [], []

    def new_node(idx):
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(float(y[idx].mean()))
        count.append(idx.size)
        gain.append(0.0)
        return len(feature) - 1

    stack = [(new_node(np.arange(n)), np.arange(n), 0)]
    while stack:
        node, idx, depth = stack.pop()
        if idx.size < 2 * min_samples_leaf or (max_depth is not None and depth >= max_depth):
            continue
        yn = y[idx]
        yc = yn - yn.mean()
        if not np.any(yc != 0.0):
            continue
        feats = np.arange(p) if m >= p else np.sort(rng.choice(p, m, replace=False))
        best = None
        for f in feats:
            res = _best_split(X[idx, f], yc, min_samples_leaf)
            if res is not None and (best is None or res[0] > best[0]):
                best = (res[0], res[1], int(f))
        if best is None or not best[0] > 0.0:
            continue
        g, thr, f = best
        go_left = X[idx, f] <= thr
        li, ri = idx[go_left], idx[~go_left]
        feature[node], threshold[node], gain[node] = f, thr, g
        left[node] = new_node(li)
        right[node] = new_node(ri)
        # right pushed first so the left subtree is expanded first
        stack.append((right[node], ri, depth + 1))
        stack.append((left[node], li, depth + 1))
    return Tree(np.array(feature, dtype=np.int64), np.array(threshold), np.array(left, dtype=np.int64),
                np.array(right, dtype=np.int64), np.array(value), np.array(count, dtype=np.int64),
                np.array(gain))


@dataclass
class ForestModel:
    config: TreeConfig
    feature_names: list[str]
    trees: list[Tree] = field(default_factory=list)
    init: float = 0.0
    train_loss: list[float] = field(default_factory=list)
    category_codes: dict[str, list[str]] = field(default_factory=dict)

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    def to_dict(self) -> dict:
        return {"format": "fluxtft-forest", "version": FORMAT_VERSION,
                "config": asdict(self.config), "feature_names": list(self.feature_names),
                "init": self.init, "train_loss": list(self.train_loss),
                "category_codes": self.category_codes,
                "trees": [t.to_dict() for t in self.trees]}

    @classmethod
    def from_dict(cls, d) -> "ForestModel":
        if d.get("format") != "fluxtft-forest" or d.get("version") != FORMAT_VERSION:
            raise ValueError("not a version-1 forest document")
        return cls(TreeConfig(**d["config"]), list(d["feature_names"]),
                   [Tree.from_dict(t) for t in d["trees"]], float(d["init"]),
                   list(d.get("train_loss", [])), dict(d.get("category_codes", {})))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "ForestModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _validate_xy(X, y):
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0 or X.shape[1] == 0:
        raise ValueError("fit_forest needs a non-empty 2-D feature matrix")
    if y.shape != (X.shape[0],):
        raise ValueError(f"target length {y.shape} does not match {X.shape[0]} rows")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ValueError("fit_forest: non-finite values in input")
    return X, y


def fit_forest(X, y, cfg: TreeConfig = TreeConfig(), feature_names: Sequence[str] | None = None) -> ForestModel:
    """Bagged CART forest, or stagewise least-squares boosting when
    ``cfg.boosting`` is set.  Deterministic given ``cfg.seed``."""
    X, y = _validate_xy(X, y)
    n, p = X.shape
    names = list(feature_names) if feature_names is not None else [f"x{j}" for j in range(p)]
    if len(names) != p:
        raise ValueError("feature_names length does not match column count")
    m = cfg.n_split_features(p)
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.n_trees)
    model = ForestModel(cfg, names)
    if not cfg.boosting:
        for ss in seeds:
            rng = np.random.default_rng(ss)
            rows = rng.integers(0, n, n) if cfg.bootstrap else np.arange(n)
            if cfg.subsample < 1.0:
                rows = rows[: max(1, int(round(cfg.subsample * n)))]
            model.trees.append(fit_tree(X[rows], y[rows], cfg.max_depth, cfg.min_samples_leaf, m, rng))
        return model

    model.init = float(y.mean())
    F = np.full(n, model.init)
    model.train_loss.append(float(np.mean((y - F) ** 2)))
    for ss in seeds:
        rng = np.random.default_rng(ss)
        rows = np.arange(n) if cfg.subsample >= 1.0 else np.sort(
            rng.choice(n, max(1, int(round(cfg.subsample * n))), replace=False))
        tree = fit_tree(X[rows], (y - F)[rows], cfg.max_depth, cfg.min_samples_leaf, m, rng)
        model.trees.append(tree)
        F += cfg.learning_rate * tree.predict(X)
        model.train_loss.append(float(np.mean((y - F) ** 2)))
    return model


def predict_forest(model: ForestModel, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1 and X.size == 0:
        return np.empty(0)
    if X.ndim != 2 or X.shape[1] != model.n_features:
        raise ValueError(f"expected {model.n_features} columns, got shape {X.shape}")
    if X.shape[0] == 0:
        return np.empty(0)
    if model.config.boosting:
        out = np.full(X.shape[0], model.init)
        for t in model.trees:
            out += model.config.learning_rate * t.predict(X)
        return out
    out = np.zeros(X.shape[0])
    for t in model.trees:
        out += t.predict(X)
    return out / len(model.trees)


def feature_importance(model: ForestModel) -> list[tuple[str, float]]:
    """Total squared-error reduction per feature, normalised to sum to 1
    (all zeros if no tree ever split), in descending order."""
    total = np.zeros(model.n_features)
    for t in model.trees:
        split = t.feature >= 0
        np.add.at(total, t.feature[split], t.gain[split])
    s = total.sum()
    if s > 0:
        total = total / s
    pairs = list(zip(model.feature_names, total.tolist()))
    return sorted(pairs, key=lambda kv: (-kv[1], kv[0]))


def select_top_k(importances: Sequence[tuple[str, float]], k: int) -> list[str]:
    """Names of the ``k`` most important features, ties broken by name."""
    if k <= 0:
        raise ValueError("k must be positive")
    if k > len(importances):
        raise ValueError(f"k={k} exceeds {len(importances)} features")
    ranked = sorted(importances, key=lambda kv: (-kv[1], kv[0]))
    return [name for name, _ in ranked[:k]]


# -- tabular representation -----------------------------------------------

STATIC_PREFIX = "static:"
TABULAR_TIME = ("hour_of_day", "day_of_year")


def default_tabular_columns(feature_names: Sequence[str]) -> list[str]:
    return list(feature_names) + list(TABULAR_TIME) + [
        STATIC_PREFIX + "latitude", STATIC_PREFIX + "igbp_generic"]


def category_codes(series: Sequence[SiteSeries], columns: Sequence[str]) -> dict[str, list[str]]:
    codes = {}
    for c in columns:
        if c.startswith(STATIC_PREFIX):
            name = c[len(STATIC_PREFIX):]
            v = series[0].static.value(name) if series else None
            if isinstance(v, str):
                codes[name] = sorted({s.static.value(name) for s in series})
    return codes


def tabular_matrix(series: SiteSeries, columns: Sequence[str], codes: dict[str, list[str]]) -> np.ndarray:
    """One row per timestamp with current-hour values of ``columns``.

    Categorical statics become their index in ``codes`` (unseen = -1).
    """
    n = len(series)
    tf = None
    out = np.empty((n, len(columns)))
    for j, c in enumerate(columns):
        if c.startswith(STATIC_PREFIX):
            name = c[len(STATIC_PREFIX):]
            v = series.static.value(name)
            if name in codes:
                v = codes[name].index(v) if v in codes[name] else -1
            out[:, j] = float(v)
        elif c in series.features:
            out[:, j] = series.features[c]
        elif c in TABULAR_TIME or c in ("month", "global_time_index"):
            tf = tf or time_features(series.hours)
            out[:, j] = tf[c]
        else:
            raise DataError(f"site {series.site_id}: missing feature column {c!r}")
    return out


def tabular_dataset(series: Sequence[SiteSeries], columns: Sequence[str], codes, labelled_only=True):
    """Stack tabular rows of several sites; optionally keep only observed
    (not gap-filled, not imputed) targets."""
    Xs, ys = [], []
    for s in series:
        X = tabular_matrix(s, columns, codes)
        keep = np.isfinite(s.target)
        if labelled_only:
            keep &= (s.gap_flag == 0) & ~s.target_imputed
        Xs.append(X[keep])
        ys.append(s.target[keep])
    if not Xs:
        return np.empty((0, len(columns))), np.empty(0)
    return np.concatenate(Xs), np.concatenate(ys)


def predict_history(model: ForestModel, series: SiteSeries) -> np.ndarray:
    """Per-timestamp tree estimate of the target for ``series``."""
    return predict_forest(model, tabular_matrix(series, model.feature_names, model.category_codes))
