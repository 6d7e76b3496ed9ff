"""KNN imputation of missing cells and of missing records (sequence gaps).

Neighbour ranking is by distance, ties going to the earlier timestamp.
Distances and neighbour means are accumulated in a fixed order so results
are reproducible to the last bit.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import ESTIMATED_HISTORY, DataError, SiteSeries, time_features


@dataclass(frozen=True)
class ImputeConfig:
    k_neighbors: int = 5
    metric: str = "euclidean"
    weighting: str = "uniform"

    def __post_init__(self):
        if self.k_neighbors < 1:
            raise ValueError("k_neighbors must be positive")
        if self.metric != "euclidean":
            raise ValueError(f"unsupported metric {self.metric!r}")
        if self.weighting != "uniform":
            raise ValueError(f"unsupported weighting {self.weighting!r}")


def _nearest(dist: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` smallest finite entries of ``dist``; ties are
    resolved towards the smaller index."""
    ok = np.flatnonzero(np.isfinite(dist))
    if ok.size <= k:
        return ok[np.argsort(dist[ok], kind="stable")]
    kth = np.partition(dist[ok], k - 1)[k - 1]
    cand = ok[dist[ok] <= kth]
    return cand[np.argsort(dist[cand], kind="stable")][:k]


def _ordered_mean(values: np.ndarray) -> np.ndarray:
    """Mean over axis 1 skipping NaN, summed left to right."""
    acc = np.zeros(values.shape[0])
    cnt = np.zeros(values.shape[0])
    for r in range(values.shape[1]):
        v = values[:, r]
        ok = ~np.isnan(v)
        acc[ok] += v[ok]
        cnt[ok] += 1
    with np.errstate(invalid="ignore"):
        return np.where(cnt > 0, acc / np.maximum(cnt, 1), np.nan)


def partial_distances(row: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Euclidean distance from ``row`` to every row of ``X`` over jointly
    observed coordinates, scaled by sqrt(total / shared).  Rows sharing no
    observed coordinate get ``inf``."""
    p = X.shape[1]
    d2 = np.zeros(X.shape[0])
    shared = np.zeros(X.shape[0], dtype=np.int64)
    for j in range(p):
        if np.isnan(row[j]):
            continue
        col = X[:, j]
        ok = ~np.isnan(col)
        diff = np.where(ok, row[j] - col, 0.0)
        d2 += diff * diff
        shared += ok
    with np.errstate(divide="ignore", invalid="ignore"):
        d = np.sqrt(d2 * (p / shared))
    d[shared == 0] = np.inf
    return d


def knn_fill_matrix(X: np.ndarray, k: int, fill_columns=None, distance_columns=None) -> np.ndarray:
    """Fill NaN cells of ``X`` column by column from the ``k`` nearest donor
    rows (rows observing that column), measured with :func:`partial_distances`
    over ``distance_columns``.  Donor values always come from the input, so
    fill order does not matter."""
    X = np.asarray(X, dtype=np.float64)
    out = X.copy()
    cols = range(X.shape[1]) if fill_columns is None else fill_columns
    D = X if distance_columns is None else X[:, distance_columns]
    for j in cols:
        missing = np.flatnonzero(np.isnan(X[:, j]))
        if missing.size == 0:
            continue
        donors = np.flatnonzero(~np.isnan(X[:, j]))
        if donors.size == 0:
            raise DataError(f"column {j} is missing in every row")
        Dd = D[donors]
        picked = np.full((missing.size, k), np.nan)
        for r, row in enumerate(missing):
            nb = _nearest(partial_distances(D[row], Dd), k)
            if nb.size == 0:
                raise DataError(f"row {row} shares no observed feature with any donor for column {j}")
            picked[r, :nb.size] = X[donors[nb], j]
        out[missing, j] = _ordered_mean(picked)
    return out


def _feature_names(series: SiteSeries) -> list[str]:
    return [n for n in series.features if n != ESTIMATED_HISTORY]


def impute_within_records(series: SiteSeries, cfg: ImputeConfig = ImputeConfig()) -> SiteSeries:
    """Fill missing feature cells of existing records; the target is left
    untouched."""
    names = _feature_names(series)
    X = series.feature_matrix(names)
    if not np.isnan(X).any():
        return series
    for j, name in enumerate(names):
        if np.isnan(X[:, j]).all():
            raise DataError(f"site {series.site_id}: feature {name!r} is missing in every record")
    filled = knn_fill_matrix(X, cfg.k_neighbors)
    feats = dict(series.features)
    feats.update({n: filled[:, j] for j, n in enumerate(names)})
    return series.evolve(features=feats)


def impute_target(series: SiteSeries, cfg: ImputeConfig = ImputeConfig()) -> SiteSeries:
    """Fill missing targets in existing records from feature-space neighbours
    and mark them in ``target_imputed``."""
    missing = np.isnan(series.target)
    if not missing.any():
        return series
    if missing.all():
        raise DataError(f"site {series.site_id}: target missing in every record")
    names = _feature_names(series)
    X = np.column_stack([series.feature_matrix(names), series.target])
    filled = knn_fill_matrix(X, cfg.k_neighbors, fill_columns=[X.shape[1] - 1],
                             distance_columns=list(range(len(names))))
    return series.evolve(target=filled[:, -1], target_imputed=series.target_imputed | missing)


def calendar_coordinates(hours: np.ndarray, start: int, span: int) -> np.ndarray:
    """Neighbour-search coordinates for sequence gaps: sin/cos of hour of day,
    sin/cos of day of year, and time scaled to [0, 1] over the series."""
    hours = np.asarray(hours, dtype=np.int64)
    tf = time_features(hours)
    hod = 2.0 * np.pi * tf["hour_of_day"] / 24.0
    doy = 2.0 * np.pi * (tf["day_of_year"] - 1.0) / 365.25
    lin = (hours - start) / float(max(span, 1))
    return np.column_stack([np.sin(hod), np.cos(hod), np.sin(doy), np.cos(doy), lin])


def impute_sequence_gaps(series: SiteSeries, cfg: ImputeConfig = ImputeConfig()) -> SiteSeries:
    """Materialise absent hours; each synthesised record is the mean of its
    ``k`` nearest existing records in calendar space and carries
    ``gap_flag = 1``."""
    hours = series.hours
    if len(hours) < cfg.k_neighbors:
        raise DataError(f"site {series.site_id}: {len(hours)} records, need at least {cfg.k_neighbors}")
    if series.is_contiguous():
        return series
    start, stop = int(hours[0]), int(hours[-1])
    grid = np.arange(start, stop + 1, dtype=np.int64)
    present = np.isin(grid, hours)
    new_hours = grid[~present]
    span = stop - start
    have = calendar_coordinates(hours, start, span)
    want = calendar_coordinates(new_hours, start, span)

    names = list(series.features)
    values = np.column_stack([series.target] + [series.features[n] for n in names])
    k = cfg.k_neighbors
    nbrs = np.empty((new_hours.size, k), dtype=np.int64)
    for r in range(new_hours.size):
        d2 = np.zeros(len(hours))
        for c in range(have.shape[1]):
            diff = want[r, c] - have[:, c]
            d2 += diff * diff
        nbrs[r] = _nearest(np.sqrt(d2), k)
    synth = np.column_stack([_ordered_mean(values[nbrs, j]) for j in range(values.shape[1])])

    full = np.empty((grid.size, values.shape[1]))
    full[present] = values
    full[~present] = synth
    gap = np.ones(grid.size, dtype=np.int8)
    gap[present] = series.gap_flag
    imputed = np.zeros(grid.size, dtype=bool)
    imputed[present] = series.target_imputed
    return SiteSeries(
        site_id=series.site_id,
        timestamps=grid.astype("datetime64[h]"),
        target=full[:, 0],
        features={n: full[:, j + 1] for j, n in enumerate(names)},
        gap_flag=gap,
        static=series.static,
        target_imputed=imputed,
    )


def drop_empty_records(series: SiteSeries) -> SiteSeries:
    """Remove records with no observed feature so they are rebuilt as gaps."""
    X = series.feature_matrix(_feature_names(series))
    if X.shape[1] == 0:
        return series
    keep = ~np.isnan(X).all(axis=1)
    if keep.all():
        return series
    return SiteSeries(
        site_id=series.site_id,
        timestamps=series.timestamps[keep],
        target=series.target[keep],
        features={n: v[keep] for n, v in series.features.items()},
        gap_flag=series.gap_flag[keep],
        static=series.static,
        target_imputed=series.target_imputed[keep],
    )


def gapfill_series(series: SiteSeries, cfg: ImputeConfig = ImputeConfig()) -> SiteSeries:
    """Full preprocessing chain: cells, then targets, then sequence gaps."""
    s = drop_empty_records(series)
    s = impute_within_records(s, cfg)
    s = impute_target(s, cfg)
    return impute_sequence_gaps(s, cfg)
