"""Glue between the modules: data loading, preprocessing, model fitting and
evaluation on aligned timestamps.  Used by the CLI and the experiment
runner."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import synth
from .dataset import (
    DataError,
    FeatureCatalog,
    SiteSeries,
    TargetHistoryMode,
    WindowBatch,
    WindowSpec,
    attach_history,
    build_windows,
    filter_sites,
    ingest_csv,
    normalize_fit_apply,
    NormStats,
    write_csv,
)
from .gapfill import ImputeConfig, gapfill_series
from .split import SplitAssignment, cv_groups, fold_index, stratified_split
from .tft import TftConfig, TemporalFusionTransformer, build_model, predict, train
from .trees import (
    ForestModel,
    TreeConfig,
    category_codes,
    default_tabular_columns,
    fit_forest,
    predict_history,
    tabular_dataset,
    tabular_matrix,
)

log = logging.getLogger(__name__)


# -- data ---------------------------------------------------------------------

def load_dataset(directory) -> tuple[list[SiteSeries], FeatureCatalog]:
    directory = Path(directory)
    cat_path = directory / "catalog.json"
    if not cat_path.exists():
        raise DataError(f"{directory}: catalog.json not found")
    catalog = FeatureCatalog.load(cat_path)
    series = ingest_csv(directory / "sites.csv", directory / "records.csv", catalog)
    return series, catalog


def save_dataset(series: Sequence[SiteSeries], directory, catalog: FeatureCatalog) -> None:
    write_csv(series, directory, catalog)
    catalog.save(Path(directory) / "catalog.json")


def obtain_dataset(cfg: dict) -> tuple[list[SiteSeries], FeatureCatalog]:
    """Sites from ``data.dir`` or, when unset, the synthetic generator."""
    data = cfg["data"]
    if data.get("dir"):
        return load_dataset(data["dir"])
    sc = data["synthetic"]
    series, _ = synth.generate_sites(sc["n_sites"], sc["years"], sc["seed"], sc["missing_frac"],
                                     sc["gap_frac"], sc["igbp_groups"])
    return series, synth.synthetic_catalog()


def preprocess(series: Sequence[SiteSeries], cfg: dict) -> list[SiteSeries]:
    """Drop short or sparse sites, then gap-fill the rest."""
    kept = filter_sites(series, cfg["data"]["min_span_hours"], cfg["data"]["max_missing_frac"])
    icfg = ImputeConfig(k_neighbors=cfg["gapfill"]["k_neighbors"])
    return [gapfill_series(s, icfg) for s in kept]


def make_split(series: Sequence[SiteSeries], cfg: dict) -> SplitAssignment:
    """Stratified train/val/test split; with ``n_folds`` >= 2 the non-test
    sites are re-dealt into folds and the configured fold becomes val."""
    sc = cfg["split"]
    sa = stratified_split([(s.site_id, s.static.igbp_generic) for s in series], tuple(sc["ratios"]), sc["seed"])
    n_folds = sc["n_folds"]
    if n_folds and n_folds >= 2:
        folds = cv_groups(sa, n_folds, sc["seed"])
        vf = sc["validation_fold"]
        if not 1 <= vf <= n_folds:
            raise ValueError(f"validation_fold must lie in 1..{n_folds}")
        sa = sa.with_folds(fold_index(folds), vf - 1)
    return sa


def by_split(series: Sequence[SiteSeries], split: SplitAssignment, which: str) -> list[SiteSeries]:
    unknown = [s.site_id for s in series if s.site_id not in split.split]
    if unknown:
        raise DataError(f"sites missing from the split: {unknown}")
    return [s for s in series if split.split[s.site_id] == which]


# -- evaluation alignment -----------------------------------------------------

@dataclass
class Evaluation:
    """Observed and predicted target on the evaluated timestamps."""
    y: np.ndarray
    y_hat: np.ndarray
    site: np.ndarray
    group: np.ndarray
    hours: np.ndarray

    @classmethod
    def concat(cls, parts: Sequence["Evaluation"]) -> "Evaluation":
        if not parts:
            return cls(*(np.empty(0) for _ in range(5)))
        return cls(*(np.concatenate([getattr(p, f) for p in parts])
                     for f in ("y", "y_hat", "site", "group", "hours")))


def eval_positions(series: SiteSeries, k: int, tau: int = 1, exclude_gap_labels: bool = True) -> np.ndarray:
    """Indices of labelled timestamps that are also stride-1 window
    origins, so trees and the TFT are scored on the same hours."""
    idx = np.arange(k, len(series) - tau + 1)
    ok = np.isfinite(series.target[idx])
    if exclude_gap_labels:
        ok &= (series.gap_flag[idx] == 0) & ~series.target_imputed[idx]
    return idx[ok]


def _site_eval(series: SiteSeries, idx: np.ndarray, y_hat: np.ndarray) -> Evaluation:
    n = idx.size
    return Evaluation(series.target[idx], y_hat, np.full(n, series.site_id, dtype=object),
                      np.full(n, series.static.igbp_generic, dtype=object), series.hours[idx])


# -- trees ----------------------------------------------------------------------

def tree_config(tcfg: dict, boosting: bool) -> TreeConfig:
    if boosting:
        return TreeConfig.boosted(n_trees=tcfg["boost_n_trees"], max_depth=tcfg["boost_max_depth"],
                                  min_samples_leaf=tcfg["min_samples_leaf"], max_features=1.0,
                                  learning_rate=tcfg["learning_rate"], subsample=tcfg["subsample"],
                                  seed=tcfg["seed"])
    return TreeConfig.random_forest(n_trees=tcfg["n_trees"], max_depth=tcfg["max_depth"],
                                    min_samples_leaf=tcfg["min_samples_leaf"],
                                    max_features=tcfg["max_features"], seed=tcfg["seed"])


def fit_trees(train_series: Sequence[SiteSeries], columns: Sequence[str], tcfg: dict,
              boosting: bool = False) -> ForestModel:
    """Fit on the labelled rows of ``train_series``, subsampled to
    ``max_rows`` with a seeded draw."""
    codes = category_codes(train_series, columns)
    X, y = tabular_dataset(train_series, columns, codes)
    if X.shape[0] == 0:
        raise DataError("no labelled training rows for the tree model")
    cap = tcfg.get("max_rows")
    if cap and X.shape[0] > cap:
        rows = np.sort(np.random.default_rng([tcfg["seed"], 7]).choice(X.shape[0], cap, replace=False))
        X, y = X[rows], y[rows]
    model = fit_forest(X, y, tree_config(tcfg, boosting), list(columns))
    model.category_codes = codes
    return model


def evaluate_trees(model: ForestModel, series: Sequence[SiteSeries], k: int, tau: int = 1,
                   exclude_gap_labels: bool = True) -> Evaluation:
    parts = []
    for s in series:
        idx = eval_positions(s, k, tau, exclude_gap_labels)
        if idx.size:
            pred = predict_history(model, s)
            parts.append(_site_eval(s, idx, pred[idx]))
    return Evaluation.concat(parts)


def with_tree_history(series: Sequence[SiteSeries], model: ForestModel) -> list[SiteSeries]:
    return [attach_history(s, predict_history(model, s)) for s in series]


# -- TFT --------------------------------------------------------------------------

TFT_ONLY = ("train_stride", "val_stride", "eval_stride")


def tft_config(section: dict, mode) -> TftConfig:
    kw = {k: v for k, v in section.items() if k not in TFT_ONLY}
    kw["target_history_mode"] = TargetHistoryMode(mode).value
    return TftConfig(**kw)


def windows(series: Sequence[SiteSeries], catalog: FeatureCatalog, cfg: TftConfig, stride: int) -> WindowBatch | None:
    spec = WindowSpec(cfg.encoder_length, cfg.decoder_length, cfg.decoder_length)
    parts = list(build_windows(series, spec, catalog, TargetHistoryMode(cfg.target_history_mode), stride,
                               cfg.exclude_gap_labels))
    return WindowBatch.concat(parts) if parts else None


@dataclass
class TftRun:
    model: TemporalFusionTransformer
    norm_stats: NormStats
    catalog: FeatureCatalog
    history: object = None

    def save(self, directory) -> None:
        directory = Path(directory)
        self.model.save(directory)
        self.norm_stats.save(directory / "norm_stats.json")
        self.catalog.save(directory / "catalog.json")

    @classmethod
    def load(cls, directory) -> "TftRun":
        directory = Path(directory)
        return cls(TemporalFusionTransformer.load(directory), NormStats.load(directory / "norm_stats.json"),
                   FeatureCatalog.load(directory / "catalog.json"))


def fit_tft(train_series, val_series, catalog: FeatureCatalog, section: dict, mode,
            checkpoint_dir=None) -> TftRun:
    cfg = tft_config(section, mode)
    wtr = windows(train_series, catalog, cfg, section["train_stride"])
    if wtr is None:
        raise DataError("training sites are shorter than one window")
    wva = windows(val_series, catalog, cfg, section["val_stride"]) if val_series else None
    parts = [wtr] if wva is None else [wtr, wva]
    normed, stats = normalize_fit_apply(wtr, parts)
    model = build_model(cfg, normed[0], stats)
    hist = train(model, normed[0], normed[1] if wva is not None else None)
    run = TftRun(model, stats, catalog, hist)
    if checkpoint_dir is not None:
        run.save(checkpoint_dir)
    return run


def evaluate_tft(run: TftRun, series: Sequence[SiteSeries], stride: int = 1, capture: bool = False):
    """Median predictions scored on labelled decoder steps.  With
    ``capture``, also returns ``(windows, outputs)`` per site."""
    cfg = run.model.config
    spec = WindowSpec(cfg.encoder_length, cfg.decoder_length, cfg.decoder_length)
    mode = TargetHistoryMode(cfg.target_history_mode)
    parts, captured = [], []
    for s in series:
        for wb in build_windows([s], spec, run.catalog, mode, stride, cfg.exclude_gap_labels):
            wn = run.norm_stats.apply(wb)
            pred = predict(run.model, wn, run.norm_stats, capture=capture)
            m = wb.label_mask[:, 0]
            origin_idx = (wb.origin.astype(np.int64) - s.hours[0]).astype(np.int64)
            ev = _site_eval(s, origin_idx[m], pred.point[m, 0])
            ev.y = wb.label[m, 0]
            parts.append(ev)
            if capture:
                captured.append((wb, pred.outputs))
    ev = Evaluation.concat(parts)
    return (ev, captured) if capture else ev
