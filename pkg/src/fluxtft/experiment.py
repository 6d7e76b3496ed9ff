"""Five-step model comparison.

1. RFR-BASELINE: random forest on every feature.
2. Feature-engineered trees: random forest and boosted trees on the top-k
   baseline features; the better one by validation NSE is reported.
3. GPP-TFT: TFT with the observed target history.
4. No-GPP-TFT: TFT without target history (upscaling capable).
5. Tree-FT: TFT whose history channel holds the step-2 tree estimates.

All models are scored on the same test timestamps.  Outputs go to fixed
names under the run directory: ``comparison.csv``/``comparison.txt``,
``report.json``, ``cv.json``, ``split.csv``, ``manifest.json``,
``checkpoint/<model>/`` and ``figures/``.
"""
from __future__ import annotations

import csv
import json
import logging
import platform
from pathlib import Path

import numpy as np

from . import __version__
from .config import config_hash
from .dataset import TargetHistoryMode
from .evalmetrics import breakdown_by_group, compute_metrics, format_table, loss_distribution, reports_table
from .interpret import (
    attention_by_group,
    render_group_attention_svg,
    render_snapshot_svg,
    top_features,
    write_importance_csv,
)
from .pipeline import (
    by_split,
    evaluate_tft,
    evaluate_trees,
    fit_tft,
    fit_trees,
    make_split,
    obtain_dataset,
    preprocess,
    with_tree_history,
)
from .tft import capture_interpretation, write_snapshots_csv
from .trees import default_tabular_columns, feature_importance, select_top_k

log = logging.getLogger(__name__)

COMPARISON_COLUMNS = ["step", "model", "n_features", "encoder_length", "hidden_size", "upscaling",
                      "val_rmse", "val_mae", "val_nse", "test_rmse", "test_mae", "test_nse"]


def _metrics(ev):
    if ev.y.size == 0:
        return None
    return compute_metrics(ev.y, ev.y_hat)


def _fmt(v):
    return "" if v is None else f"{v:.6f}"


def _row(step, name, n_features, k, hidden, upscaling, val, test):
    row = {"step": step, "model": name, "n_features": n_features, "encoder_length": k,
           "hidden_size": hidden, "upscaling": upscaling}
    for prefix, rep in (("val", val), ("test", test)):
        for m in ("rmse", "mae", "nse"):
            row[f"{prefix}_{m}"] = None if rep is None else getattr(rep, m)
    return row


def _write_comparison(rows, out: Path) -> None:
    with open(out / "comparison.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COMPARISON_COLUMNS)
        for r in rows:
            w.writerow([_fmt(r[c]) if isinstance(r[c], float) or r[c] is None else r[c]
                        for c in COMPARISON_COLUMNS])
    (out / "comparison.txt").write_text(format_table(rows, COMPARISON_COLUMNS))


def run_experiment(cfg: dict, out_dir) -> dict:
    out = Path(out_dir)
    (out / "checkpoint").mkdir(parents=True, exist_ok=True)
    (out / "figures").mkdir(exist_ok=True)
    tcfg, tft_sec, exp = cfg["trees"], cfg["tft"], cfg["experiment"]
    k, tau = tft_sec["encoder_length"], tft_sec["decoder_length"]
    excl = tft_sec["exclude_gap_labels"]

    series, catalog = obtain_dataset(cfg)
    series = preprocess(series, cfg)
    if not series:
        from .dataset import DataError
        raise DataError("no site passed the span / missing-data filter")
    split = make_split(series, cfg)
    split.save(out / "split.csv")
    train_s, val_s, test_s = (by_split(series, split, w) for w in ("train", "val", "test"))
    log.info("sites: %d train, %d val, %d test", len(train_s), len(val_s), len(test_s))
    group_of = {s.site_id: s.static.igbp_generic for s in series}

    rows, report = [], {"models": {}, "split": dict(zip(("train", "val", "test"), split.counts()))}

    def record(step, name, n_feat, enc_len, hidden, upscaling, val_ev, test_ev):
        val, test = _metrics(val_ev), _metrics(test_ev)
        rows.append(_row(step, name, n_feat, enc_len, hidden, upscaling, val, test))
        entry = {"val": None if val is None else val.to_dict(), "test": None if test is None else test.to_dict()}
        if test_ev.y.size:
            entry["test_by_igbp"] = [r.to_dict() for r in breakdown_by_group(test_ev.y, test_ev.y_hat, test_ev.group)]
        report["models"][name] = entry
        log.info("%s: val %s test %s", name, val and round(val.nse or 0, 4), test and round(test.nse or 0, 4))

    # step 1
    base_cols = default_tabular_columns(catalog.time_varying)
    rfr = fit_trees(train_s, base_cols, tcfg)
    rfr.save(out / "checkpoint" / "rfr-baseline.json")
    record(1, "RFR-BASELINE", len(catalog.time_varying), "-", "-", "yes",
           evaluate_trees(rfr, val_s, k, tau, excl), evaluate_trees(rfr, test_s, k, tau, excl))
    importances = feature_importance(rfr)
    report["baseline_importance"] = importances

    # step 2
    ranked = [(n, v) for n, v in importances if n in set(catalog.time_varying)]
    candidates = []
    for kk in tcfg["top_k"]:
        feats = select_top_k(ranked, min(kk, len(ranked)))
        cols = default_tabular_columns(feats)
        for boosting, label in ((False, "RFR"), (True, "XGB")):
            model = fit_trees(train_s, cols, tcfg, boosting)
            val_ev = evaluate_trees(model, val_s, k, tau, excl)
            vm = _metrics(val_ev)
            candidates.append({"name": f"{label}-TOP{kk}", "model": model, "features": feats, "val_ev": val_ev,
                               "val_nse": -np.inf if vm is None or vm.nse is None else vm.nse})
    best = max(candidates, key=lambda c: c["val_nse"])
    report["step2_candidates"] = {c["name"]: {"features": c["features"], "val_nse": c["val_nse"]}
                                  for c in candidates}
    best["model"].save(out / "checkpoint" / "tree-best.json")
    record(2, best["name"], len(best["features"]), "-", "-", "yes", best["val_ev"],
           evaluate_trees(best["model"], test_s, k, tau, excl))

    # steps 3-5
    hidden = tft_sec["hidden_size"]
    runs = {}
    for step, name, mode, upscaling in ((3, "GPP-TFT", "observed", "no"), (4, "No-GPP-TFT", "none", "yes"),
                                        (5, "Tree-FT", "estimated", "yes")):
        tr, va, te = train_s, val_s, test_s
        if mode == "estimated":
            tr, va, te = (with_tree_history(x, best["model"]) for x in (train_s, val_s, test_s))
        run = fit_tft(tr, va, catalog, tft_sec, mode, out / "checkpoint" / name)
        (out / "checkpoint" / name / "history.json").write_text(json.dumps(run.history.to_dict(), indent=2))
        runs[name] = (run, te)
        record(step, name, len(catalog.time_varying), k, hidden, upscaling,
               evaluate_tft(run, va, tft_sec["eval_stride"]), evaluate_tft(run, te, tft_sec["eval_stride"]))

    _write_comparison(rows, out)
    breakdown = [r for r in report["models"]["GPP-TFT"].get("test_by_igbp", [])]
    if breakdown:
        from .evalmetrics import MetricReport
        (out / "igbp_breakdown.txt").write_text(
            reports_table([MetricReport.from_dict(b) for b in breakdown], "IGBP"))

    # cross-validation of the baseline forest over the non-test folds
    if exp["cv"] and split.fold:
        n_folds = max(split.fold.values()) + 1
        cv_rows, ev_all, fold_lab = [], [], []
        non_test = [s for s in series if split.split[s.site_id] != "test"]
        for f in range(n_folds):
            tr = [s for s in non_test if split.fold[s.site_id] != f]
            va = [s for s in non_test if split.fold[s.site_id] == f]
            model = fit_trees(tr, base_cols, tcfg)
            ev = evaluate_trees(model, va, k, tau, excl)
            rep = _metrics(ev)
            cv_rows.append({"fold": f + 1, **({} if rep is None else rep.to_dict())})
            ev_all.append(ev)
            fold_lab.append(np.full(ev.y.size, f"fold{f + 1}", dtype=object))
        y = np.concatenate([e.y for e in ev_all])
        yh = np.concatenate([e.y_hat for e in ev_all])
        dist = loss_distribution(y, yh, np.concatenate(fold_lab), n_bins=exp["loss_bins"]) if y.size else []
        (out / "cv.json").write_text(json.dumps(
            {"folds": cv_rows, "loss_distribution": [d.to_dict() for d in dist]}, indent=2, sort_keys=True))

    # interpretation of the GPP-TFT on the test sites, one window per day
    run, te = runs["GPP-TFT"]
    _, captured = evaluate_tft(run, te, stride=24, capture=True)
    snaps = [s for wb, outp in captured for s in capture_interpretation(outp, wb)]
    if snaps:
        fig = out / "figures"
        write_snapshots_csv(snaps, fig / "snapshots.csv")
        ranked_tft = top_features(snaps, cut=None)
        write_importance_csv(ranked_tft[:15], fig / "top_features.csv")
        chosen = exp["snapshot_features"] or [n for n, _ in ranked_tft[:3]]
        # the snapshot whose origin hour has the largest observed target
        labels = np.concatenate([wb.label[:, 0] for wb, _ in captured])
        pick = int(np.argmax(labels))
        render_snapshot_svg(snaps[pick], chosen, fig / "snapshot.svg")
        groups = exp["attention_groups"] or sorted({group_of[s.site_id] for s in snaps})
        curves = attention_by_group(snaps, group_of, groups)
        render_group_attention_svg(curves, fig / "group_attention.svg")
        report["top_features"] = ranked_tft[:15]

    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True, default=float))
    manifest = {
        "config": cfg,
        "config_hash": config_hash(cfg),
        "seeds": {"synthetic": cfg["data"]["synthetic"]["seed"], "split": cfg["split"]["seed"],
                  "trees": tcfg["seed"], "tft": tft_sec["seed"]},
        "versions": {"fluxtft": __version__, "numpy": np.__version__, "python": platform.python_version()},
        "sites": {s.site_id: split.split[s.site_id] for s in series},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return {"rows": rows, "report": report}
