"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error, 3 training divergence.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import load_config
from .dataset import DataError, format_timestamp, parse_timestamp
from .evalmetrics import breakdown_by_group, compute_metrics, reports_to_json
from .gapfill import ImputeConfig
from .split import SplitAssignment, cv_groups, fold_index, stratified_split
from .tft import TrainingDiverged, capture_interpretation, write_snapshots_csv

EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _csv_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _overrides(pairs) -> dict:
    """``section.key=value`` strings into a nested dict (values parsed as
    JSON when possible)."""
    out: dict = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise UsageError(f"--set expects section.key=value, got {pair!r}")
        path, raw = pair.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = out
        keys = path.split(".")
        for key in keys[:-1]:
            node = node.setdefault(key, {})
        node[keys[-1]] = value
    return out


def _config(args) -> dict:
    try:
        return load_config(getattr(args, "config", None), _overrides(getattr(args, "set", None)))
    except ValueError as exc:
        raise UsageError(str(exc)) from None


# -- subcommands ------------------------------------------------------------------

def cmd_synth(args) -> None:
    from .synth import write_synthetic
    groups = _csv_list(args.groups) if args.groups else None
    try:
        write_synthetic(args.out, args.sites, args.years, args.seed, missing_frac=args.missing_frac,
                        gap_frac=args.gap_frac, igbp_groups=groups)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_gapfill(args) -> None:
    from .pipeline import load_dataset, preprocess, save_dataset
    cfg = _config(args)
    series, catalog = load_dataset(args.input)
    if args.no_filter:
        from .gapfill import gapfill_series
        filled = [gapfill_series(s, ImputeConfig(k_neighbors=cfg["gapfill"]["k_neighbors"])) for s in series]
    else:
        filled = preprocess(series, cfg)
    save_dataset(filled, args.out, catalog)


def cmd_split(args) -> None:
    from .pipeline import load_dataset
    series, _ = load_dataset(args.input)
    try:
        ratios = tuple(float(r) for r in _csv_list(args.ratios))
    except ValueError:
        raise UsageError(f"bad --ratios {args.ratios!r}") from None
    sa = stratified_split([(s.site_id, s.static.igbp_generic) for s in series], ratios, args.seed)
    if args.folds >= 2:
        if not 1 <= args.validation_fold <= args.folds:
            raise UsageError("--validation-fold must lie in 1..--folds")
        sa = sa.with_folds(fold_index(cv_groups(sa, args.folds, args.seed)), args.validation_fold - 1)
    for w in sa.warnings:
        print(f"warning: {w}", file=sys.stderr)
    sa.save(args.out)


def _load_split_series(data_dir, split_path):
    from .pipeline import by_split, load_dataset
    series, catalog = load_dataset(data_dir)
    split = SplitAssignment.load(split_path)
    return series, catalog, split, {w: by_split(series, split, w) for w in ("train", "val", "test")}


def _tree_model(run_dir: Path):
    from .trees import ForestModel
    return ForestModel.load(run_dir / "checkpoint" / "forest.json")


def cmd_train(args) -> None:
    from .pipeline import default_tabular_columns, fit_tft, fit_trees, with_tree_history
    cfg = _config(args)
    out = Path(args.out)
    (out / "checkpoint").mkdir(parents=True, exist_ok=True)
    series, catalog, split, parts = _load_split_series(args.data, args.split)
    info = {"model": args.model, "mode": None, "data": str(Path(args.data).resolve()),
            "split": str(Path(args.split).resolve()), "tree_run": None, "config": cfg}
    if args.model in ("rfr", "xgb"):
        feats = _csv_list(args.features) if args.features else catalog.time_varying
        unknown = [f for f in feats if f not in catalog.time_varying]
        if unknown:
            raise UsageError(f"unknown features {unknown}")
        model = fit_trees(parts["train"], default_tabular_columns(feats), cfg["trees"], args.model == "xgb")
        model.save(out / "checkpoint" / "forest.json")
    else:
        mode = args.mode
        info["mode"] = mode
        train_s, val_s = parts["train"], parts["val"]
        if mode == "estimated":
            if not args.tree_run:
                raise UsageError("--mode estimated requires --tree-run")
            tree = _tree_model(Path(args.tree_run))
            train_s, val_s = with_tree_history(train_s, tree), with_tree_history(val_s, tree)
            info["tree_run"] = str(Path(args.tree_run).resolve())
        elif args.tree_run:
            raise UsageError("--tree-run only applies to --mode estimated")
        run = fit_tft(train_s, val_s, catalog, cfg["tft"], mode, out / "checkpoint")
        (out / "history.json").write_text(json.dumps(run.history.to_dict(), indent=2))
    (out / "run.json").write_text(json.dumps(info, indent=2, sort_keys=True))


def _run_info(run_dir: Path) -> dict:
    path = run_dir / "run.json"
    if not path.exists():
        raise DataError(f"{run_dir}: not a training run (run.json missing)")
    return json.loads(path.read_text())


def _evaluate_run(run_dir: Path, series, which_sites):
    """Evaluation object for a run on ``which_sites``."""
    from .pipeline import TftRun, evaluate_tft, evaluate_trees, with_tree_history
    info = _run_info(run_dir)
    tft = info["config"]["tft"]
    k, tau, excl = tft["encoder_length"], tft["decoder_length"], tft["exclude_gap_labels"]
    if info["model"] in ("rfr", "xgb"):
        return evaluate_trees(_tree_model(run_dir), which_sites, k, tau, excl), info
    run = TftRun.load(run_dir / "checkpoint")
    if info["mode"] == "estimated":
        which_sites = with_tree_history(which_sites, _tree_model(Path(info["tree_run"])))
    return evaluate_tft(run, which_sites, tft["eval_stride"]), info


def cmd_evaluate(args) -> None:
    run_dir = Path(args.run)
    series, catalog, split, parts = _load_split_series(args.data, args.split)
    ev, info = _evaluate_run(run_dir, series, parts[args.which])
    if ev.y.size == 0:
        raise DataError(f"no labelled {args.which} timestamps to evaluate")
    overall = compute_metrics(ev.y, ev.y_hat)
    if args.by_igbp:
        overall.group_breakdown = breakdown_by_group(ev.y, ev.y_hat, ev.group)[:-1]
    text = reports_to_json(overall, model=info["model"], mode=info["mode"], sites=args.which)
    Path(args.out).write_text(text + "\n")


def cmd_interpret(args) -> None:
    from .interpret import (attention_by_group, render_group_attention_svg, render_snapshot_svg, top_features,
                            write_importance_csv)
    from .pipeline import TftRun, evaluate_tft, load_dataset, with_tree_history
    run_dir = Path(args.run)
    info = _run_info(run_dir)
    if info["model"] != "tft":
        raise UsageError("interpret needs a TFT run")
    if bool(args.site) == bool(args.group):
        raise UsageError("give either --site/--origin or --group")
    series, _ = load_dataset(args.data or info["data"])
    run = TftRun.load(run_dir / "checkpoint")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def prepared(sites):
        if info["mode"] == "estimated":
            return with_tree_history(sites, _tree_model(Path(info["tree_run"])))
        return sites

    if args.site:
        if not args.origin:
            raise UsageError("--site requires --origin")
        site = [s for s in series if s.site_id == args.site]
        if not site:
            raise DataError(f"site {args.site!r} not in the data")
        origin = parse_timestamp(args.origin)
        _, captured = evaluate_tft(run, prepared(site), stride=1, capture=True)
        snaps = [s for wb, o in captured for s in capture_interpretation(o, wb)]
        match = [s for s in snaps if s.origin == origin]
        if not match:
            raise DataError(f"no window with origin {format_timestamp(origin)} at site {args.site}")
        snap = match[0]
        feats = _csv_list(args.features) if args.features else []
        unknown = [f for f in feats if f not in snap.features]
        if unknown:
            raise UsageError(f"unknown features {unknown}; choose from {list(snap.features)}")
        write_snapshots_csv([snap], out / "snapshot.csv")
        write_importance_csv(top_features(snap), out / "top_features.csv")
        render_snapshot_svg(snap, feats, out / "snapshot.svg")
    else:
        groups = _csv_list(args.group)
        chosen = [s for s in series if s.static.igbp_generic in groups or s.static.igbp in groups]
        group_of = {}
        for s in chosen:
            group_of[s.site_id] = s.static.igbp if s.static.igbp in groups else s.static.igbp_generic
        missing = sorted(set(groups) - set(group_of.values()))
        if missing:
            raise DataError(f"no sites for groups {missing}")
        _, captured = evaluate_tft(run, prepared(chosen), stride=args.stride, capture=True)
        snaps = [s for wb, o in captured for s in capture_interpretation(o, wb)]
        curves = attention_by_group(snaps, group_of, groups)
        write_snapshots_csv(snaps, out / "snapshots.csv")
        write_importance_csv(top_features(snaps), out / "top_features.csv")
        render_group_attention_svg(curves, out / "group_attention.svg")


def cmd_experiment(args) -> None:
    from .experiment import run_experiment
    cfg = _config(args)
    result = run_experiment(cfg, args.out)
    print((Path(args.out) / "comparison.txt").read_text(), end="")
    return result


# -- parser -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fluxtft", description="Carbon-flux upscaling experiments.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to standard error")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate synthetic flux sites")
    s.add_argument("--sites", type=int, required=True)
    s.add_argument("--years", type=float, default=1.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--missing-frac", type=float, default=0.0)
    s.add_argument("--gap-frac", type=float, default=0.0)
    s.add_argument("--groups", help="comma-separated IGBP groups to cycle through")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("gapfill", help="filter sites and fill missing values and records")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--config")
    s.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    s.add_argument("--no-filter", action="store_true", help="keep every site")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gapfill)

    s = sub.add_parser("split", help="stratified site split with CV folds")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--ratios", default="0.605,0.201,0.194")
    s.add_argument("--folds", type=int, default=4)
    s.add_argument("--validation-fold", type=int, default=4)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_split)

    s = sub.add_parser("train", help="fit a tree ensemble or a TFT")
    s.add_argument("--model", choices=("rfr", "xgb", "tft"), required=True)
    s.add_argument("--mode", choices=("observed", "none", "estimated"), default="observed")
    s.add_argument("--config")
    s.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    s.add_argument("--data", required=True)
    s.add_argument("--split", required=True)
    s.add_argument("--tree-run")
    s.add_argument("--features", help="comma-separated features for tree models")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", help="score a run on held-out sites")
    s.add_argument("--run", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", required=True)
    s.add_argument("--which", choices=("train", "val", "test"), default="test")
    s.add_argument("--by-igbp", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("interpret", help="attention and variable-importance figures")
    s.add_argument("--run", required=True)
    s.add_argument("--data")
    s.add_argument("--site")
    s.add_argument("--origin")
    s.add_argument("--features")
    s.add_argument("--group")
    s.add_argument("--stride", type=int, default=24, help="window stride for group curves")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_interpret)

    s = sub.add_parser("experiment", help="run the five-step comparison")
    s.add_argument("--config")
    s.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_experiment)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(name)s: %(message)s", stream=sys.stderr)
    try:
        args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"fluxtft: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as exc:
        print(f"fluxtft: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DataError, FileNotFoundError, KeyError, ValueError) as exc:
        print(f"fluxtft: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return 0


if __name__ == "__main__":
    sys.exit(main())
