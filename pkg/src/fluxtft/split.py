"""Site-level stratified train/validation/test splits and CV folds."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import networkx as nx
import numpy as np

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")


@dataclass
class SplitAssignment:
    split: dict[str, str]
    group: dict[str, str]
    fold: dict[str, int] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    def sites(self, which: str) -> list[str]:
        return [s for s, v in self.split.items() if v == which]

    def counts(self) -> tuple[int, int, int]:
        return tuple(len(self.sites(s)) for s in SPLITS)

    def with_folds(self, folds: dict[str, int], validation_fold: int) -> "SplitAssignment":
        """Relabel non-test sites: the validation fold becomes ``val``, the
        other folds ``train``."""
        split = {s: ("test" if v == "test" else ("val" if folds[s] == validation_fold else "train"))
                 for s, v in self.split.items()}
        return SplitAssignment(split, dict(self.group), dict(folds), list(self.warnings))

    def save(self, path) -> None:
        """CSV ``site_id,split,fold`` with 1-based folds (0 = no fold)."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["site_id", "split", "fold"])
            for s in sorted(self.split):
                w.writerow([s, self.split[s], self.fold.get(s, -1) + 1])

    @classmethod
    def load(cls, path) -> "SplitAssignment":
        split, fold = {}, {}
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != ["site_id", "split", "fold"]:
                raise ValueError(f"{path}: header must be site_id,split,fold")
            for row in reader:
                if row["split"] not in SPLITS:
                    raise ValueError(f"{path}: unknown split {row['split']!r}")
                split[row["site_id"]] = row["split"]
                if int(row["fold"]) > 0:
                    fold[row["site_id"]] = int(row["fold"]) - 1
        return cls(split, {}, fold)


def largest_remainder(total: int, ratios: Sequence[float]) -> list[int]:
    """Apportion ``total`` seats by the largest-remainder rule (ties to the
    earlier bucket)."""
    quotas = [total * r for r in ratios]
    seats = [math.floor(q) for q in quotas]
    order = sorted(range(len(ratios)), key=lambda i: (-(quotas[i] - seats[i]), i))
    for i in order[: total - sum(seats)]:
        seats[i] += 1
    return seats


def _controlled_rounding(quota: np.ndarray, row_totals: np.ndarray, col_totals: np.ndarray) -> np.ndarray:
    """Round a (groups x splits) quota table to integers keeping row and
    column totals, each cell moving to floor or ceil of its quota.  Solved
    as a min-cost flow preferring cells with large fractional parts."""
    base = np.floor(quota + 1e-12).astype(int)
    frac = quota - base
    need_r = row_totals - base.sum(axis=1)
    need_c = col_totals - base.sum(axis=0)
    if need_r.sum() != need_c.sum() or (need_r < 0).any() or (need_c < 0).any():
        raise ValueError("inconsistent apportionment totals")
    G = nx.DiGraph()
    G.add_node("src", demand=-int(need_r.sum()))
    G.add_node("dst", demand=int(need_c.sum()))
    for g in range(quota.shape[0]):
        G.add_edge("src", ("g", g), capacity=int(need_r[g]), weight=0)
        for s in range(quota.shape[1]):
            if quota[g, s] <= 0:
                continue
            # one unit at a cost favouring large remainders; a second unit
            # (breaking the floor/ceil property) only if nothing else fits
            G.add_edge(("g", g), ("a", g, s), capacity=1, weight=int(round((1.0 - frac[g, s]) * 10**6)))
            G.add_edge(("a", g, s), ("s", s), capacity=1, weight=0)
            G.add_edge(("g", g), ("b", g, s), capacity=1, weight=10**9)
            G.add_edge(("b", g, s), ("s", s), capacity=1, weight=0)
    for s in range(quota.shape[1]):
        G.add_edge(("s", s), "dst", capacity=int(need_c[s]), weight=0)
    flow = nx.min_cost_flow(G)
    out = base.copy()
    for g in range(quota.shape[0]):
        for s in range(quota.shape[1]):
            if quota[g, s] > 0:
                out[g, s] += flow[("g", g)][("a", g, s)] + flow[("g", g)][("b", g, s)]
    return out


def stratified_split(sites: Sequence[tuple[str, str]], ratios=(0.605, 0.201, 0.194),
                     seed: int = 0) -> SplitAssignment:
    """Assign every site to train/val/test, stratified by group label.

    Overall split sizes follow largest-remainder apportionment of the site
    count; per-group counts are a controlled rounding of ``ratio * size`` so
    each stays within one site of its quota.  Groups smaller than the number
    of non-empty splits fill train, then val, then test.
    """
    ratios = np.asarray(ratios, dtype=np.float64)
    if ratios.shape != (3,) or (ratios < 0).any() or not math.isclose(ratios.sum(), 1.0, abs_tol=1e-9):
        raise ValueError("ratios must be three non-negative numbers summing to 1")
    ids = [s for s, _ in sites]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate site ids")
    groups: dict[str, list[str]] = {}
    for sid, g in sites:
        if g is None or g == "":
            raise ValueError(f"site {sid!r} has no group label")
        groups.setdefault(g, []).append(sid)
    names = sorted(groups)
    totals = np.array(largest_remainder(len(ids), ratios))
    nonzero = int((ratios > 0).sum())
    warnings = []

    counts = np.zeros((len(names), 3), dtype=int)
    regular = []
    for gi, g in enumerate(names):
        n = len(groups[g])
        if n < nonzero:
            msg = f"group {g!r} has {n} site(s) for {nonzero} splits; filled train, val, test in order"
            warnings.append(msg)
            log.warning(msg)
            fill = [i for i in range(3) if ratios[i] > 0]
            for i in fill[:n]:
                counts[gi, i] = 1
        else:
            regular.append(gi)
    if regular:
        rest = totals - counts.sum(axis=0)
        sizes = np.array([len(groups[names[gi]]) for gi in regular])
        try:
            counts[regular] = _controlled_rounding(np.outer(sizes, ratios), sizes, rest)
        except (ValueError, nx.NetworkXUnfeasible):
            # small groups pushed the totals out of reach; round per group
            for gi in regular:
                counts[gi] = largest_remainder(len(groups[names[gi]]), ratios)

    rng = np.random.default_rng(seed)
    split, group = {}, {}
    for gi, g in enumerate(names):
        members = sorted(groups[g])
        order = rng.permutation(len(members))
        labels = np.repeat(np.arange(3), counts[gi])
        for pos, idx in enumerate(order):
            split[members[idx]] = SPLITS[labels[pos]]
            group[members[idx]] = g
    return SplitAssignment(split, group, {}, warnings)


def cv_groups(assignment: SplitAssignment, n_folds: int = 4, seed: int = 0) -> list[dict[str, str]]:
    """Stratified folds over the non-test sites.

    Returns one mapping per fold, ``site -> "train" | "val"``, where fold
    ``f``'s own sites are its validation set.  Sites are dealt round-robin
    group by group (each group shuffled), so fold sizes and per-group fold
    counts differ by at most one.
    """
    if n_folds < 2:
        raise ValueError("n_folds must be >= 2")
    pool = sorted(s for s, v in assignment.split.items() if v != "test")
    if n_folds > len(pool):
        raise ValueError(f"{n_folds} folds requested for {len(pool)} non-test sites")
    by_group: dict[str, list[str]] = {}
    for s in pool:
        by_group.setdefault(assignment.group.get(s, ""), []).append(s)
    rng = np.random.default_rng(seed)
    dealt = []
    for g in sorted(by_group):
        members = by_group[g]
        dealt.extend(members[i] for i in rng.permutation(len(members)))
    fold_of = {s: i % n_folds for i, s in enumerate(dealt)}
    return [{s: ("val" if fold_of[s] == f else "train") for s in pool} for f in range(n_folds)]


def fold_index(folds: list[dict[str, str]]) -> dict[str, int]:
    out = {}
    for f, fa in enumerate(folds):
        for s, v in fa.items():
            if v == "val":
                out[s] = f
    return out
