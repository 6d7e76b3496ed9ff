"""RMSE, MAE and Nash-Sutcliffe efficiency with group breakdowns."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

QUANTILE_LEVELS = (5, 25, 50, 75, 95)


@dataclass
class MetricReport:
    rmse: float
    mae: float
    nse: float | None       # None when the observations have zero variance
    n: int
    label: str = "overall"
    group_breakdown: list["MetricReport"] | None = None

    @property
    def nse_defined(self) -> bool:
        return self.nse is not None

    def to_dict(self) -> dict:
        d = {"label": self.label, "rmse": self.rmse, "mae": self.mae, "nse": self.nse, "n": self.n}
        if self.group_breakdown is not None:
            d["group_breakdown"] = [g.to_dict() for g in self.group_breakdown]
        return d

    @classmethod
    def from_dict(cls, d) -> "MetricReport":
        groups = d.get("group_breakdown")
        return cls(d["rmse"], d["mae"], d["nse"], d["n"], d.get("label", "overall"),
                   None if groups is None else [cls.from_dict(g) for g in groups])


def _pair(y, y_hat):
    y = np.asarray(y, dtype=np.float64).ravel()
    y_hat = np.asarray(y_hat, dtype=np.float64).ravel()
    if y.shape != y_hat.shape:
        raise ValueError(f"length mismatch: {y.size} observations, {y_hat.size} predictions")
    if y.size == 0:
        raise ValueError("metrics need at least one sample")
    if not (np.all(np.isfinite(y)) and np.all(np.isfinite(y_hat))):
        raise ValueError("metrics need finite values")
    return y, y_hat


def compute_metrics(y, y_hat, label: str = "overall") -> MetricReport:
    """rmse = sqrt(mean(r^2)), mae = mean|r|, nse = 1 - SSE / SST with
    r = y - y_hat.  NSE is reported as None when SST is zero."""
    y, y_hat = _pair(y, y_hat)
    r = y - y_hat
    sse = float(np.sum(r * r))
    sst = float(np.sum((y - y.mean()) ** 2))
    nse = 1.0 - sse / sst if sst > 0 else None
    return MetricReport(math.sqrt(sse / y.size), float(np.mean(np.abs(r))), nse, int(y.size), label)


def _nse_key(rep: MetricReport):
    return (-(rep.nse if rep.nse is not None else -math.inf), rep.label)


def breakdown_by_group(y, y_hat, groups) -> list[MetricReport]:
    """One report per group ordered by descending NSE (undefined last, ties
    by label), followed by the pooled ``overall`` row."""
    y, y_hat = _pair(y, y_hat)
    groups = np.asarray(groups, dtype=object).ravel()
    if groups.shape != y.shape:
        raise ValueError("one group label per sample required")
    rows = [compute_metrics(y[groups == g], y_hat[groups == g], str(g)) for g in sorted(set(groups.tolist()))]
    rows.sort(key=_nse_key)
    return rows + [compute_metrics(y, y_hat, "overall")]


@dataclass
class LossSummary:
    group: str
    n: int
    quantiles: dict[int, float]
    bin_edges: list[float]
    counts: list[int]

    def to_dict(self) -> dict:
        return {"group": self.group, "n": self.n,
                "quantiles": {str(k): v for k, v in self.quantiles.items()},
                "bin_edges": self.bin_edges, "counts": self.counts}


def loss_distribution(y, y_hat, by, n_bins: int = 20, bin_width: float | None = None) -> list[LossSummary]:
    """Absolute-residual summaries per group: the 5/25/50/75/95 percentiles
    (linear interpolation between order statistics) and counts over
    fixed-width bins shared by every group."""
    y, y_hat = _pair(y, y_hat)
    by = np.asarray(by, dtype=object).ravel()
    if by.shape != y.shape:
        raise ValueError("one group label per sample required")
    res = np.abs(y - y_hat)
    if bin_width is None:
        top = float(res.max())
        bin_width = top / n_bins if top > 0 else 1.0
    edges = (np.arange(n_bins + 1) * bin_width).tolist()
    out = []
    for g in sorted(set(by.tolist()), key=str):
        r = res[by == g]
        qs = np.percentile(r, QUANTILE_LEVELS)
        idx = np.minimum((r / bin_width).astype(np.int64), n_bins - 1)
        counts = np.bincount(idx, minlength=n_bins)
        out.append(LossSummary(str(g), int(r.size), {lv: float(v) for lv, v in zip(QUANTILE_LEVELS, qs)},
                               edges, counts.tolist()))
    return out


# -- emission -----------------------------------------------------------------

def reports_to_json(reports: Sequence[MetricReport] | MetricReport, **extra) -> str:
    if isinstance(reports, MetricReport):
        payload = reports.to_dict()
    else:
        payload = [r.to_dict() for r in reports]
    if extra:
        payload = {"reports": payload, **extra}
    return json.dumps(payload, indent=2, sort_keys=True)


def _cell(v) -> str:
    if v is None:
        return "undefined"
    if isinstance(v, float):
        return f"{v:.3f}"
    return str(v)


def format_table(rows: Sequence[dict], columns: Sequence[str]) -> str:
    """Aligned plain-text table; the first column is left-aligned, the
    rest right-aligned."""
    cells = [[_cell(r.get(c)) for c in columns] for r in rows]
    widths = [max([len(c)] + [len(row[i]) for row in cells]) for i, c in enumerate(columns)]

    def line(vals):
        return "  ".join(v.ljust(w) if i == 0 else v.rjust(w) for i, (v, w) in enumerate(zip(vals, widths)))

    sep = "  ".join("-" * w for w in widths)
    return "\n".join([line(columns), sep] + [line(r) for r in cells]) + "\n"


def reports_table(reports: Sequence[MetricReport], first: str = "group") -> str:
    rows = [{first: r.label, "RMSE": r.rmse, "MAE": r.mae, "NSE": r.nse, "n": r.n} for r in reports]
    return format_table(rows, [first, "RMSE", "MAE", "NSE", "n"])
