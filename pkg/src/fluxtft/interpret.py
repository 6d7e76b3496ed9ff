"""Aggregation and SVG rendering of attention and variable-selection weights."""
from __future__ import annotations

import csv
from pathlib import Path
from typing import Mapping, Sequence
from xml.sax.saxutils import escape, quoteattr

import numpy as np

from .tft.training import InterpretationSnapshot

PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
           "#bcbd22", "#17becf")

WIDTH, HEIGHT = 720, 420
MARGIN = dict(left=70, right=170, top=30, bottom=55)


def _as_list(snapshots) -> list[InterpretationSnapshot]:
    if isinstance(snapshots, InterpretationSnapshot):
        return [snapshots]
    return list(snapshots)


def attention_by_group(snapshots: Sequence[InterpretationSnapshot], site_groups: Mapping[str, str],
                       groups: Sequence[str] | None = None) -> dict[str, np.ndarray]:
    """Mean encoder attention curve per group (index -k..-1).

    ``groups`` defaults to every group with at least one snapshot; asking
    for a group without snapshots is an error.
    """
    snaps = _as_list(snapshots)
    members: dict[str, list[np.ndarray]] = {}
    for s in snaps:
        g = site_groups.get(s.site_id)
        if g is not None:
            members.setdefault(g, []).append(s.attention)
    wanted = sorted(members) if groups is None else list(groups)
    curves = {}
    for g in wanted:
        if g not in members:
            raise KeyError(f"no snapshots for group {g!r}")
        stack = np.stack(members[g])
        if len({a.shape for a in members[g]}) != 1:
            raise ValueError(f"group {g!r}: snapshots have different encoder lengths")
        # sort rows so the mean does not depend on snapshot order
        curves[g] = np.sort(stack, axis=0).mean(axis=0)
    return curves


def top_features(snapshots, cut: int | None = 15) -> list[tuple[str, float]]:
    """Features ranked by mean selection weight over encoder indices (and
    snapshots), in percent.  Ties rank alphabetically."""
    snaps = _as_list(snapshots)
    if not snaps:
        raise ValueError("top_features needs at least one snapshot")
    feats = snaps[0].features
    if any(s.features != feats for s in snaps):
        raise ValueError("snapshots carry different feature sets")
    rows = np.concatenate([s.importance for s in snaps], axis=0)
    pct = 100.0 * np.sort(rows, axis=0).mean(axis=0)
    ranked = sorted(zip(feats, pct.tolist()), key=lambda kv: (-kv[1], kv[0]))
    return ranked if cut is None else ranked[:cut]


def write_importance_csv(ranked: Sequence[tuple[str, float]], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rank", "feature", "importance_pct"])
        for i, (name, pct) in enumerate(ranked, start=1):
            w.writerow([i, name, f"{pct:.6f}"])


# -- SVG ------------------------------------------------------------------------

def _f(v: float) -> str:
    return f"{v:.2f}"


class _Axes:
    def __init__(self, x0, x1, y0, y1):
        self.x0, self.x1, self.y0, self.y1 = float(x0), float(x1), float(y0), float(y1)
        self.left = MARGIN["left"]
        self.right = WIDTH - MARGIN["right"]
        self.top = MARGIN["top"]
        self.bottom = HEIGHT - MARGIN["bottom"]

    def x(self, v):
        span = self.x1 - self.x0 or 1.0
        return self.left + (v - self.x0) / span * (self.right - self.left)

    def y(self, v, lo=None, hi=None):
        lo = self.y0 if lo is None else lo
        hi = self.y1 if hi is None else hi
        span = hi - lo or 1.0
        return self.bottom - (v - lo) / span * (self.bottom - self.top)


def _nice_range(values: np.ndarray, floor_zero: bool = True) -> tuple[float, float]:
    lo = float(values.min()) if values.size else 0.0
    hi = float(values.max()) if values.size else 1.0
    if floor_zero:
        lo = min(lo, 0.0)
    if hi <= lo:
        hi = lo + 1.0
    pad = 0.05 * (hi - lo)
    return (lo if floor_zero and lo == 0.0 else lo - pad), hi + pad


def _frame(ax: _Axes, xlabel: str, ylabel: str, title: str, k: int) -> list[str]:
    out = [
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2:.0f}" y="18" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<line class="axis" x1="{ax.left}" y1="{ax.bottom}" x2="{ax.right}" y2="{ax.bottom}" stroke="black"/>',
        f'<line class="axis" x1="{ax.left}" y1="{ax.top}" x2="{ax.left}" y2="{ax.bottom}" stroke="black"/>',
        f'<text class="xlabel" x="{(ax.left + ax.right) / 2:.0f}" y="{HEIGHT - 12}" text-anchor="middle" '
        f'font-size="12">{escape(xlabel)}</text>',
        f'<text class="ylabel" x="16" y="{(ax.top + ax.bottom) / 2:.0f}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 16 {(ax.top + ax.bottom) / 2:.0f})">{escape(ylabel)}</text>',
    ]
    for t in np.unique(np.linspace(-k, -1, min(k, 7)).round().astype(int)):
        out.append(f'<text class="tick" x="{_f(ax.x(t))}" y="{ax.bottom + 16}" text-anchor="middle" '
                   f'font-size="10">{t}</text>')
    for t in np.linspace(ax.y0, ax.y1, 5):
        out.append(f'<text class="tick" x="{ax.left - 6}" y="{_f(ax.y(t) + 3)}" text-anchor="end" '
                   f'font-size="10">{t:.3g}</text>')
    return out


def _legend(items: Sequence[tuple[str, str, str]]) -> list[str]:
    """``items`` are (label, colour, kind) with kind 'area' or 'line'."""
    x = WIDTH - MARGIN["right"] + 62
    out = ['<g class="legend">']
    for i, (label, colour, kind) in enumerate(items):
        y = MARGIN["top"] + 16 * i
        if kind == "area":
            out.append(f'<rect x="{x}" y="{y}" width="12" height="10" fill="{colour}"/>')
        else:
            out.append(f'<line x1="{x}" y1="{y + 5}" x2="{x + 12}" y2="{y + 5}" stroke="{colour}" '
                       f'stroke-width="2"/>')
        out.append(f'<text x="{x + 16}" y="{y + 9}" font-size="10">{escape(label)}</text>')
    out.append("</g>")
    return out


def _write(path, body: list[str]) -> Path:
    path = Path(path)
    head = (f'<?xml version="1.0" encoding="UTF-8"?>\n<svg xmlns="http://www.w3.org/2000/svg" '
            f'width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">')
    text = "\n".join([head, *body, "</svg>"]) + "\n"
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    return path


def render_snapshot_svg(snapshot: InterpretationSnapshot, selected: Sequence[str], path) -> Path:
    """Stacked areas of the selected features' selection weights over the
    encoder index, with the attention curve on a secondary axis."""
    missing = [f for f in selected if f not in snapshot.features]
    if missing:
        raise KeyError(f"features not in snapshot: {missing}")
    k = snapshot.encoder_length
    rel = snapshot.relative_index.astype(np.float64)
    cols = [snapshot.features.index(f) for f in selected]
    stack = np.cumsum(snapshot.importance[:, cols], axis=1) if cols else np.zeros((k, 0))
    top = float(stack[:, -1].max()) if cols else 1.0
    ax = _Axes(rel[0], rel[-1], 0.0, max(top, 1e-12) * 1.05)
    a_lo, a_hi = _nice_range(snapshot.attention)
    title = f"{snapshot.site_id} {np.datetime_as_string(snapshot.origin, unit='h')}"
    body = _frame(ax, "hours before prediction", "importance", title, k)
    body.append(f'<text class="ylabel2" x="{WIDTH - MARGIN["right"] + 40}" y="{(ax.top + ax.bottom) / 2:.0f}" '
                f'text-anchor="middle" font-size="12" transform="rotate(90 {WIDTH - MARGIN["right"] + 40} '
                f'{(ax.top + ax.bottom) / 2:.0f})">attention</text>')
    body.append(f'<line class="axis" x1="{ax.right}" y1="{ax.top}" x2="{ax.right}" y2="{ax.bottom}" stroke="black"/>')
    body.append('<g class="areas">')
    lower = np.zeros(k)
    legend = []
    for j, name in enumerate(selected):
        upper = stack[:, j]
        colour = PALETTE[j % len(PALETTE)]
        fwd = " ".join(f"L{_f(ax.x(x))},{_f(ax.y(v))}" for x, v in zip(rel, upper))
        back = " ".join(f"L{_f(ax.x(x))},{_f(ax.y(v))}" for x, v in zip(rel[::-1], lower[::-1]))
        d = "M" + fwd[1:] + " " + back + " Z"
        body.append(f'<path class="area" data-feature={quoteattr(name)} d="{d}" fill="{colour}" '
                    f'fill-opacity="0.7" stroke="none"/>')
        legend.append((name, colour, "area"))
        lower = upper
    body.append("</g>")
    pts = " ".join(f"{_f(ax.x(x))},{_f(ax.y(v, a_lo, a_hi))}" for x, v in zip(rel, snapshot.attention))
    body.append(f'<polyline class="attention" points="{pts}" fill="none" stroke="black" stroke-width="1.5"/>')
    legend.append(("attention", "black", "line"))
    body += _legend(legend)
    return _write(path, body)


def render_group_attention_svg(curves: Mapping[str, np.ndarray], path) -> Path:
    """One attention polyline per group over the encoder index."""
    if not curves:
        raise ValueError("no curves to render")
    names = list(curves)
    k = len(curves[names[0]])
    if any(len(curves[n]) != k for n in names):
        raise ValueError("curves have different lengths")
    rel = np.arange(-k, 0, dtype=np.float64)
    values = np.concatenate([np.asarray(curves[n], dtype=np.float64) for n in names])
    lo, hi = _nice_range(values)
    ax = _Axes(rel[0], rel[-1], lo, hi)
    body = _frame(ax, "hours before prediction", "attention", "attention by group", k)
    body.append(f'<g class="plot" data-ymin="{lo!r}" data-ymax="{hi!r}">')
    legend = []
    for j, name in enumerate(names):
        colour = PALETTE[j % len(PALETTE)]
        pts = " ".join(f"{_f(ax.x(x))},{_f(ax.y(v))}" for x, v in zip(rel, curves[name]))
        body.append(f'<polyline class="group-attention" data-group={quoteattr(str(name))} points="{pts}" '
                    f'fill="none" stroke="{colour}" stroke-width="1.5"/>')
        legend.append((str(name), colour, "line"))
    body.append("</g>")
    body += _legend(legend)
    return _write(path, body)
