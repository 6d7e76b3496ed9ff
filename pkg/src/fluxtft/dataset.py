"""Data model, long-format CSV ingestion, site filtering, windowing and
normalisation.

Two CSV files describe a dataset:

``sites.csv``
    ``site_id,igbp,koppen,koppen_sub,lat,lon`` -- one row per site.
``records.csv``
    ``site_id,timestamp,feature,value`` -- long format, ISO-8601 UTC
    timestamps.  ``feature`` is the target name, a catalog feature, or one
    of the reserved bookkeeping columns (``gap_flag``, ``target_imputed``,
    ``GPP_estimated``).  An empty ``value`` is a missing cell.
"""
from __future__ import annotations

import csv
import enum
import json
import logging
import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

log = logging.getLogger(__name__)

TARGET = "GPP"
GAP_FLAG = "gap_flag"
TARGET_IMPUTED = "target_imputed"
ESTIMATED_HISTORY = "GPP_estimated"
HISTORY_CHANNEL = "GPP_history"
TIME_FEATURES = ("hour_of_day", "day_of_year", "month", "relative_time_index", "global_time_index")

CADENCE_HOURS = {
    "hourly": 1,
    "daily": 24,
    "4day": 96,
    "8day": 192,
    "16day": 384,
    "monthly": 744,
    "annual": 8784,
}
ROLES = ("observed", "known", "static")
KINDS = ("real", "categorical")

# generic IGBP groups used for stratification
IGBP_MERGE = {"OSH": "SHR", "CSH": "SHR", "WSA": "SAV", "SAV": "SAV"}
STATIC_FIELDS = {
    "igbp": "categorical",
    "igbp_generic": "categorical",
    "koppen": "categorical",
    "koppen_sub": "categorical",
    "latitude": "real",
    "longitude": "real",
}

META_HEADER = ["site_id", "igbp", "koppen", "koppen_sub", "lat", "lon"]
RECORD_HEADER = ["site_id", "timestamp", "feature", "value"]


class DataError(ValueError):
    """Malformed or inconsistent input data."""


def generic_igbp(igbp: str) -> str:
    return IGBP_MERGE.get(igbp, igbp)


@dataclass(frozen=True)
class StaticCovariates:
    igbp: str
    koppen: str
    koppen_sub: str
    latitude: float
    longitude: float

    def __post_init__(self):
        if not -90.0 <= self.latitude <= 90.0:
            raise DataError(f"latitude {self.latitude} outside [-90, 90]")
        if not -180.0 <= self.longitude <= 180.0:
            raise DataError(f"longitude {self.longitude} outside [-180, 180]")

    @property
    def igbp_generic(self) -> str:
        return generic_igbp(self.igbp)

    def value(self, name: str):
        if name not in STATIC_FIELDS:
            raise KeyError(f"unknown static field {name!r}")
        return getattr(self, name)


@dataclass(frozen=True)
class FeatureEntry:
    name: str
    role: str
    kind: str = "real"
    cadence: str = "hourly"


@dataclass(frozen=True)
class FeatureCatalog:
    entries: tuple[FeatureEntry, ...]
    target: str = TARGET

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        names = [e.name for e in self.entries]
        if len(set(names)) != len(names):
            raise DataError("feature names in catalog must be unique")
        reserved = {self.target, GAP_FLAG, TARGET_IMPUTED, ESTIMATED_HISTORY, HISTORY_CHANNEL,
                    *TIME_FEATURES}
        for e in self.entries:
            if e.role not in ROLES:
                raise DataError(f"feature {e.name!r}: unknown role {e.role!r}")
            if e.kind not in KINDS:
                raise DataError(f"feature {e.name!r}: unknown kind {e.kind!r}")
            if e.name in reserved:
                raise DataError(f"feature name {e.name!r} is reserved")
            if e.role == "static":
                if e.name not in STATIC_FIELDS:
                    raise DataError(f"static feature {e.name!r} must be one of {sorted(STATIC_FIELDS)}")
                if e.kind != STATIC_FIELDS[e.name]:
                    raise DataError(f"static feature {e.name!r} must be {STATIC_FIELDS[e.name]}")
            else:
                if e.cadence not in CADENCE_HOURS:
                    raise DataError(f"feature {e.name!r}: unknown cadence {e.cadence!r}")
                if e.kind != "real":
                    raise DataError(f"time-varying feature {e.name!r} must be real-valued")

    def by_role(self, role: str) -> list[str]:
        return [e.name for e in self.entries if e.role == role]

    @property
    def time_varying(self) -> list[str]:
        return [e.name for e in self.entries if e.role != "static"]

    def entry(self, name: str) -> FeatureEntry:
        for e in self.entries:
            if e.name == name:
                return e
        raise KeyError(name)

    def restrict(self, keep: Iterable[str]) -> "FeatureCatalog":
        """Catalog limited to ``keep`` time-varying features (statics kept)."""
        keep = set(keep)
        return FeatureCatalog(
            tuple(e for e in self.entries if e.role == "static" or e.name in keep), self.target)

    def to_dict(self) -> dict:
        return {"target": self.target,
                "entries": [{"name": e.name, "role": e.role, "kind": e.kind, "cadence": e.cadence}
                            for e in self.entries]}

    @classmethod
    def from_dict(cls, d: Mapping) -> "FeatureCatalog":
        return cls(tuple(FeatureEntry(**e) for e in d["entries"]), d.get("target", TARGET))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> "FeatureCatalog":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class SiteSeries:
    """One flux-tower site on an hourly grid.

    Arrays are read-only; derive modified copies with :meth:`evolve`.
    ``target_imputed`` marks timestamps whose target was filled in an
    otherwise observed record; ``gap_flag`` marks synthesised records.
    """

    site_id: str
    timestamps: np.ndarray
    target: np.ndarray
    features: Mapping[str, np.ndarray]
    gap_flag: np.ndarray
    static: StaticCovariates
    target_imputed: np.ndarray = None

    def __post_init__(self):
        n = len(self.timestamps)
        object.__setattr__(self, "timestamps", _frozen(np.asarray(self.timestamps, dtype="datetime64[h]")))
        object.__setattr__(self, "target", _frozen(np.asarray(self.target, dtype=np.float64)))
        object.__setattr__(self, "gap_flag", _frozen(np.asarray(self.gap_flag, dtype=np.int8)))
        ti = np.zeros(n, dtype=bool) if self.target_imputed is None else self.target_imputed
        object.__setattr__(self, "target_imputed", _frozen(np.asarray(ti, dtype=bool)))
        object.__setattr__(self, "features", {k: _frozen(np.asarray(v, dtype=np.float64))
                                              for k, v in self.features.items()})
        for name, arr in [("target", self.target), ("gap_flag", self.gap_flag),
                          ("target_imputed", self.target_imputed), *self.features.items()]:
            if len(arr) != n:
                raise DataError(f"site {self.site_id}: column {name} has length {len(arr)}, expected {n}")
        if n > 1 and np.any(np.diff(self.timestamps.astype(np.int64)) <= 0):
            raise DataError(f"site {self.site_id}: timestamps not strictly increasing")
        if not np.isin(self.gap_flag, (0, 1)).all():
            raise DataError(f"site {self.site_id}: gap_flag must be 0/1")

    def __len__(self) -> int:
        return len(self.timestamps)

    def evolve(self, **changes) -> "SiteSeries":
        return replace(self, **changes)

    @property
    def hours(self) -> np.ndarray:
        """Integer hours since the Unix epoch."""
        return self.timestamps.astype(np.int64)

    def is_contiguous(self) -> bool:
        return len(self) < 2 or bool(np.all(np.diff(self.hours) == 1))

    def feature_matrix(self, names: Sequence[str]) -> np.ndarray:
        if not names:
            return np.empty((len(self), 0))
        return np.column_stack([self.features[n] for n in names])

    def equals(self, other: "SiteSeries") -> bool:
        def same(a, b):
            return a.shape == b.shape and np.array_equal(a, b, equal_nan=a.dtype.kind == "f")

        return (self.site_id == other.site_id and self.static == other.static
                and same(self.timestamps, other.timestamps) and same(self.target, other.target)
                and same(self.gap_flag, other.gap_flag)
                and same(self.target_imputed, other.target_imputed)
                and list(self.features) == list(other.features)
                and all(same(self.features[k], other.features[k]) for k in self.features))


def attach_history(series: SiteSeries, estimates) -> SiteSeries:
    """Attach a per-timestamp estimated-target column used by
    ``TargetHistoryMode.ESTIMATED``."""
    estimates = np.asarray(estimates, dtype=np.float64)
    if estimates.shape != (len(series),):
        raise DataError(f"site {series.site_id}: estimate column has shape {estimates.shape}")
    feats = dict(series.features)
    feats[ESTIMATED_HISTORY] = estimates
    return series.evolve(features=feats)


# -- CSV ingestion ------------------------------------------------------------

_TS = re.compile(r"^(\d{4}-\d{2}-\d{2})(?:[T ](\d{2})(?::(\d{2})(?::(\d{2})(?:\.\d+)?)?)?)?(Z|[+-]00:?00)?$")


def parse_timestamp(text: str) -> np.datetime64:
    """Parse an ISO-8601 UTC instant lying on the hour."""
    m = _TS.match(text.strip())
    if not m:
        raise ValueError(f"unparseable timestamp {text!r}")
    date, hh, mm, ss, _ = m.groups()
    if (mm and int(mm)) or (ss and int(ss)):
        raise ValueError(f"timestamp {text!r} is not on the hour")
    hour = int(hh or 0)
    if hour > 23:
        raise ValueError(f"invalid hour in {text!r}")
    try:
        day = np.datetime64(date, "D")
    except ValueError:
        raise ValueError(f"invalid date in {text!r}") from None
    if str(day) != date:
        raise ValueError(f"invalid date in {text!r}")
    return day.astype("datetime64[h]") + np.timedelta64(hour, "h")


def format_timestamp(ts: np.datetime64) -> str:
    return str(np.datetime64(ts, "h")) + ":00:00Z"


def _read_meta(path) -> dict[str, StaticCovariates]:
    out: dict[str, StaticCovariates] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != META_HEADER:
            raise DataError(f"{path}: header must be {','.join(META_HEADER)}")
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(META_HEADER):
                raise DataError(f"{path}:{line}: expected {len(META_HEADER)} fields, got {len(row)}")
            sid = row[0].strip()
            if sid in out:
                raise DataError(f"{path}:{line}: duplicate site {sid!r}")
            try:
                out[sid] = StaticCovariates(row[1].strip(), row[2].strip(), row[3].strip(),
                                            float(row[4]), float(row[5]))
            except (ValueError, DataError) as exc:
                raise DataError(f"{path}:{line}: {exc}") from None
    return out


def _fill_coarse(grid: np.ndarray, rec_hours: np.ndarray, rec_vals: np.ndarray, span: int) -> np.ndarray:
    """Forward-fill coarse records onto ``grid`` (hours); a record covers
    ``[t, t + span)``."""
    out = np.full(grid.shape, np.nan)
    if rec_hours.size == 0:
        return out
    order = np.argsort(rec_hours, kind="stable")
    rh, rv = rec_hours[order], rec_vals[order]
    pos = np.searchsorted(rh, grid, side="right") - 1
    ok = pos >= 0
    src = np.where(ok, pos, 0)
    ok &= grid - rh[src] < span
    out[ok] = rv[src[ok]]
    return out


def ingest_csv(sites_meta_path, records_path, catalog: FeatureCatalog) -> list[SiteSeries]:
    """Read a sites/records CSV pair into one :class:`SiteSeries` per site.

    The hourly grid of a site is the set of hours carrying any hourly-cadence
    record.  Coarser features are forward-filled over their cadence block.
    """
    meta = _read_meta(sites_meta_path)
    cadence = {e.name: CADENCE_HOURS[e.cadence] for e in catalog.entries if e.role != "static"}
    cadence[catalog.target] = 1
    cadence[GAP_FLAG] = 1
    cadence[TARGET_IMPUTED] = 1
    cadence[ESTIMATED_HISTORY] = 1

    raw: dict[str, dict[str, dict[int, float]]] = {}
    with open(records_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return []
        if [h.strip() for h in header] != RECORD_HEADER:
            raise DataError(f"{records_path}:1: header must be {','.join(RECORD_HEADER)}")
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise DataError(f"{records_path}:{line}: expected 4 fields, got {len(row)}")
            sid, ts, feat, val = (c.strip() for c in row)
            if sid not in meta:
                raise DataError(f"{records_path}:{line}: site {sid!r} missing from site metadata")
            if feat not in cadence:
                raise DataError(f"{records_path}:{line}: unknown feature {feat!r}")
            try:
                hour = int(parse_timestamp(ts).astype(np.int64))
                value = float(val) if val else math.nan
            except ValueError as exc:
                raise DataError(f"{records_path}:{line}: {exc}") from None
            cells = raw.setdefault(sid, {}).setdefault(feat, {})
            if hour in cells:
                raise DataError(f"{records_path}:{line}: duplicate record ({sid}, {ts}, {feat})")
            cells[hour] = value

    out = []
    for sid in meta:
        if sid not in raw:
            continue
        cols = raw[sid]
        hourly = {h for f, cells in cols.items() if cadence[f] == 1 for h in cells}
        if not hourly:
            continue
        grid = np.array(sorted(hourly), dtype=np.int64)

        def hourly_column(name, fill=math.nan):
            cells = cols.get(name, {})
            return np.array([cells.get(int(h), fill) for h in grid], dtype=np.float64)

        feats = {}
        for name in catalog.time_varying + ([ESTIMATED_HISTORY] if ESTIMATED_HISTORY in cols else []):
            if cadence[name] == 1:
                feats[name] = hourly_column(name)
            else:
                cells = cols.get(name, {})
                feats[name] = _fill_coarse(grid, np.fromiter(cells.keys(), np.int64, len(cells)),
                                           np.fromiter(cells.values(), np.float64, len(cells)),
                                           cadence[name])
        out.append(SiteSeries(
            site_id=sid,
            timestamps=grid.astype("datetime64[h]"),
            target=hourly_column(catalog.target),
            features=feats,
            gap_flag=hourly_column(GAP_FLAG, 0.0).astype(np.int8),
            static=meta[sid],
            target_imputed=hourly_column(TARGET_IMPUTED, 0.0).astype(bool),
        ))
    return out


def _fmt(v: float) -> str:
    return "" if math.isnan(v) else repr(float(v))


def write_csv(series: Sequence[SiteSeries], directory, catalog: FeatureCatalog) -> tuple[Path, Path]:
    """Write ``sites.csv`` and ``records.csv``; every feature is emitted on
    every grid hour so :func:`ingest_csv` reproduces the series exactly."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta_path, rec_path = directory / "sites.csv", directory / "records.csv"
    with open(meta_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(META_HEADER)
        for s in series:
            st = s.static
            w.writerow([s.site_id, st.igbp, st.koppen, st.koppen_sub, repr(st.latitude), repr(st.longitude)])
    with open(rec_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RECORD_HEADER)
        for s in series:
            stamps = [format_timestamp(t) for t in s.timestamps]
            cols = [(catalog.target, s.target)]
            cols += [(n, s.features[n]) for n in s.features]
            if s.gap_flag.any():
                cols.append((GAP_FLAG, s.gap_flag))
            if s.target_imputed.any():
                cols.append((TARGET_IMPUTED, s.target_imputed.astype(np.float64)))
            for name, values in cols:
                for ts, v in zip(stamps, values):
                    w.writerow([s.site_id, ts, name, _fmt(v)])
    return meta_path, rec_path


def filter_sites(series: Iterable[SiteSeries], min_span_hours: int = 8760,
                 max_missing_frac: float = 0.20) -> list[SiteSeries]:
    """Keep sites spanning at least ``min_span_hours`` whose fraction of
    hourly slots without an observed target is at most ``max_missing_frac``."""
    if not 0.0 <= max_missing_frac <= 1.0:
        raise ValueError("max_missing_frac must lie in [0, 1]")
    kept = []
    for s in series:
        if len(s) == 0:
            continue
        span = int(s.hours[-1] - s.hours[0]) + 1
        observed = int(np.sum(np.isfinite(s.target) & (s.gap_flag == 0) & ~s.target_imputed))
        missing = 1.0 - observed / span
        if span >= min_span_hours and missing <= max_missing_frac:
            kept.append(s)
        else:
            log.info("dropping site %s: span %d h, missing %.3f", s.site_id, span, missing)
    return kept


# -- windows ------------------------------------------------------------------

class TargetHistoryMode(str, enum.Enum):
    OBSERVED = "observed"
    NONE = "none"
    ESTIMATED = "estimated"


@dataclass(frozen=True)
class WindowSpec:
    encoder_length: int
    decoder_length: int = 1
    max_horizon: int = 1

    def __post_init__(self):
        if min(self.encoder_length, self.decoder_length, self.max_horizon) < 1:
            raise ValueError("window lengths must be positive")


def time_features(hours: np.ndarray) -> dict[str, np.ndarray]:
    """Calendar features for integer hours since the epoch (UTC)."""
    ts = hours.astype("datetime64[h]")
    days = ts.astype("datetime64[D]")
    years = ts.astype("datetime64[Y]")
    months = ts.astype("datetime64[M]")
    return {
        "hour_of_day": (hours % 24).astype(np.float64),
        "day_of_year": ((days - years.astype("datetime64[D]")).astype(np.int64) + 1).astype(np.float64),
        "month": ((months - years.astype("datetime64[M]")).astype(np.int64) + 1).astype(np.float64),
        "global_time_index": hours.astype(np.float64),
    }


@dataclass
class WindowBatch:
    """A set of encoder/decoder windows stored as stacked arrays."""

    site_id: np.ndarray            # (n,) object
    origin: np.ndarray             # (n,) datetime64[h], prediction time of first decoder step
    encoder: np.ndarray            # (n, k, m_enc)
    decoder: np.ndarray            # (n, tau, m_dec)
    static_cat: np.ndarray         # (n, c) raw labels, or int indices once normalised
    static_real: np.ndarray        # (n, r)
    label: np.ndarray              # (n, tau)
    label_mask: np.ndarray         # (n, tau) True where the label enters the loss
    encoder_channels: tuple[str, ...]
    decoder_channels: tuple[str, ...]
    static_cat_names: tuple[str, ...]
    static_real_names: tuple[str, ...]
    mode: TargetHistoryMode
    normalized: bool = False

    def __len__(self) -> int:
        return len(self.site_id)

    @property
    def encoder_length(self) -> int:
        return self.encoder.shape[1]

    @property
    def decoder_length(self) -> int:
        return self.decoder.shape[1]

    def take(self, idx) -> "WindowBatch":
        idx = np.asarray(idx)
        return replace(self, site_id=self.site_id[idx], origin=self.origin[idx],
                       encoder=self.encoder[idx], decoder=self.decoder[idx],
                       static_cat=self.static_cat[idx], static_real=self.static_real[idx],
                       label=self.label[idx], label_mask=self.label_mask[idx])

    @classmethod
    def concat(cls, batches: Sequence["WindowBatch"]) -> "WindowBatch":
        batches = [b for b in batches if b is not None]
        if not batches:
            raise ValueError("no windows to concatenate")
        first = batches[0]
        for b in batches[1:]:
            if (b.encoder_channels, b.decoder_channels, b.static_cat_names, b.static_real_names,
                    b.mode, b.normalized, b.encoder_length, b.decoder_length) != (
                    first.encoder_channels, first.decoder_channels, first.static_cat_names,
                    first.static_real_names, first.mode, first.normalized,
                    first.encoder_length, first.decoder_length):
                raise ValueError("cannot concatenate windows with different layouts")
        cat = lambda attr: np.concatenate([getattr(b, attr) for b in batches], axis=0)  # noqa: E731
        return replace(first, site_id=cat("site_id"), origin=cat("origin"), encoder=cat("encoder"),
                       decoder=cat("decoder"), static_cat=cat("static_cat"),
                       static_real=cat("static_real"), label=cat("label"),
                       label_mask=cat("label_mask"))


def window_count(length: int, k: int, tau: int, stride: int) -> int:
    return (length - k - tau) // stride + 1 if length >= k + tau else 0


def channel_layout(catalog: FeatureCatalog, mode: TargetHistoryMode):
    mode = TargetHistoryMode(mode)
    history = [] if mode is TargetHistoryMode.NONE else [HISTORY_CHANNEL]
    encoder = history + [GAP_FLAG] + catalog.by_role("observed") + catalog.by_role("known") + list(TIME_FEATURES)
    decoder = catalog.by_role("known") + list(TIME_FEATURES)
    statics = [e for e in catalog.entries if e.role == "static"]
    cat = [e.name for e in statics if e.kind == "categorical"]
    real = [e.name for e in statics if e.kind == "real"]
    return tuple(encoder), tuple(decoder), tuple(cat), tuple(real)


def site_windows(series: SiteSeries, spec: WindowSpec, catalog: FeatureCatalog,
                 mode: TargetHistoryMode = TargetHistoryMode.OBSERVED, stride: int = 1,
                 exclude_gap_labels: bool = True) -> WindowBatch | None:
    """All windows of one site, or None when the site is too short."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    mode = TargetHistoryMode(mode)
    k, tau = spec.encoder_length, spec.decoder_length
    enc_names, dec_names, cat_names, real_names = channel_layout(catalog, mode)
    n = window_count(len(series), k, tau, stride)
    if n == 0:
        return None
    if not series.is_contiguous():
        raise DataError(f"site {series.site_id}: timeline has gaps; run gap filling first")
    if mode is TargetHistoryMode.ESTIMATED and ESTIMATED_HISTORY not in series.features:
        raise DataError(f"site {series.site_id}: estimated mode needs a {ESTIMATED_HISTORY!r} column")

    cols = dict(time_features(series.hours))
    cols[GAP_FLAG] = series.gap_flag.astype(np.float64)
    for name in catalog.time_varying:
        if name not in series.features:
            raise DataError(f"site {series.site_id}: missing feature column {name!r}")
        cols[name] = series.features[name]
    if mode is TargetHistoryMode.OBSERVED:
        cols[HISTORY_CHANNEL] = series.target
    elif mode is TargetHistoryMode.ESTIMATED:
        cols[HISTORY_CHANNEL] = series.features[ESTIMATED_HISTORY]
    for name in (set(enc_names) | set(dec_names)) - {"relative_time_index", HISTORY_CHANNEL}:
        if not np.all(np.isfinite(cols[name])):
            raise DataError(f"site {series.site_id}: column {name!r} has missing values; run gap filling first")

    origins = k + stride * np.arange(n)
    enc_idx = origins[:, None] + np.arange(-k, 0)[None, :]
    dec_idx = origins[:, None] + np.arange(tau)[None, :]

    def block(names, idx, rel):
        out = np.empty(idx.shape + (len(names),))
        for j, name in enumerate(names):
            out[..., j] = rel if name == "relative_time_index" else cols[name][idx]
        return out

    encoder = block(enc_names, enc_idx, np.broadcast_to(np.arange(-k, 0, dtype=np.float64), enc_idx.shape))
    decoder = block(dec_names, dec_idx, np.broadcast_to(np.arange(tau, dtype=np.float64), dec_idx.shape))
    label = series.target[dec_idx]
    mask = np.isfinite(label)
    if exclude_gap_labels:
        mask &= (series.gap_flag[dec_idx] == 0) & ~series.target_imputed[dec_idx]
    st = series.static
    return WindowBatch(
        site_id=np.full(n, series.site_id, dtype=object),
        origin=series.timestamps[origins],
        encoder=encoder,
        decoder=decoder,
        static_cat=np.array([[st.value(c) for c in cat_names]] * n, dtype=object).reshape(n, len(cat_names)),
        static_real=np.array([[st.value(c) for c in real_names]] * n, dtype=np.float64).reshape(n, len(real_names)),
        label=np.where(np.isfinite(label), label, 0.0),
        label_mask=mask,
        encoder_channels=enc_names,
        decoder_channels=dec_names,
        static_cat_names=cat_names,
        static_real_names=real_names,
        mode=mode,
    )


def build_windows(series: Iterable[SiteSeries], spec: WindowSpec, catalog: FeatureCatalog,
                  mode: TargetHistoryMode = TargetHistoryMode.OBSERVED, stride: int = 1,
                  exclude_gap_labels: bool = True) -> Iterator[WindowBatch]:
    """Yield one :class:`WindowBatch` per site that is long enough."""
    for s in series:
        wb = site_windows(s, spec, catalog, mode, stride, exclude_gap_labels)
        if wb is not None:
            yield wb


# -- normalisation ------------------------------------------------------------

@dataclass
class NormStats:
    """Training-split statistics: z-score parameters for real channels and
    the target, vocabularies for categorical statics (index 0 = unknown)."""

    mean: dict[str, float]
    std: dict[str, float]
    target_mean: float
    target_std: float
    vocab: dict[str, list[str]]
    warnings: list[str] = field(default_factory=list)

    STD_FLOOR = 1e-8

    @classmethod
    def fit(cls, train: WindowBatch) -> "NormStats":
        if train.normalized:
            raise ValueError("statistics must be fitted on raw windows")
        mean, std, warnings = {}, {}, []

        def add(name, values):
            values = values[np.isfinite(values)]
            mu = float(values.mean()) if values.size else 0.0
            sd = float(values.std()) if values.size else 0.0
            if sd < cls.STD_FLOOR:
                warnings.append(f"channel {name!r} is constant on the training split; std floored")
                sd = cls.STD_FLOOR
            mean[name], std[name] = mu, sd

        pooled: dict[str, list[np.ndarray]] = {}
        for j, name in enumerate(train.encoder_channels):
            pooled.setdefault(name, []).append(train.encoder[..., j].ravel())
        for j, name in enumerate(train.decoder_channels):
            pooled.setdefault(name, []).append(train.decoder[..., j].ravel())
        pooled.pop(HISTORY_CHANNEL, None)
        for name, parts in pooled.items():
            add(name, np.concatenate(parts))
        for j, name in enumerate(train.static_real_names):
            add(name, train.static_real[:, j])
        labels = train.label[train.label_mask]
        add("__target__", labels)
        t_mean, t_std = mean.pop("__target__"), std.pop("__target__")
        vocab = {name: sorted({str(v) for v in train.static_cat[:, j]})
                 for j, name in enumerate(train.static_cat_names)}
        return cls(mean, std, t_mean, t_std, vocab, warnings)

    def _scale(self, name):
        if name == HISTORY_CHANNEL:
            return self.target_mean, self.target_std
        return self.mean[name], self.std[name]

    def apply(self, batch: WindowBatch) -> WindowBatch:
        if batch.normalized:
            return batch

        def z(block, names):
            out = np.empty_like(block)
            for j, name in enumerate(names):
                mu, sd = self._scale(name)
                out[..., j] = (block[..., j] - mu) / sd
            return out

        cat = np.zeros(batch.static_cat.shape, dtype=np.int64)
        for j, name in enumerate(batch.static_cat_names):
            lookup = {v: i + 1 for i, v in enumerate(self.vocab[name])}
            cat[:, j] = [lookup.get(str(v), 0) for v in batch.static_cat[:, j]]
        return replace(batch, encoder=z(batch.encoder, batch.encoder_channels),
                       decoder=z(batch.decoder, batch.decoder_channels), static_cat=cat,
                       static_real=z(batch.static_real, batch.static_real_names),
                       label=self.forward_target(batch.label), normalized=True)

    def forward_target(self, y):
        return (np.asarray(y, dtype=np.float64) - self.target_mean) / self.target_std

    def inverse_target(self, z):
        return np.asarray(z, dtype=np.float64) * self.target_std + self.target_mean

    def vocab_sizes(self, names: Sequence[str]) -> list[int]:
        return [len(self.vocab[n]) + 1 for n in names]

    def to_dict(self) -> dict:
        return {"mean": self.mean, "std": self.std, "target_mean": self.target_mean,
                "target_std": self.target_std, "vocab": self.vocab, "warnings": self.warnings}

    @classmethod
    def from_dict(cls, d) -> "NormStats":
        return cls(dict(d["mean"]), dict(d["std"]), float(d["target_mean"]), float(d["target_std"]),
                   {k: list(v) for k, v in d["vocab"].items()}, list(d.get("warnings", [])))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path) -> "NormStats":
        return cls.from_dict(json.loads(Path(path).read_text()))


def normalize_fit_apply(train_windows: WindowBatch, all_windows: Sequence[WindowBatch] | WindowBatch):
    """Fit :class:`NormStats` on ``train_windows`` and normalise every batch
    in ``all_windows``.  Returns ``(normalised, stats)``; ``normalised``
    mirrors the container type of ``all_windows``."""
    stats = NormStats.fit(train_windows)
    for w in stats.warnings:
        log.warning(w)
    if isinstance(all_windows, WindowBatch):
        return stats.apply(all_windows), stats
    return [stats.apply(b) for b in all_windows], stats
