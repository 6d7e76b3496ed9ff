"""Deterministic synthetic flux sites.

Each site gets a latitude from its land-cover group, a clear-sky radiation
curve modulated by a smooth cloud process, temperature with seasonal,
diurnal and weather components, slow vegetation indices, and a GPP target

    GPP = amplitude * SW / (SW + K) * f_T(TA) * (0.25 + 0.75 * greenness) + noise

where the noise is only added while the sun is up, so GPP is exactly zero at
night.  Seasons follow solar declination, so southern sites peak in
December to February.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import FeatureCatalog, FeatureEntry, SiteSeries, StaticCovariates, write_csv

DRIVERS = ("SW_IN", "TA")
LIGHT_HALF_SATURATION = 250.0


@dataclass(frozen=True)
class GroupProfile:
    igbp: str
    koppen: str
    lat_range: tuple[float, float]
    amplitude: float        # light-saturated GPP at optimal temperature
    t_mean: float           # annual mean air temperature
    t_season: float         # half the seasonal temperature range
    t_opt: float
    green_base: float       # winter greenness floor


GROUPS = {
    "ENF": GroupProfile("ENF", "Dfb", (45.0, 62.0), 22.0, 5.0, 11.0, 18.0, 0.55),
    "DBF": GroupProfile("DBF", "Cfb", (38.0, 52.0), 34.0, 10.0, 9.0, 22.0, 0.05),
    "GRA": GroupProfile("GRA", "BSk", (-40.0, 50.0), 24.0, 12.0, 8.0, 22.0, 0.15),
    "CRO": GroupProfile("CRO", "Dfa", (35.0, 50.0), 38.0, 12.0, 12.0, 24.0, 0.0),
    "EBF": GroupProfile("EBF", "Af", (-15.0, 10.0), 30.0, 26.0, 1.5, 27.0, 0.85),
    "SAV": GroupProfile("SAV", "Aw", (-30.0, -12.0), 18.0, 22.0, 5.0, 28.0, 0.2),
    "OSH": GroupProfile("OSH", "BWh", (25.0, 40.0), 9.0, 18.0, 9.0, 26.0, 0.2),
    "WET": GroupProfile("WET", "Dfc", (50.0, 68.0), 20.0, 3.0, 12.0, 18.0, 0.05),
    "MF": GroupProfile("MF", "Dfb", (42.0, 58.0), 28.0, 7.0, 10.0, 20.0, 0.3),
}


def synthetic_catalog() -> FeatureCatalog:
    """Features produced by :func:`generate_sites`."""
    return FeatureCatalog((
        FeatureEntry("SW_IN", "known", "real", "hourly"),
        FeatureEntry("TA", "known", "real", "hourly"),
        FeatureEntry("VPD", "known", "real", "hourly"),
        FeatureEntry("NDVI", "known", "real", "daily"),
        FeatureEntry("LAI", "known", "real", "4day"),
        FeatureEntry("LST", "observed", "real", "daily"),
        FeatureEntry("igbp", "static", "categorical", "static"),
        FeatureEntry("koppen", "static", "categorical", "static"),
        FeatureEntry("latitude", "static", "real", "static"),
    ))


@dataclass
class GroundTruth:
    drivers: tuple[str, ...]
    light_half_saturation: float
    site_amplitude: dict[str, float]
    site_group: dict[str, str]
    missing_cells: dict[str, int]
    gap_records: dict[str, int]
    formula: str = "amplitude * SW/(SW+K) * f_T(TA) * (0.25 + 0.75*greenness) + daytime noise, clipped at 0"
    groups: dict[str, dict] = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["drivers"] = list(self.drivers)
        return d

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))


def _ar1(rng, n: int, phi: float, sd: float) -> np.ndarray:
    """Stationary AR(1) with marginal standard deviation ``sd``."""
    eps = rng.normal(0.0, sd * np.sqrt(1.0 - phi * phi), n)
    out = np.empty(n)
    out[0] = rng.normal(0.0, sd)
    for i in range(1, n):
        out[i] = phi * out[i - 1] + eps[i]
    return out


def _solar_elevation_sin(hours: np.ndarray, lat: float, lon: float) -> np.ndarray:
    doy = ((hours // 24) % 365.25).astype(np.float64)
    decl = np.deg2rad(23.44) * np.sin(2.0 * np.pi * (doy - 80.0) / 365.25)
    solar_hour = (hours % 24) + lon / 15.0
    ha = np.deg2rad(15.0 * (solar_hour - 12.0))
    phi = np.deg2rad(lat)
    return np.sin(phi) * np.sin(decl) + np.cos(phi) * np.cos(decl) * np.cos(ha)


TEMPERATURE_WIDTH = 12.0


def temperature_response(ta: np.ndarray, t_opt: float) -> np.ndarray:
    """Bell-shaped response peaking at ``t_opt`` (1 there, ~0.37 one
    width away)."""
    return np.exp(-((ta - t_opt) / TEMPERATURE_WIDTH) ** 2)


def _daily_blocks(values: np.ndarray, block: int) -> np.ndarray:
    """Hold the first value of every ``block``-hour block (cadence
    sampling)."""
    idx = (np.arange(values.size) // block) * block
    return values[idx]


def _site(rng, site_id: str, prof: GroupProfile, hours: np.ndarray):
    lat = float(np.round(rng.uniform(*prof.lat_range), 4))
    lon = float(np.round(rng.uniform(-150.0, 150.0), 4))
    amp = prof.amplitude * float(np.exp(rng.normal(0.0, 0.2)))
    n = hours.size
    days = n // 24 + 2
    hemi = 1.0 if lat >= 0 else -1.0
    day_idx = (hours - hours[0]) // 24

    local = (hours % 24 + lon / 15.0) % 24
    doy = ((hours // 24) % 365.25).astype(np.float64)
    season = -np.cos(2.0 * np.pi * (doy - 15.0) / 365.25) * hemi    # +1 mid-summer

    sin_el = _solar_elevation_sin(hours, lat, lon)
    cloud = 1.0 / (1.0 + np.exp(-(1.2 + _ar1(rng, days, 0.7, 1.2))))
    cloud_h = np.interp(hours - hours[0], np.arange(days) * 24.0, cloud)
    sw = np.where(sin_el > 0, 1000.0 * sin_el * (0.25 + 0.75 * cloud_h), 0.0)

    weather = _ar1(rng, days, 0.8, 4.0)[day_idx]
    t_mean = prof.t_mean + rng.normal(0.0, 2.0)
    ta = (t_mean + prof.t_season * season + 4.0 * np.sin(2.0 * np.pi * (local - 9.0) / 24.0)
          + weather + rng.normal(0.0, 0.5, n))

    green = prof.green_base + (1.0 - prof.green_base) / (1.0 + np.exp(-(season - 0.1) * 4.0))
    green_daily = _daily_blocks(green, 24)
    ndvi = _daily_blocks(0.15 + 0.7 * green + rng.normal(0.0, 0.02, n), 24)
    lai = _daily_blocks(0.3 + 5.0 * green + rng.normal(0.0, 0.15, n), 96)
    rh = 1.0 / (1.0 + np.exp(-_ar1(rng, days, 0.6, 0.8)[day_idx] - 0.3))
    vpd = 0.6108 * np.exp(17.27 * ta / (ta + 237.3)) * (1.0 - 0.9 * rh)
    daily_ta = np.bincount(day_idx, weights=ta) / np.bincount(day_idx)
    lst = _daily_blocks(daily_ta[day_idx] + 3.0 + rng.normal(0.0, 1.5, n), 24)

    light = sw / (sw + LIGHT_HALF_SATURATION)
    gpp = amp * light * temperature_response(ta, prof.t_opt) * (0.25 + 0.75 * green_daily)
    gpp = gpp + np.where(sw > 0, rng.normal(0.0, 0.5, n), 0.0)
    gpp = np.maximum(gpp, 0.0)
    gpp[sw <= 0] = 0.0

    lat_band = "N" if lat >= 0 else "S"
    static = StaticCovariates(prof.igbp, prof.koppen, prof.koppen + lat_band, lat, lon)
    feats = {"SW_IN": sw, "TA": ta, "VPD": vpd, "NDVI": ndvi, "LAI": lai, "LST": lst}
    return gpp, feats, static, amp


def _inject(rng, gpp, feats, hours, missing_frac, gap_frac):
    n = hours.size
    hourly = ["SW_IN", "TA", "VPD"]
    cells = np.column_stack([gpp] + [feats[f] for f in hourly])
    n_missing = int(round(missing_frac * cells.size))
    if n_missing:
        flat = rng.choice(cells.size, size=n_missing, replace=False)
        cells.reshape(-1)[flat] = np.nan
    gpp = cells[:, 0]
    for j, f in enumerate(hourly):
        feats[f] = cells[:, j + 1]
    n_gap = int(round(gap_frac * n))
    keep = np.ones(n, dtype=bool)
    if n_gap:
        # first and last hours stay so the span is preserved
        keep[1 + rng.choice(n - 2, size=n_gap, replace=False)] = False
    return gpp[keep], {f: v[keep] for f, v in feats.items()}, hours[keep], n_missing, n_gap


def generate_sites(n_sites: int, years: float = 1.0, seed: int = 0, missing_frac: float = 0.0,
                   gap_frac: float = 0.0, igbp_groups: Sequence[str] | None = None,
                   start: str = "2010-01-01T00") -> tuple[list[SiteSeries], GroundTruth]:
    """Generate ``n_sites`` synthetic sites of ``years`` * 8760 hourly records.

    Sites are dealt round-robin over ``igbp_groups`` (default: every known
    group).  ``missing_frac`` of the target and hourly driver cells are
    blanked and ``gap_frac`` of the records removed, both as exact counts.
    """
    if n_sites < 1:
        raise ValueError("n_sites must be >= 1")
    for name, frac in (("missing_frac", missing_frac), ("gap_frac", gap_frac)):
        if not 0.0 <= frac <= 0.5:
            raise ValueError(f"{name} must lie in [0, 0.5]")
    groups = list(igbp_groups) if igbp_groups else list(GROUPS)
    unknown = [g for g in groups if g not in GROUPS]
    if unknown:
        raise ValueError(f"unknown synthetic groups {unknown}")
    n_hours = int(round(years * 8760))
    if n_hours < 3:
        raise ValueError("years too small")
    t0 = int(np.datetime64(start, "h").astype(np.int64))
    hours = np.arange(t0, t0 + n_hours, dtype=np.int64)

    children = np.random.SeedSequence(seed).spawn(n_sites)
    series, amps, site_group, miss, gaps = [], {}, {}, {}, {}
    for i in range(n_sites):
        rng = np.random.default_rng(children[i])
        prof = GROUPS[groups[i % len(groups)]]
        sid = f"SYN{i:03d}"
        gpp, feats, static, amp = _site(rng, sid, prof, hours)
        gpp, feats, h, nm, ng = _inject(rng, gpp, feats, hours, missing_frac, gap_frac)
        series.append(SiteSeries(site_id=sid, timestamps=h.astype("datetime64[h]"), target=gpp,
                                 features=feats, gap_flag=np.zeros(h.size, dtype=np.int8), static=static))
        amps[sid], site_group[sid], miss[sid], gaps[sid] = amp, prof.igbp, nm, ng
    truth = GroundTruth(DRIVERS, LIGHT_HALF_SATURATION, amps, site_group, miss, gaps,
                        groups={g: asdict(GROUPS[g]) for g in sorted(set(groups))})
    return series, truth


def write_synthetic(directory, n_sites: int, years: float = 1.0, seed: int = 0, **kw):
    """Generate sites and write ``sites.csv``, ``records.csv``,
    ``catalog.json`` and ``truth.json`` into ``directory``."""
    series, truth = generate_sites(n_sites, years, seed, **kw)
    directory = Path(directory)
    catalog = synthetic_catalog()
    write_csv(series, directory, catalog)
    catalog.save(directory / "catalog.json")
    truth.save(directory / "truth.json")
    return series, truth
