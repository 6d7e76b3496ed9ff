from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import make_site
from fluxtft.dataset import (
    GAP_FLAG,
    HISTORY_CHANNEL,
    DataError,
    FeatureCatalog,
    FeatureEntry,
    NormStats,
    SiteSeries,
    StaticCovariates,
    TargetHistoryMode,
    WindowSpec,
    attach_history,
    build_windows,
    channel_layout,
    filter_sites,
    generic_igbp,
    ingest_csv,
    normalize_fit_apply,
    parse_timestamp,
    site_windows,
    window_count,
    write_csv,
)

META = "site_id,igbp,koppen,koppen_sub,lat,lon\n"
REC = "site_id,timestamp,feature,value\n"


def catalog(*extra):
    return FeatureCatalog((FeatureEntry("TA", "known"), *extra,
                           FeatureEntry("igbp", "static", "categorical", "static"),
                           FeatureEntry("latitude", "static", "real", "static")))


def _write(tmp_path, meta_rows, rec_rows):
    m, r = tmp_path / "sites.csv", tmp_path / "records.csv"
    m.write_text(META + "".join(x + "\n" for x in meta_rows))
    r.write_text(REC + "".join(x + "\n" for x in rec_rows))
    return m, r


# -- static covariates and catalog -----------------------------------------

def test_igbp_merge_map():
    assert generic_igbp("OSH") == generic_igbp("CSH") == "SHR"
    assert generic_igbp("WSA") == generic_igbp("SAV") == "SAV"
    assert generic_igbp("DBF") == "DBF"
    assert StaticCovariates("WSA", "Aw", "Aw", 0, 0).igbp_generic == "SAV"


@pytest.mark.parametrize("lat,lon", [(91, 0), (-90.5, 0), (0, 181), (0, -180.01)])
def test_static_coordinate_bounds(lat, lon):
    with pytest.raises(DataError):
        StaticCovariates("DBF", "Cfb", "Cfb", lat, lon)


def test_catalog_rejects_target_and_duplicates():
    with pytest.raises(DataError, match="reserved"):
        FeatureCatalog((FeatureEntry("GPP", "known"),))
    with pytest.raises(DataError, match="unique"):
        FeatureCatalog((FeatureEntry("TA", "known"), FeatureEntry("TA", "observed")))
    with pytest.raises(DataError):
        FeatureCatalog((FeatureEntry("TA", "known", cadence="weekly"),))


def test_catalog_json_round_trip(tmp_path):
    cat = catalog(FeatureEntry("NDVI", "known", cadence="daily"))
    cat.save(tmp_path / "c.json")
    assert FeatureCatalog.load(tmp_path / "c.json") == cat


def test_series_invariants_enforced():
    with pytest.raises(DataError, match="length"):
        make_site({"TA": np.zeros(3)}, target=np.zeros(4))
    with pytest.raises(DataError, match="increasing"):
        make_site({"TA": np.zeros(3)}, hours=[0, 2, 1])
    s = make_site({"TA": np.zeros(3)})
    with pytest.raises(ValueError):
        s.target[0] = 1.0


# -- ingestion ----------------------------------------------------------------

def test_ingest_daily_forward_fill(tmp_path):
    rows = [f"A,{np.datetime64('2015-06-01T00', 'h') + h}:00,GPP,{h}" for h in range(48)]
    rows += [f"A,{np.datetime64('2015-06-01T00', 'h') + h},TA,{h * 0.5}" for h in range(48)]
    rows += ["A,2015-06-01,NDVI,0.25", "A,2015-06-02T00Z,NDVI,0.75"]
    m, r = _write(tmp_path, ["A,DBF,Cfb,Cfb,45.5,7.25"], rows)
    [s] = ingest_csv(m, r, catalog(FeatureEntry("NDVI", "known", cadence="daily")))
    assert len(s) == 48 and s.is_contiguous()
    assert np.array_equal(s.features["NDVI"], np.repeat([0.25, 0.75], 24))
    assert np.array_equal(s.target, np.arange(48.0))
    assert np.array_equal(s.gap_flag, np.zeros(48))
    assert s.static.latitude == 45.5


@given(cadence=st.sampled_from(["daily", "4day", "8day"]), n_blocks=st.integers(1, 4), seed=st.integers(0, 999))
@settings(max_examples=25)
def test_coarse_features_are_piecewise_constant(tmp_path_factory, cadence, n_blocks, seed):
    span = {"daily": 24, "4day": 96, "8day": 192}[cadence]
    rng = np.random.default_rng(seed)
    vals = rng.normal(size=n_blocks)
    t0 = np.datetime64("2012-03-01T00", "h")
    rows = [f"A,{t0 + h},GPP,1" for h in range(span * n_blocks)]
    rows += [f"A,{t0 + h},TA,0" for h in range(span * n_blocks)]
    rows += [f"A,{t0 + b * span},LAI,{float(v)!r}" for b, v in enumerate(vals)]
    m, r = _write(tmp_path_factory.mktemp("cad"), ["A,DBF,Cfb,Cfb,0,0"], rows)
    [s] = ingest_csv(m, r, catalog(FeatureEntry("LAI", "known", cadence=cadence)))
    assert np.array_equal(s.features["LAI"], np.repeat(vals, span))


def test_coarse_value_does_not_outlive_its_block(tmp_path):
    t0 = np.datetime64("2012-03-01T00", "h")
    rows = [f"A,{t0 + h},GPP,1" for h in range(72)] + [f"A,{t0 + h},TA,0" for h in range(72)]
    rows += [f"A,{t0},NDVI,0.5"]
    m, r = _write(tmp_path, ["A,DBF,Cfb,Cfb,0,0"], rows)
    [s] = ingest_csv(m, r, catalog(FeatureEntry("NDVI", "known", cadence="daily")))
    assert np.all(s.features["NDVI"][:24] == 0.5) and np.isnan(s.features["NDVI"][24:]).all()


def test_ingest_empty_records(tmp_path):
    m, r = _write(tmp_path, ["A,DBF,Cfb,Cfb,0,0"], [])
    assert ingest_csv(m, r, catalog()) == []
    r.write_text("")
    assert ingest_csv(m, r, catalog()) == []


@pytest.mark.parametrize("rows,match", [
    (["A,2015-01-01T00,GPP,1", "A,2015-13-01T00,GPP,1"], r":3:"),
    (["A,2015-01-01T00,GPP,1", "A,2015-01-01T00,GPP,2"], r":3: duplicate"),
    (["B,2015-01-01T00,GPP,1"], r":2: site 'B'"),
    (["A,2015-01-01T00,GPP"], r":2: expected 4"),
    (["A,2015-01-01T00,SOIL,1"], r":2: unknown feature"),
    (["A,2015-01-01T00:30,GPP,1"], r":2:"),
    (["A,2015-01-01T00,GPP,abc"], r":2:"),
])
def test_ingest_errors_carry_line_numbers(tmp_path, rows, match):
    m, r = _write(tmp_path, ["A,DBF,Cfb,Cfb,0,0"], rows)
    with pytest.raises(DataError, match=match):
        ingest_csv(m, r, catalog())


def test_ingest_bad_headers(tmp_path):
    m, r = _write(tmp_path, ["A,DBF,Cfb,Cfb,0,0"], [])
    r.write_text("site,time,feature,value\n")
    with pytest.raises(DataError, match="header"):
        ingest_csv(m, r, catalog())
    m.write_text("site_id,igbp\nA,DBF\n")
    with pytest.raises(DataError, match="header"):
        ingest_csv(m, r, catalog())


def test_parse_timestamp_forms():
    want = np.datetime64("2015-02-03T04", "h")
    for text in ("2015-02-03T04", "2015-02-03T04:00", "2015-02-03 04:00:00", "2015-02-03T04:00:00Z",
                 "2015-02-03T04:00+00:00"):
        assert parse_timestamp(text) == want
    for bad in ("2015-02-30T00", "2015-02-03T24", "03/02/2015", "2015-02-03T04:00+02:00"):
        with pytest.raises(ValueError):
            parse_timestamp(bad)


def test_ingest_write_ingest_round_trip(tmp_path, rng):
    cat = catalog(FeatureEntry("NDVI", "known", cadence="daily"), FeatureEntry("LST", "observed", cadence="daily"))
    sites = []
    for i in range(3):
        n = 50 + 10 * i
        feats = {"TA": rng.normal(size=n), "NDVI": rng.normal(size=n), "LST": rng.normal(size=n)}
        feats["TA"][3] = np.nan
        tgt = rng.normal(size=n)
        tgt[5] = np.nan
        gap = np.zeros(n, dtype=np.int8)
        gap[7] = 1
        sites.append(make_site(feats, tgt, site_id=f"S{i}", hours=np.arange(n) * (1 + (i == 2)), gap_flag=gap,
                               lat=-12.345678901234, igbp=["DBF", "OSH", "WSA"][i]))
    write_csv(sites, tmp_path, cat)
    back = ingest_csv(tmp_path / "sites.csv", tmp_path / "records.csv", cat)
    assert len(back) == 3 and all(a.equals(b) for a, b in zip(sites, back))
    write_csv(back, tmp_path / "again", cat)
    assert (tmp_path / "records.csv").read_bytes() == (tmp_path / "again" / "records.csv").read_bytes()


# -- site filtering -------------------------------------------------------------

def _span_site(hours, missing_frac, sid="S"):
    target = np.ones(hours)
    target[: int(round(missing_frac * hours))] = np.nan
    return make_site({"TA": np.zeros(hours)}, target, site_id=sid)


def test_filter_sites_examples():
    six_months, two_years = 24 * 182, 2 * 8760
    kept = filter_sites([_span_site(six_months, 0.0, "half"), _span_site(two_years, 0.10, "ok"),
                         _span_site(two_years, 0.25, "holey")])
    assert [s.site_id for s in kept] == ["ok"]


def test_filter_sites_counts_absent_hours_and_gap_records():
    s = make_site({"TA": np.zeros(100)}, np.ones(100), hours=np.r_[np.arange(50), np.arange(70, 120)])
    # span 120, 100 observed -> 1/6 missing
    assert filter_sites([s], min_span_hours=120, max_missing_frac=0.17) == [s]
    assert filter_sites([s], min_span_hours=120, max_missing_frac=0.16) == []
    assert filter_sites([s], min_span_hours=121, max_missing_frac=1.0) == []
    with pytest.raises(ValueError):
        filter_sites([s], max_missing_frac=1.5)


# -- windows ----------------------------------------------------------------------

def _window_site(n, site_id="S", start="2011-05-01T00"):
    t = np.arange(n, dtype=float)
    return make_site({"TA": 100 + t, "LST": 1000 + t}, 10 * t, site_id=site_id, start=start)


CAT2 = catalog(FeatureEntry("LST", "observed"))


@pytest.mark.parametrize("n,expected", [(169, 1), (200, 32), (168, 0)])
def test_window_count_examples(n, expected):
    assert window_count(n, 168, 1, 1) == expected
    wb = site_windows(_window_site(n), WindowSpec(168, 1), CAT2)
    assert (0 if wb is None else len(wb)) == expected


@given(length=st.integers(1, 80), k=st.integers(1, 30), tau=st.integers(1, 4), stride=st.integers(1, 9))
def test_window_count_matches_enumeration(length, k, tau, stride):
    brute = sum(1 for o in range(k, length - tau + 1) if (o - k) % stride == 0)
    assert window_count(length, k, tau, stride) == brute


@given(lengths=st.lists(st.integers(1, 40), min_size=1, max_size=4), k=st.integers(1, 12),
       tau=st.integers(1, 3), stride=st.integers(1, 5))
@settings(max_examples=60)
def test_windows_stay_inside_one_site(lengths, k, tau, stride):
    sites = [_window_site(n, f"S{i}", start=f"201{i}-01-01T00") for i, n in enumerate(lengths)]
    for i, wb in enumerate(build_windows(sites, WindowSpec(k, tau), CAT2, stride=stride)):
        sid = wb.site_id[0]
        assert set(wb.site_id) == {sid}
        site = next(s for s in sites if s.site_id == sid)
        g_enc = wb.encoder[..., wb.encoder_channels.index("global_time_index")]
        g_dec = wb.decoder[..., wb.decoder_channels.index("global_time_index")]
        hours = np.concatenate([g_enc, g_dec], axis=1)
        assert np.all(np.diff(hours, axis=1) == 1)
        assert hours.min() >= site.hours[0] and hours.max() <= site.hours[-1]
        assert len(wb) == window_count(len(site), k, tau, stride)
        # history channel is the target at the encoder hours
        hist = wb.encoder[..., wb.encoder_channels.index(HISTORY_CHANNEL)]
        assert np.array_equal(hist, 10 * (g_enc - site.hours[0]))
        assert np.array_equal(wb.label, 10 * (g_dec - site.hours[0]))


def test_window_layout_and_relative_index():
    wb = site_windows(_window_site(30), WindowSpec(5, 2), CAT2, stride=3)
    assert wb.encoder_channels[:3] == (HISTORY_CHANNEL, GAP_FLAG, "LST")
    assert "LST" not in wb.decoder_channels and "TA" in wb.decoder_channels
    rel = wb.encoder_channels.index("relative_time_index")
    assert np.array_equal(wb.encoder[0, :, rel], [-5, -4, -3, -2, -1])
    assert np.array_equal(wb.decoder[0, :, wb.decoder_channels.index("relative_time_index")], [0, 1])
    assert wb.origin[1] - wb.origin[0] == np.timedelta64(3, "h")
    assert wb.static_cat.tolist()[0] == ["DBF"] and wb.static_real[0, 0] == 45.0


def test_observed_features_end_at_origin():
    wb = site_windows(_window_site(30), WindowSpec(6, 1), CAT2)
    lst = wb.encoder[..., wb.encoder_channels.index("LST")]
    origin_idx = (wb.origin - wb.origin[0]).astype(int) + 6
    assert np.array_equal(lst[:, -1], 1000 + origin_idx - 1)


def test_mode_none_drops_history_channel():
    s = _window_site(40)
    obs = site_windows(s, WindowSpec(8), CAT2, TargetHistoryMode.OBSERVED)
    none = site_windows(s, WindowSpec(8), CAT2, TargetHistoryMode.NONE)
    assert none.encoder.shape[-1] == obs.encoder.shape[-1] - 1
    assert HISTORY_CHANNEL not in none.encoder_channels
    assert np.array_equal(none.encoder, obs.encoder[..., 1:])


def test_mode_estimated_needs_column():
    s = _window_site(40)
    with pytest.raises(DataError, match="estimated"):
        site_windows(s, WindowSpec(8), CAT2, TargetHistoryMode.ESTIMATED)
    est = attach_history(s, np.full(40, 7.0))
    wb = site_windows(est, WindowSpec(8), CAT2, TargetHistoryMode.ESTIMATED)
    assert np.all(wb.encoder[..., 0] == 7.0)
    with pytest.raises(DataError):
        attach_history(s, np.zeros(39))


def test_windows_require_gap_free_input():
    s = make_site({"TA": np.zeros(30), "LST": np.zeros(30)}, np.zeros(30), hours=np.r_[0:10, 11:31])
    with pytest.raises(DataError, match="gap"):
        site_windows(s, WindowSpec(4), CAT2)
    feats = {"TA": np.zeros(30), "LST": np.zeros(30)}
    feats["TA"][4] = np.nan
    with pytest.raises(DataError, match="missing"):
        site_windows(make_site(feats), WindowSpec(4), CAT2)
    with pytest.raises(ValueError):
        site_windows(_window_site(30), WindowSpec(4), CAT2, stride=0)


def test_gap_and_imputed_labels_masked():
    gap = np.zeros(20, dtype=np.int8)
    gap[10] = 1
    tgt = np.arange(20.0)
    tgt[12] = np.nan
    s = make_site({"TA": np.zeros(20), "LST": np.zeros(20)}, tgt, gap_flag=gap)
    s = s.evolve(target_imputed=np.arange(20) == 14)
    wb = site_windows(s, WindowSpec(4), CAT2)
    masked = {int(o) for o in (wb.origin[~wb.label_mask[:, 0]] - s.timestamps[0]).astype(int)}
    assert masked == {10, 12, 14}
    assert np.all(np.isfinite(wb.label))
    wb2 = site_windows(s, WindowSpec(4), CAT2, exclude_gap_labels=False)
    assert {int(o) for o in (wb2.origin[~wb2.label_mask[:, 0]] - s.timestamps[0]).astype(int)} == {12}


def test_channel_layout_known_in_both_blocks():
    enc, dec, cat, real = channel_layout(CAT2, "none")
    assert "TA" in enc and "TA" in dec and cat == ("igbp",) and real == ("latitude",)


# -- normalisation --------------------------------------------------------------

def _norm_fixture():
    train = make_site({"TA": np.array([3.0, 7.0] * 10), "LST": np.ones(20) * 4}, np.arange(20.0), igbp="DBF")
    other = make_site({"TA": np.full(20, 9.0), "LST": np.ones(20) * 4}, np.arange(20.0), site_id="X", igbp="WET")
    spec = WindowSpec(3)
    return site_windows(train, spec, CAT2), site_windows(other, spec, CAT2)


def test_normalize_examples():
    tw, ow = _norm_fixture()
    (tn, on), stats = normalize_fit_apply(tw, [tw, ow])
    assert stats.mean["TA"] == 5.0 and stats.std["TA"] == 2.0
    assert np.all(on.decoder[..., on.decoder_channels.index("TA")] == 2.0)
    assert tn.static_cat[0, 0] == 1 and on.static_cat[0, 0] == 0  # WET unseen -> unknown index
    assert stats.vocab_sizes(["igbp"]) == [2]
    assert any("LST" in w for w in stats.warnings) and stats.std["LST"] == NormStats.STD_FLOOR
    assert tn.normalized and not tw.normalized


def test_target_forward_inverse_round_trip(rng):
    tw, _ = _norm_fixture()
    stats = NormStats.fit(tw)
    y = rng.normal(size=100) * 50 + 3
    assert np.max(np.abs(stats.inverse_target(stats.forward_target(y)) - y)) <= 1e-12 * np.max(np.abs(y))
    hist = stats.apply(tw).encoder[..., 0]
    assert np.allclose(stats.inverse_target(hist), tw.encoder[..., 0], atol=1e-12)


def test_norm_stats_json_round_trip(tmp_path):
    tw, _ = _norm_fixture()
    stats = NormStats.fit(tw)
    stats.save(tmp_path / "n.json")
    back = NormStats.load(tmp_path / "n.json")
    assert back.to_dict() == stats.to_dict()
    assert np.array_equal(back.apply(tw).encoder, stats.apply(tw).encoder)


def test_norm_stats_refuse_normalised_input():
    tw, _ = _norm_fixture()
    with pytest.raises(ValueError):
        NormStats.fit(NormStats.fit(tw).apply(tw))


def test_window_batch_concat_and_take():
    tw, ow = _norm_fixture()
    both = type(tw).concat([tw, ow])
    assert len(both) == len(tw) + len(ow)
    assert np.array_equal(both.take(np.arange(len(tw))).encoder, tw.encoder)
    with pytest.raises(ValueError):
        type(tw).concat([tw, site_windows(_window_site(30), WindowSpec(4), CAT2)])


def test_site_series_is_a_value_type():
    s = _window_site(10)
    assert isinstance(s, SiteSeries) and s.equals(s.evolve())
    assert not s.equals(s.evolve(site_id="other"))
