from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from fluxtft.dataset import TargetHistoryMode, WindowBatch
from fluxtft.tft import ChannelLayout, TemporalFusionTransformer, TftConfig

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record_acceptance(n: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[n] = (passed, detail)
    print(f"ACCEPTANCE {n}: {'PASS' if passed else 'FAIL'} {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if passed else 'FAIL'}  {detail}")


def micro_batch(rng, B=2, k=8, tau=1, enc=("GPP_history", "gap_flag", "a", "b"), dec=("b",),
                cats=("igbp", "koppen"), reals=("latitude",), vocab=3):
    return WindowBatch(
        site_id=np.array([f"s{i}" for i in range(B)], dtype=object),
        origin=np.datetime64("2010-01-01T00", "h") + np.arange(B) * 24,
        encoder=rng.normal(size=(B, k, len(enc))),
        decoder=rng.normal(size=(B, tau, len(dec))),
        static_cat=rng.integers(0, vocab, size=(B, len(cats))),
        static_real=rng.normal(size=(B, len(reals))),
        label=rng.normal(size=(B, tau)),
        label_mask=np.ones((B, tau), dtype=bool),
        encoder_channels=tuple(enc),
        decoder_channels=tuple(dec),
        static_cat_names=tuple(cats),
        static_real_names=tuple(reals),
        mode=TargetHistoryMode.OBSERVED,
        normalized=True,
    )


def micro_model(batch, d=4, heads=2, dropout=0.0, seed=0, vocab=3):
    cfg = TftConfig(hidden_size=d, n_heads=heads, dropout=dropout, encoder_length=batch.encoder_length,
                    decoder_length=batch.decoder_length, seed=seed)
    layout = ChannelLayout(batch.encoder_channels, batch.decoder_channels, batch.static_cat_names,
                           (vocab,) * len(batch.static_cat_names), batch.static_real_names)
    return TemporalFusionTransformer(cfg, layout)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def make_site(features, target=None, site_id="S1", start="2010-01-01T00", hours=None, igbp="DBF",
              koppen="Cfb", lat=45.0, gap_flag=None):
    """SiteSeries from a dict of equal-length columns; ``hours`` (offsets
    from ``start``) defaults to a contiguous grid."""
    from fluxtft.dataset import SiteSeries, StaticCovariates

    n = len(next(iter(features.values()))) if features else len(target)
    offsets = np.arange(n) if hours is None else np.asarray(hours)
    ts = np.datetime64(start, "h") + offsets
    return SiteSeries(
        site_id=site_id,
        timestamps=ts,
        target=np.arange(n, dtype=float) if target is None else target,
        features=features,
        gap_flag=np.zeros(n, dtype=np.int8) if gap_flag is None else gap_flag,
        static=StaticCovariates(igbp, koppen, koppen + "x", lat, 10.0),
    )
