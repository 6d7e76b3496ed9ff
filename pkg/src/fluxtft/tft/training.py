"""Training loop, prediction and interpretation capture for the TFT."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ..dataset import NormStats, WindowBatch, format_timestamp, parse_timestamp
from ..nn import NonFiniteGradient, adam_step
from .model import TemporalFusionTransformer, TftOutput

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    """Raised when the loss or a gradient becomes non-finite.  The model has
    been restored to its last good parameters."""

    def __init__(self, message: str, history: "TrainHistory"):
        super().__init__(message)
        self.history = history


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int = -1
    best_loss: float = float("inf")
    stopped_early: bool = False
    diverged: bool = False

    def to_dict(self) -> dict:
        return {"train_loss": self.train_loss, "val_loss": self.val_loss, "best_epoch": self.best_epoch,
                "best_loss": self.best_loss, "stopped_early": self.stopped_early, "diverged": self.diverged}


def _batches(n: int, size: int, rng: np.random.Generator | None):
    order = np.arange(n) if rng is None else rng.permutation(n)
    for start in range(0, n, size):
        yield order[start:start + size]


def evaluate_loss(model: TemporalFusionTransformer, windows: WindowBatch, batch_size: int = 256) -> float:
    """Mean pinball loss in eval mode, pooled over every labelled step."""
    total, count = 0.0, 0.0
    for idx in _batches(len(windows), batch_size, None):
        b = windows.take(idx)
        n = float(b.label_mask.sum())
        if n:
            total += model.loss(b) * n
            count += n
    return total / count if count else float("nan")


def train(model: TemporalFusionTransformer, train_windows: WindowBatch, val_windows: WindowBatch | None = None,
          max_epochs: int | None = None, checkpoint_dir=None, callback=None) -> TrainHistory:
    """Minimise mean pinball loss with Adam.

    Minibatches are drawn from a seeded shuffle stream and dropout from a
    second seeded stream, so two runs with the same config match exactly.
    Early stopping monitors validation loss (training loss when no
    validation windows are given); the best parameters are restored at the
    end.
    """
    cfg = model.config
    epochs = cfg.max_epochs if max_epochs is None else max_epochs
    model.check_batch(train_windows)
    if val_windows is not None and len(val_windows) and val_windows.label_mask.any():
        model.check_batch(val_windows)
    else:
        val_windows = None
    shuffle_rng = np.random.default_rng([cfg.seed, 1])
    dropout_rng = np.random.default_rng([cfg.seed, 2])
    store = model.store
    hist = TrainHistory()
    best = store.copy_values()
    stale = 0

    for epoch in range(epochs):
        total, count = 0.0, 0.0
        try:
            for idx in _batches(len(train_windows), cfg.batch_size, shuffle_rng):
                b = train_windows.take(idx)
                n = float(b.label_mask.sum())
                if n == 0:
                    continue
                store.zero_grad()
                loss = model.loss(b, backward=True, train=True, rng=dropout_rng)
                if not np.isfinite(loss):
                    raise FloatingPointError(f"non-finite training loss at epoch {epoch}")
                if cfg.grad_clip:
                    store.clip_grad_norm(cfg.grad_clip)
                adam_step(store, lr=cfg.learning_rate)
                total += loss * n
                count += n
        except (FloatingPointError, NonFiniteGradient) as exc:
            store.load_values(best)
            hist.diverged = True
            raise TrainingDiverged(str(exc), hist) from exc
        train_loss = total / count if count else float("nan")
        hist.train_loss.append(train_loss)
        if val_windows is not None:
            monitor = evaluate_loss(model, val_windows)
            hist.val_loss.append(monitor)
        else:
            monitor = train_loss
        if not np.isfinite(monitor):
            store.load_values(best)
            hist.diverged = True
            raise TrainingDiverged(f"non-finite monitored loss at epoch {epoch}", hist)
        if monitor < hist.best_loss:
            hist.best_loss, hist.best_epoch, stale = monitor, epoch, 0
            best = store.copy_values()
            if checkpoint_dir is not None:
                model.save(checkpoint_dir)
        else:
            stale += 1
        log.info("epoch %d train %.5f monitor %.5f", epoch, train_loss, monitor)
        if callback is not None:
            callback(epoch, hist)
        if stale >= cfg.early_stop_patience:
            hist.stopped_early = True
            break
    store.load_values(best)
    return hist


@dataclass
class Prediction:
    point: np.ndarray          # (n, tau) median in physical units
    quantiles: np.ndarray      # (n, tau, Q) sorted, physical units
    normalized: np.ndarray     # (n, tau, Q) sorted, normalised units
    outputs: TftOutput | None = None


def _concat_outputs(parts: Sequence[TftOutput]) -> TftOutput:
    return TftOutput(*(np.concatenate([getattr(p, f) for p in parts], axis=0)
                       for f in ("quantiles", "raw_quantiles", "attention", "encoder_weights",
                                 "decoder_weights", "static_weights")))


def predict(model: TemporalFusionTransformer, windows: WindowBatch, norm_stats: NormStats,
            capture: bool = False, batch_size: int = 256) -> Prediction:
    """Median forecast per window in physical units, plus the raw outputs
    when ``capture`` is set."""
    model.check_batch(windows)
    parts = []
    for idx in _batches(len(windows), batch_size, None):
        out, _ = model.forward(windows.take(idx))
        parts.append(out)
    if parts:
        out = _concat_outputs(parts)
    else:
        k, tau = model.config.encoder_length, model.config.decoder_length
        Q, H = model.n_q, model.n_heads
        out = TftOutput(np.zeros((0, tau, Q)), np.zeros((0, tau, Q)), np.zeros((0, H, tau, k + tau)),
                        np.zeros((0, k, len(model.layout.encoder_channels))),
                        np.zeros((0, tau, len(model.layout.decoder_channels))),
                        np.zeros((0, len(model.layout.static_names))))
    q = norm_stats.inverse_target(out.quantiles)
    med = model.config.median_index
    return Prediction(q[..., med], q, out.quantiles, out if capture else None)


# -- interpretation -----------------------------------------------------------

@dataclass
class InterpretationSnapshot:
    site_id: str
    origin: np.datetime64
    attention: np.ndarray       # (k,) head-averaged, encoder-renormalised
    importance: np.ndarray      # (k, m_enc) encoder selection weights
    features: tuple[str, ...]
    decoder_positions: int = 1

    @property
    def encoder_length(self) -> int:
        return self.attention.shape[0]

    @property
    def relative_index(self) -> np.ndarray:
        return np.arange(-self.encoder_length, 0)


def capture_interpretation(outputs: TftOutput, windows: WindowBatch) -> list[InterpretationSnapshot]:
    """One snapshot per window, taken at the first decoder position."""
    k = windows.encoder_length
    if outputs.attention.shape[0] != len(windows):
        raise ValueError("outputs and windows disagree on the number of windows")
    att = outputs.mean_attention[:, 0, :k]
    att = att / att.sum(axis=-1, keepdims=True)
    snaps = []
    for i in range(len(windows)):
        snaps.append(InterpretationSnapshot(
            site_id=str(windows.site_id[i]),
            origin=windows.origin[i],
            attention=att[i].copy(),
            importance=outputs.encoder_weights[i].copy(),
            features=tuple(windows.encoder_channels),
            decoder_positions=outputs.attention.shape[2],
        ))
    return snaps


def _fmt(v: float) -> str:
    return repr(float(v))


def write_snapshots_csv(snapshots: Sequence[InterpretationSnapshot], path) -> None:
    """Columns: site_id, origin, encoder_index, attention, then one column
    per encoder feature weight."""
    if not snapshots:
        Path(path).write_text("site_id,origin,encoder_index,attention\n")
        return
    feats = snapshots[0].features
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["site_id", "origin", "encoder_index", "attention", *feats])
        for s in snapshots:
            if s.features != feats:
                raise ValueError("snapshots carry different feature sets")
            origin = format_timestamp(s.origin)
            for r, rel in enumerate(s.relative_index):
                w.writerow([s.site_id, origin, int(rel), _fmt(s.attention[r]),
                            *(_fmt(v) for v in s.importance[r])])


def read_snapshots_csv(path) -> list[InterpretationSnapshot]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        feats = tuple(header[4:])
        groups: dict[tuple[str, str], list[list[str]]] = {}
        for row in reader:
            groups.setdefault((row[0], row[1]), []).append(row)
    out = []
    for (site, origin), rows in groups.items():
        rows.sort(key=lambda r: int(r[2]))
        out.append(InterpretationSnapshot(
            site_id=site,
            origin=parse_timestamp(origin),
            attention=np.array([float(r[3]) for r in rows]),
            importance=np.array([[float(v) for v in r[4:]] for r in rows]).reshape(len(rows), len(feats)),
            features=feats,
        ))
    return out
