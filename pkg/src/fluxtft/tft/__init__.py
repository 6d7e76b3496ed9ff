"""Temporal Fusion Transformer in numpy with explicit backward passes."""
from .model import ChannelLayout, TemporalFusionTransformer, TftConfig, TftOutput
from .training import (
    InterpretationSnapshot,
    Prediction,
    TrainHistory,
    TrainingDiverged,
    capture_interpretation,
    evaluate_loss,
    predict,
    read_snapshots_csv,
    train,
    write_snapshots_csv,
)


def build_model(config: TftConfig, windows, norm_stats) -> TemporalFusionTransformer:
    """Construct a model whose parameter shapes follow the window layout."""
    layout = ChannelLayout.from_batch(windows, norm_stats.vocab_sizes(windows.static_cat_names))
    return TemporalFusionTransformer(config, layout)


def tft_forward(model: TemporalFusionTransformer, batch) -> TftOutput:
    return model.forward(batch)[0]
