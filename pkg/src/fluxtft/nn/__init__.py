"""Numerical substrate for the temporal fusion transformer."""
from .attention import (
    causal_mask,
    multihead_attention,
    multihead_attention_backward,
    scaled_dot_attention,
    scaled_dot_attention_backward,
)
from .gradcheck import GradCheckReport, check_function, gradient_check, relative_error
from .losses import quantile_loss
from .lstm import lstm_backward, lstm_cell_backward, lstm_cell_step, lstm_forward
from .params import NonFiniteGradient, ParamStore, adam_step
from .primitives import *  # noqa: F401,F403
from .primitives import ShapeError
