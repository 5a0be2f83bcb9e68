"""Gated axial-attention segmentation on a small reverse-mode autodiff core."""

from .attention import (
    AxialAttentionLayer,
    Axis,
    Full2DAttentionLayer,
    axial_attention,
    full_attention_2d,
    full_attention_2d_relpos,
    gated_axial_attention,
    receptive_field_probe,
)
from .model import SegModel, SegModelConfig, build, load_checkpoint, save_checkpoint
from .tensor import Graph, Parameter, Tensor

__version__ = "0.1.0"
