"""Offline normalization layers (BN, MABN, PN*, UN) with hand-derived
backward passes, norm-into-linear fusion and desk-scale diagnostics."""

from .normcore import freeze_statistics, inference_forward, train_backward, train_forward
from .state import ForwardCache, NormLayerState, NormMethodSpec

__version__ = "0.1.0"

__all__ = [
    "ForwardCache", "NormLayerState", "NormMethodSpec",
    "freeze_statistics", "inference_forward", "train_backward", "train_forward",
]
