"""Patch-based 3D normalizing flow for unsupervised CT anomaly detection."""

from .flow import FlowConfig, Glow3D
from .pipeline import PipelineConfig, run_patient
from .training import TrainConfig, train
from .volume import Mask, ValueSpace, Volume, read_mask, read_volume, write_mask, write_volume

__version__ = "0.1.0"

__all__ = [
    "FlowConfig",
    "Glow3D",
    "Mask",
    "PipelineConfig",
    "TrainConfig",
    "ValueSpace",
    "Volume",
    "read_mask",
    "read_volume",
    "run_patient",
    "train",
    "write_mask",
    "write_volume",
]
