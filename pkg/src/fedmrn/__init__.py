"""Federated learning with masked random noise as the uplink update."""

from .compressors import CodecId, Payload, decompress, payload_bytes
from .data import Dataset, SyntheticSpec, load_csv, make_synthetic
from .federation import FedConfig, RoundMetrics, run_training
from .masking import MaskVector, PmSchedule
from .noise import NoiseSpec
from .partition import Partition
from .rng import RngState

__all__ = [
    "CodecId", "Dataset", "FedConfig", "MaskVector", "NoiseSpec", "Partition", "Payload",
    "PmSchedule", "RngState", "RoundMetrics", "SyntheticSpec", "decompress", "load_csv",
    "make_synthetic", "payload_bytes", "run_training",
]
