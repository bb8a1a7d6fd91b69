"""Federated-learning simulator with soft-cluster update compression."""
from .codec import (
    CODECS,
    Codebook,
    CodecParams,
    EmConfig,
    compress,
    compression_loss,
    decompress,
    fit_centroids,
    quantize_stochastic,
)
from .config import ExperimentConfig
from .fedsim import Simulation, run_training
from .payload import decode, encode, measured_rate, rate_bmucsc, rate_mucsc

__all__ = [
    "CODECS",
    "Codebook",
    "CodecParams",
    "EmConfig",
    "ExperimentConfig",
    "Simulation",
    "compress",
    "compression_loss",
    "decode",
    "decompress",
    "encode",
    "fit_centroids",
    "measured_rate",
    "quantize_stochastic",
    "rate_bmucsc",
    "rate_mucsc",
    "run_training",
]
