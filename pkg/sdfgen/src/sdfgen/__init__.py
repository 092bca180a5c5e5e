"""Latent auto-decoder SDF training and portable weight export."""

from .export import export_weights, weights_to_bytes
from .shapes import (ShapeSpec, default_corpus, outline_from_csv,
                     regular_polygon, sample_sdf, signed_distance, square,
                     superellipse)
from .training import TrainConfig, TrainResult, train

__version__ = "0.1.0"
