"""Illuminant estimation from log-chroma and edge histograms with a small dense attention network."""

from .chroma import HistogramGeometry, illuminant_to_uv, uv_to_illuminant
from .edges import BEST_SIGMA, edge_augment
from .evalkit import angular_error, summarize
from .imaging import CANONICAL, Illuminant, LinearImage
from .network import ModelConfig, ModelParams
from .pipeline import Sample, SyntheticSceneConfig, TrainConfig

__version__ = "0.1.0"
