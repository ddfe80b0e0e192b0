"""MRLF: location inference for single social posts from text, hashtags and images."""

from .tensor import NonFiniteError, Tensor, backward, no_grad
from .data import (DatasetError, LocationTable, PostRecord, filter_dataset, haversine_km,
                   load_and_validate, stratified_split, write_dataset)
from .text import Vocabulary, build_vocab, encode
from .image import ImageRecord, aggregate, filter_noisy
from .model import ModelConfig, forward, init_params
from .synth import SynthConfig, synth_generate
from .train import Metrics, TrainConfig, ablate, evaluate, fit, train

__version__ = "0.1.0"

__all__ = [
    "NonFiniteError", "Tensor", "backward", "no_grad",
    "DatasetError", "LocationTable", "PostRecord", "filter_dataset", "haversine_km",
    "load_and_validate", "stratified_split", "write_dataset",
    "Vocabulary", "build_vocab", "encode",
    "ImageRecord", "aggregate", "filter_noisy",
    "ModelConfig", "forward", "init_params",
    "SynthConfig", "synth_generate",
    "Metrics", "TrainConfig", "ablate", "evaluate", "fit", "train",
]
