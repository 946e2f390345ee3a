"""Coarse-to-fine 2.5D kidney and kidney-tumor segmentation on a numpy autograd core."""
from .estimators import KidneyTumorSegmenter, SlabSegmenter
from .evaluation import DiceReport, dice, evaluate_case
from .networks import InitSpec, ResNetSpec, ResUNetSpec, build_res_net, build_res_unet
from .pipeline import PipelineConfig, ensemble, filter_small_components, predict_volume
from .preprocess import VolumePreprocessor
from .scale import DESK, FULL, Scale
from .training import PRESETS, TrainConfig, fit_network, preset, train
from .volume_io import (LabelVolume, Volume, generate_phantom, load_checkpoint, read_volume,
                        save_checkpoint, write_volume)

__version__ = "0.1.0"

__all__ = [
    "KidneyTumorSegmenter", "SlabSegmenter", "DiceReport", "dice", "evaluate_case",
    "InitSpec", "ResNetSpec", "ResUNetSpec", "build_res_net", "build_res_unet",
    "PipelineConfig", "ensemble", "filter_small_components", "predict_volume",
    "VolumePreprocessor", "DESK", "FULL", "Scale", "PRESETS", "TrainConfig", "fit_network",
    "preset", "train", "LabelVolume", "Volume", "generate_phantom", "load_checkpoint",
    "read_volume", "save_checkpoint", "write_volume",
]
