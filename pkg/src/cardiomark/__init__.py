"""Heat-map CNN landmark detection for cardiac MR images."""

__version__ = "0.1.0"

from . import autodiff, dataio, heatmap, kernels, measure, phantom, preprocess, trainer, unet
from .heatmap import LandmarkSet, HeatmapStack, encode, decode, to_original_frame
from .preprocess import Image
from .unet import ArchConfig, UNet, Checkpoint, save_checkpoint, load_checkpoint

__all__ = [
    "autodiff", "dataio", "heatmap", "kernels", "measure", "phantom",
    "preprocess", "trainer", "unet",
    "LandmarkSet", "HeatmapStack", "encode", "decode", "to_original_frame",
    "Image", "ArchConfig", "UNet", "Checkpoint",
    "save_checkpoint", "load_checkpoint",
]
