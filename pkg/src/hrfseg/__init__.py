"""Desk-scale semantic segmentation toolkit for hyperreflective foci in
retinal OCT scans: a small autodiff tensor core, three encoder-decoder
architectures, cross-entropy and smooth-Dice objectives, an OCT
preprocessing/patching pipeline with a synthetic phantom generator, Adam
training with best-validation checkpointing, and imbalance-aware
evaluation (DSC, precision-recall/AP, AUC)."""

__version__ = "0.1.0"

from .models import ArchConfig, Model, build_model
from .tensor import ConvSpec, Tensor

__all__ = ["ArchConfig", "ConvSpec", "Model", "Tensor", "build_model", "__version__"]
