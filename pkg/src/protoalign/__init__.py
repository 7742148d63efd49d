"""Prototype-based feature alignment for unsupervised cross-modality segmentation.

A numpy-only reverse-mode autodiff core, small convolutional G_S/G_T modules
with translation, segmentation and projection branches, class prototypes,
per-class FIFO dictionaries with a contrastive loss, a synthetic two-domain
benchmark and the training/evaluation pipeline around them.
"""

from .config import Config, load_config
from .trainer import ablate, infer, train, train_step

__version__ = "0.1.0"

__all__ = ["Config", "load_config", "train", "train_step", "infer", "ablate", "__version__"]
