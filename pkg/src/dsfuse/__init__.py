"""Two-branch lesion segmentation with Dempster-Shafer evidence fusion."""

from .dst import BinaryMass, combine, mass_from_prob, prob_from_mass
from .errors import (
    ConflictError,
    DegenerateInputError,
    DomainError,
    DSFuseError,
    FormatError,
    GenerationError,
    NumericalError,
    ShapeError,
    UsageError,
)
from .fusion import baseline_fuse, binarize, dempster_fuse, dempster_fuse_backward, fuse_volumes
from .losses import LossWeights, dice_loss, metrics, mse_loss, multitask_loss
from .volume import Modality, Volume, load_volume, resize_trilinear, save_volume, standardize

__version__ = "0.1.0"

__all__ = [
    "BinaryMass", "ConflictError", "DSFuseError", "DegenerateInputError", "DomainError",
    "FormatError", "GenerationError", "LossWeights", "Modality", "NumericalError", "ShapeError",
    "UsageError", "Volume", "baseline_fuse", "binarize", "combine", "dempster_fuse",
    "dempster_fuse_backward", "dice_loss", "fuse_volumes", "load_volume", "mass_from_prob",
    "metrics", "mse_loss", "multitask_loss", "prob_from_mass", "resize_trilinear", "save_volume",
    "standardize",
]
