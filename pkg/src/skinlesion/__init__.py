"""Skin-lesion classification from scratch: preprocessing, segmentation, balancing, CNNs, cross-validation."""

from .config import RunConfig
from .errors import SkinLesionError
from .models import CLASS_NAMES, build_model, build_model1, build_model2_dualpath, build_model2_onepath
from .tensor import Tensor, seeded_rng

__all__ = [
    "CLASS_NAMES",
    "RunConfig",
    "SkinLesionError",
    "Tensor",
    "build_model",
    "build_model1",
    "build_model2_dualpath",
    "build_model2_onepath",
    "seeded_rng",
]
__version__ = "0.1.0"
