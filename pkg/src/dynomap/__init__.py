"""Learned 2D Gaussian-rendered image layouts for tabular classification."""

__version__ = "0.1.0"

from .dataset import FeatureMatrix, HVGSelector, Standardizer, load_table  # noqa: E402
from .estimator import DynomapClassifier  # noqa: E402
from .exceptions import DynomapError, InputError, NumericalError  # noqa: E402
from .trainer import TrainConfig, cross_validate, train  # noqa: E402

__all__ = [
    "DynomapClassifier",
    "DynomapError",
    "FeatureMatrix",
    "HVGSelector",
    "InputError",
    "NumericalError",
    "Standardizer",
    "TrainConfig",
    "cross_validate",
    "load_table",
    "train",
]
