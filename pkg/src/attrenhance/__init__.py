"""Person-attribute recognition on synthetic data, with adversarial
de-occlusion and super-resolution front ends and a dispatch pipeline."""

__version__ = "0.1.0"

from .config import RunConfig, load_config
from .errors import ConfigError, SizeError, VerificationError
from .metrics import MetricsReport, evaluate
from .synthgen import AttributeSchema, Corruption, ImageSample

__all__ = [
    "RunConfig", "load_config",
    "ConfigError", "SizeError", "VerificationError",
    "MetricsReport", "evaluate",
    "AttributeSchema", "Corruption", "ImageSample",
    "__version__",
]
