"""Size-flexible vehicle re-identification models with global and
per-kernel local attention, plus training, ranking evaluation, and
size/speed/density instrumentation.
"""

from .models import ModelConfig, SafrModel, build_model, describe_model

__all__ = ["ModelConfig", "SafrModel", "build_model", "describe_model"]
__version__ = "0.1.0"
