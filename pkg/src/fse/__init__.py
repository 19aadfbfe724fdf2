"""Face shadow removal: mask refinement, coarse removal and attention-based refinement."""
from .errors import (
    ConfigError,
    FseError,
    ImageFormatError,
    NonFiniteLossError,
    NumericError,
    PairingError,
    ShapeError,
    StateError,
)
from .models import FaceShadowEraser, FseConfig, fse_forward, fse_init

__version__ = "0.1.0"
