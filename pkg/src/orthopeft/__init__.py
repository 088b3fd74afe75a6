"""Task-specific adapters with orthogonal subspace decoupling on a numpy autodiff engine."""
from .errors import ConfigurationError, DimensionError, FormatError, InputError, NumericError

TASKS = ("steatosis", "ballooning", "inflammation")
NUM_CLASSES = (4, 3, 4)

__version__ = "0.1.0"
