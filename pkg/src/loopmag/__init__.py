"""Closed-loop spin-ensemble magnetometry: design, simulation, identification."""
from .errors import LoopmagError
from .tfcore import RationalTF, S, bode, tf_evaluate

__all__ = ["LoopmagError", "RationalTF", "S", "bode", "tf_evaluate"]
__version__ = "0.1.0"
