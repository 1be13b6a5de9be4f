"""Severity-aware multiple instance learning toolkit."""
from .hierarchy import Hierarchy, Priority
from .synth import Bag

__version__ = "0.1.0"
__all__ = ["Hierarchy", "Priority", "Bag", "__version__"]
