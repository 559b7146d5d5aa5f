"""radiobench: synthetic RF localisation scenes, learnt localiser variants,
classical ToA/AoA baselines, and a distribution-shift evaluation harness."""

__version__ = "0.1.0"

from . import errors

__all__ = ["errors", "__version__"]
