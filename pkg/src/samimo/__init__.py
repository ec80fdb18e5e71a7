"""Semantic-aware MIMO physical-layer workbench.

Channel simulation, grant-free activity detection, multi-user CSI feedback and
source/channel-aware precoding, plus the classical baselines they are compared
against.
"""

from samimo.rng import RandomSource

__version__ = "0.1.0"

__all__ = ["RandomSource", "__version__"]
