"""Sparse-voxel semantic segmentation with sensor-aware geometry feature pools.

The voxel backbone is enriched per stage by cross-attention into bounded
pools of point-level geometric features. During training the pools are
populated by a voxel-guided dynamic point network running on local patches;
at inference the pools are frozen and the point branch is never executed.
"""

__version__ = "0.1.0"

from .instrumentation import counters

__all__ = ["counters", "__version__"]
