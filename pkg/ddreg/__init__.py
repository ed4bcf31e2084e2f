"""
ddreg: deep deformable registration trained on synthetic TPS deformations.
"""

from ddreg.config import AugmentConfig, ExperimentConfig, NetConfig, TrainConfig
from ddreg.volume import DisplacementField, Grid, LabelMap, Volume

__all__ = [
    "AugmentConfig",
    "DisplacementField",
    "ExperimentConfig",
    "Grid",
    "LabelMap",
    "NetConfig",
    "TrainConfig",
    "Volume",
]

try:
    from ._version import __version__
except ImportError:
    __version__ = "unknown"
