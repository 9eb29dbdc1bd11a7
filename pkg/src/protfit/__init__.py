"""Multi-scale (sequence, structure, surface) protein fitness modeling."""

__version__ = "0.1.0"

from .errors import DataError, NumericsError, ProtfitError, UsageError
from .io import AssayTable, MutationSet, Protein, ResidueEmbeddings
from .geometry import RbfConfig, SpatialGraph
from .surface import SurfaceConfig, SurfacePointCloud
from .gvp import FitnessModel, ModelConfig

__all__ = [
    "AssayTable", "DataError", "FitnessModel", "ModelConfig", "MutationSet",
    "NumericsError", "Protein", "ProtfitError", "RbfConfig",
    "ResidueEmbeddings", "SpatialGraph", "SurfaceConfig", "SurfacePointCloud",
    "UsageError", "__version__",
]
