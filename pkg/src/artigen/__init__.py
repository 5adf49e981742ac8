"""Few-shot articulated mesh generation via hierarchical cage deformation."""

from .basis import BasisSet, FitConfig, chamfer_distance, fit_bases, fit_gmm
from .cage import Cage, build_cage, cage_template, mean_value_coordinates
from .mesh import (
    ArticulatedObject,
    Joint,
    Part,
    TriMesh,
    load_manifest,
    load_obj,
    save_obj,
)
from .physics import CollisionReport, SimConfig, correct_shape, physics_losses
from .sync import SyncState, synchronize

__version__ = "0.1.0"

__all__ = [
    "ArticulatedObject",
    "BasisSet",
    "Cage",
    "CollisionReport",
    "FitConfig",
    "Joint",
    "Part",
    "SimConfig",
    "SyncState",
    "TriMesh",
    "build_cage",
    "cage_template",
    "chamfer_distance",
    "correct_shape",
    "fit_bases",
    "fit_gmm",
    "load_manifest",
    "load_obj",
    "mean_value_coordinates",
    "physics_losses",
    "save_obj",
    "synchronize",
    "__version__",
]
