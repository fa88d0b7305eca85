"""Point-cloud clustering and reconstruction with learned linear shape
families, aligned by predicted affine transforms."""
from .errors import (FormatError, InvalidGraphError, InvalidInputError, LinShapeError, NumericError, ParseError,
                     StaleTapeError)
from .geometry import (AffineTransform, PointCloud, TriMesh, apply_transform, chamfer, chamfer_indexed,
                       chamfer_with_correspondence, kmeanspp_seed, random_z_rotation, sample_mesh_surface)
from .netheads import TransformFamily, decode_transform
from .shapebank import ModelBank, Stage, assign_best, reassignment_clone, reconstruct
from .trainer import TrainConfig, compute_bic, train

__version__ = "0.1.0"

__all__ = [
    "FormatError", "InvalidGraphError", "InvalidInputError", "LinShapeError", "NumericError", "ParseError",
    "StaleTapeError", "AffineTransform", "PointCloud", "TriMesh", "apply_transform", "chamfer", "chamfer_indexed",
    "chamfer_with_correspondence", "kmeanspp_seed", "random_z_rotation", "sample_mesh_surface", "TransformFamily",
    "decode_transform", "ModelBank", "Stage", "assign_best", "reassignment_clone", "reconstruct", "TrainConfig",
    "compute_bic", "train",
]
