"""Data ingestion, synthetic generators and artifact export."""
from .dataset import (DatasetBuildError, DatasetManifest, RunRecord, build_dataset, hash_inputs,
                      load_cloudset, load_truth, save_cloudset)
from .export import export_family_sweep, export_prototypes, family_sweep, model_coordinates
from .meshio import PALETTE, export_ply, label_colors, load_mesh, load_point_cloud, parse_off, read_ply
from .synth import SynthSpec, clean_sample, synth_generate

__all__ = [
    "DatasetBuildError", "DatasetManifest", "RunRecord", "build_dataset", "hash_inputs", "load_cloudset",
    "load_truth", "save_cloudset", "export_family_sweep", "export_prototypes", "family_sweep",
    "model_coordinates", "PALETTE", "export_ply", "label_colors", "load_mesh", "load_point_cloud",
    "parse_off", "read_ply", "SynthSpec", "clean_sample", "synth_generate",
]
