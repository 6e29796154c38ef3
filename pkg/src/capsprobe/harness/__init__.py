from .affine import AffineParams, apply_affine, default_affine_grid
from .bench import affine_benchmark, patch_benchmark
from .data import Dataset, IdxFormatError, LabeledImage, load_idx, synth_shapes, write_idx
from .report import Report, parse_report

__all__ = [
    "AffineParams", "Dataset", "IdxFormatError", "LabeledImage", "Report", "affine_benchmark",
    "apply_affine", "default_affine_grid", "load_idx", "parse_report", "patch_benchmark",
    "synth_shapes", "write_idx",
]
