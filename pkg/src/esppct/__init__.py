"""Two-stage point-cloud sequence recognition with exact cost accounting.

Stage one scores every point with neighborhood vector attention, pools the
scores over a voxel grid, and selects the most semantic region; stage two
keeps the top-K points of that region's neighborhood and classifies the
per-frame representations with a recurrent head.
"""

from .pointcloud import (
    Frame,
    LabeledDataset,
    OCCLUSION_PRESETS,
    OcclusionModel,
    Point,
    Sequence,
    SynthConfig,
    apply_occlusion,
    load_dataset,
    load_sequence,
    synth_generate,
    write_dataset,
    write_sequence,
)
from .validation import DataError, NumericError

__version__ = "0.1.0"

__all__ = [
    "Frame",
    "LabeledDataset",
    "OCCLUSION_PRESETS",
    "OcclusionModel",
    "Point",
    "Sequence",
    "SynthConfig",
    "apply_occlusion",
    "load_dataset",
    "load_sequence",
    "synth_generate",
    "write_dataset",
    "write_sequence",
    "DataError",
    "NumericError",
    "__version__",
]
