"""Weight-level fingerprints of transformer checkpoints.

Two fingerprints are computed per model: the normalized per-projection
standard-deviation vector, and the clustering vector obtained by K-Means over
normalized top singular values of every projection matrix. Both also apply to
LoRA adapters through their composed B·A deltas.
"""

__version__ = "0.1.0"

from .checkpoint import CheckpointIndex, TensorMatrix, TensorMeta, load_matrix, open_checkpoint, save_checkpoint
from .clustering import (
    ClusterModel,
    ClusteringVector,
    LabelGrid,
    ScatterProjection,
    align_labels,
    clustering_vector,
    heatmap_grid,
    kmeans_fit,
    pca_project,
)
from .errors import WeightprintError
from .lora import LoraAdapterPair, collect_lora_pairs, compose_delta
from .report import (
    ComparisonResult,
    Fingerprint,
    Metric,
    Parameters,
    build_fingerprint,
    build_lora_fingerprint,
    build_model_fingerprint,
    compare_fingerprints,
    fingerprint_paths,
    parse,
    serialize,
)
from .spectral import ProfileNormalization, ProfileSet, SingularProfile, build_profile_set, normalize_profile, top_singular_values
from .stats import GroupStats, StdNormalization, StdVector, accumulate_stats, sample_for_plot, std_vector
from .taxonomy import (
    KINDS,
    PRESETS,
    ArchPreset,
    ModelLayout,
    ProjectionKind,
    classify_tensor_name,
    collect_layout,
    resolve_preset,
)

__all__ = [name for name in dir() if not name.startswith("_")]
