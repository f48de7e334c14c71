"""Vascular tree extraction from 3D scalar volumes.

The pipeline synthesizes a vesselness map and a voxel-wise SPD tensor field
with a steerable curvilinear filterbank, then solves a multi-source
anisotropic fast-marching propagation whose region collisions assemble an
acyclic geodesic tree. Phantom generators and voxel-wise metrics make every
stage checkable without external data.
"""

from .volume import (
    ScalarVolume,
    TensorFieldLE,
    EigenDecomp3,
    eig_sym3,
    spd_log,
    spd_exp,
    resample,
    distance_transform,
)
from .volio import read_volume, write_volume, read_tensor_field, write_tensor_field
from .kernels import Dictionary, KernelConfig, default_dictionary
from .filtering import (
    OrientationSet,
    SeedSet,
    ScaleStack,
    icosphere_bases,
    tubular_saliency,
    detect_seeds,
    synthesize_scale,
    multiscale_synthesize,
)
from .marching import (
    MetricField,
    FrontState,
    align_seeds,
    init_front,
    propagate_until_collision,
    trace_path,
    merge_regions,
    extract_tree,
)
from .tree import GeodesicTree, Path, TreeEdge, TreeNode, save_tree, load_tree
from .phantoms import (
    CenterlineGT,
    NoiseSpec,
    NOISE_LIGHT,
    NOISE_HEAVY,
    PHANTOM_KINDS,
    make_phantom,
    generate_tree_volume,
    degrade,
    centerline_to_tree,
    centerline_from_tree,
)
from .metrics import TreeMetrics, tree_metrics, metrics_csv_header, metrics_csv_row
from .config import PipelineConfig, ConfigError, load_config, default_config_yaml

__version__ = "0.1.0"
