"""Implicit occupancy-field segmentation of voxel volumes.

Encode a low-resolution multi-channel volume with a small 3D CNN, query
the resulting feature pyramid at continuous coordinates, and decode
per-point class probabilities with a two-layer MLP, so label grids can be
reconstructed at arbitrary resolution. Ships with a dense per-voxel
baseline sharing the same encoder, a procedural lung-like phantom
generator with complete ground truth, structure-masked Dice metrics, and
bit-exact file formats.
"""

from .baseline import DenseHead, count_head_params, dense_predict, dense_reconstruct, dense_train_step
from .estimators import DenseSegmenter, ImplicitSegmenter
from .metrics import MetricsReport, dice_per_class, evaluate
from .model import (
    FeaturePyramid,
    LossWeights,
    PointFieldNet,
    StepReport,
    count_params,
    encode,
    point_features,
    predict_probs,
    reconstruct,
    train_step,
)
from .phantom import (
    Phantom,
    PhantomConfig,
    RuleReport,
    TubeTree,
    generate_phantom,
    generate_tree,
    generate_veins,
    partition_segments,
    rasterize_tubes,
    synth_image,
    validate_phantom,
)
from .volume import (
    CoordBatch,
    LabelGrid,
    NormCoord,
    Volume,
    nearest_label,
    norm_to_voxel,
    random_coords,
    resample_labels,
    resample_volume,
    trilinear_sample,
    uniform_grid_coords,
)

__version__ = "0.1.0"
