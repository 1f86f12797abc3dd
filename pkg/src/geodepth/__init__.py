"""Geometry-aware depth completion at desk scale.

Sparse metric depth is lifted to a 3D point cloud, embedded per point by
stacked dynamic-graph edge convolutions, scattered back onto the pixel
grid, and fused with color features by a small encoder-decoder to predict
dense depth. Everything runs on a from-scratch numpy tensor engine with
reverse-mode differentiation, so gradients are checkable end to end.
"""

from .autodiff import (
    BatchNormState,
    Parameter,
    Tape,
    Tensor,
    adam_step,
    add,
    backward,
    batch_norm,
    concat,
    conv2d,
    conv_transpose2d,
    default_dtype,
    gather_rows,
    kaiming_uniform,
    linear,
    max_over_neighbors,
    mse_masked,
    precision,
    relu,
    reshape,
    scale,
    scatter_rows_to_grid,
    set_debug,
    set_default_dtype,
    sub,
    transpose,
    weighted_sum,
    zero_grads,
)
from .camera import (
    CameraIntrinsics,
    DepthMap,
    PointSet,
    SparseFeatureMap,
    backproject,
    project,
    read_intrinsics,
    sample_farthest,
    sample_random,
    scatter_features,
    write_intrinsics,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .config import TrainConfig, default_configs, load_config
from .dataio import (
    ManifestEntry,
    SceneSpec,
    generate_corpus,
    hflip_sample,
    load_sample,
    read_depth_png,
    read_manifest,
    read_rgb_png,
    sparsify,
    synth_scene,
    write_depth_png,
    write_manifest,
    write_rgb_png,
)
from .embedding import (
    DgrConfig,
    DgrModule,
    EdgeConvLayer,
    GeometricEmbedding,
    dgr_embed,
    edgeconv_forward,
    embed_to_map,
)
from .errors import (
    ConfigError,
    ContractError,
    DataFormatError,
    EmptyInputError,
    ShapeError,
)
from .graph import EdgePair, NeighborIndex, gather_edges, knn_graph, pairwise_sq_dist
from .metrics import MetricReport, aggregate, evaluate, report_lines, report_record
from .network import CompletionNet, NetConfig, train_step
from .runner import evaluate_model, load_samples, rmse_on, train, write_loss_log

__version__ = "0.1.0"
