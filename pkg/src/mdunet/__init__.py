"""Dense U-Net segmentation toolkit with from-scratch autodiff and
incremental power-of-two weight quantization."""

from .checkpoint import (
    CheckpointError,
    load_checkpoint,
    load_into_graph,
    save_checkpoint,
    save_graph,
)
from .config import ConfigError, parse_config
from .data import DatasetSpec, SyntheticSpec, load_dataset, synth_dataset
from .estimator import MDUNetSegmenter
from .gradcheck import grad_check, max_rel_error
from .graph import (
    ArchConfig,
    GraphError,
    GraphNode,
    ModelGraph,
    add_dense_cross,
    add_dense_decoder,
    add_dense_encoder,
    build_mdunet,
    build_unet,
    export_dot,
    forward,
    fuse_H,
    param_count,
    rescale_to_level,
    run_backward,
    run_forward,
    shape_infer,
)
from .quantize import (
    QuantBounds,
    QuantConfig,
    QuantError,
    QuantState,
    apply_quant_step,
    codebook,
    compute_bounds,
    partition_weights,
    quantize_value,
    run_inq_schedule,
)
from .tensor import ConvSpec, Parameter, Tensor, TensorError
from .training import (
    Metrics,
    TrainConfig,
    TrainError,
    evaluate,
    lr_at,
    metrics_pair,
    sgd_step,
    train_loop,
)

__version__ = "0.1.0"

__all__ = [
    "ArchConfig", "CheckpointError", "ConfigError", "ConvSpec", "DatasetSpec",
    "GraphError", "GraphNode", "MDUNetSegmenter", "Metrics", "ModelGraph",
    "Parameter", "QuantBounds", "QuantConfig", "QuantError", "QuantState",
    "SyntheticSpec", "Tensor", "TensorError", "TrainConfig", "TrainError",
    "add_dense_cross", "add_dense_decoder", "add_dense_encoder",
    "apply_quant_step", "build_mdunet", "build_unet", "codebook",
    "compute_bounds", "evaluate", "export_dot", "forward", "fuse_H",
    "grad_check", "load_checkpoint", "load_dataset", "load_into_graph",
    "lr_at", "max_rel_error", "metrics_pair", "param_count", "parse_config",
    "partition_weights", "quantize_value", "rescale_to_level", "run_backward",
    "run_forward", "run_inq_schedule", "save_checkpoint", "save_graph",
    "sgd_step", "shape_infer", "synth_dataset", "train_loop",
]
