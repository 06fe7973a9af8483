"""Quantized clip-floor-shift activations, ANN-to-SNN conversion and a tiny
numpy YOLO-style detector to exercise them."""
from .container import ContainerError, load_network, save_network
from .converter import (
    ConversionReport,
    SurgeryPlan,
    conversion_error_empirical,
    convert,
    layer_conversion_error,
    layer_surgery_experiment,
)
from .data import (
    SHAPE_CLASSES,
    SyntheticScene,
    YoloFormatError,
    YoloSample,
    generate_synthetic_dataset,
    load_yolo_dataset,
    load_yolo_scenes,
    stack_scenes,
    write_yolo_dataset,
)
from .estimator import QCFSActivation, SpikingYoloDetector, TinyYoloDetector
from .graph import (
    DetectionOutput,
    GraphError,
    NetworkGraph,
    SNNRequiredError,
    backward,
    build_tiny_detector,
    decode_detections,
    forward_ann,
    forward_snn,
    forward_train,
)
from .loss import LossWeights, yolo_loss
from .metrics import MetricsReport, average_precision, full_report, iou
from .neuron import IFNeuronState, SpikeTrace, if_init, if_run_constant, if_step, rate_readout
from .qcfs import QCFSParams, qcfs_forward, qcfs_grad_lambda, qcfs_grad_z, qcfs_layer_backward
from .tensor_ops import BatchNormSpec, ConvSpec, ShapeError
from .trainer import TrainConfig, TrainingDivergedError, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "BatchNormSpec",
    "ContainerError",
    "ConversionReport",
    "ConvSpec",
    "DetectionOutput",
    "GraphError",
    "IFNeuronState",
    "LossWeights",
    "MetricsReport",
    "NetworkGraph",
    "QCFSActivation",
    "QCFSParams",
    "SHAPE_CLASSES",
    "SNNRequiredError",
    "ShapeError",
    "SpikeTrace",
    "SpikingYoloDetector",
    "SurgeryPlan",
    "SyntheticScene",
    "TinyYoloDetector",
    "TrainConfig",
    "TrainingDivergedError",
    "YoloFormatError",
    "YoloSample",
    "average_precision",
    "backward",
    "build_tiny_detector",
    "conversion_error_empirical",
    "convert",
    "decode_detections",
    "evaluate",
    "forward_ann",
    "forward_snn",
    "forward_train",
    "full_report",
    "generate_synthetic_dataset",
    "if_init",
    "if_run_constant",
    "if_step",
    "iou",
    "layer_conversion_error",
    "layer_surgery_experiment",
    "load_network",
    "load_yolo_dataset",
    "load_yolo_scenes",
    "qcfs_forward",
    "qcfs_grad_lambda",
    "qcfs_grad_z",
    "qcfs_layer_backward",
    "rate_readout",
    "save_network",
    "stack_scenes",
    "train",
    "write_yolo_dataset",
    "yolo_loss",
]
