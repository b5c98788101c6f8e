"""Probability-path distillation of transformer backbones and calibration metrics."""
from .backbone import AttentionConfig, Backbone, BackboneConfig, backbone_forward, init_backbone
from .calibrate import CalibrationReport, PredictionSet, predict_calibrated
from .distill import DistillConfig, LossWeights, distill_train, kl_gaussian, vlb_gap
from .kernelnet import KernelConfig, KernelParams, generate, init_kernel, kernel_forward
from .pathify import GaussianTransition, ProbabilityPath, repartition, simulate_path
from .tensor import Tensor

__version__ = "0.1.0"
