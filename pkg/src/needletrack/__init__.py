"""Needle-tip tracking on synthetic ultrasound sequences.

A self-contained stack: a reverse-mode autodiff engine over dense numpy
arrays, selective-scan state-space kernels, a register mechanism that
distills per-frame descriptors into a fixed-capacity bank, diversity and
localization losses, an online tracker, a synthetic sequence generator with
exact ground truth, and a CLI for training, evaluation, and benchmarking.
"""

__version__ = "0.1.0"

from .autodiff import DiffArray, grad_check, no_grad
from .losses import RdLossConfig, TrackingTarget, rd_loss, tracking_loss
from .metrics import EvalReport, metrics_compute
from .registers import RegisterBank, RegisterTemplate, extract, retrieve
from .ssm import MambaBlockParams, SsmParams, discretize, mamba_block
from .synthdata import MotionConfig, RenderConfig, generate_sequence
from .tracker import Prediction, TrackerConfig, TrackerModel, TrackerState, track_step, tracker_init
from .training import RunConfig, evaluate, train

__all__ = [
    "DiffArray", "grad_check", "no_grad",
    "RdLossConfig", "TrackingTarget", "rd_loss", "tracking_loss",
    "EvalReport", "metrics_compute",
    "RegisterBank", "RegisterTemplate", "extract", "retrieve",
    "MambaBlockParams", "SsmParams", "discretize", "mamba_block",
    "MotionConfig", "RenderConfig", "generate_sequence",
    "Prediction", "TrackerConfig", "TrackerModel", "TrackerState",
    "track_step", "tracker_init",
    "RunConfig", "evaluate", "train",
    "__version__",
]
