"""trifuse: linear, tensor and polynomial fusion classifiers for tri-modal
EEG / oxy-NIRS / deoxy-NIRS signals, with CP-factorized weight tensors, a
small tape-based autodiff engine, 1-D CNN feature extractors and a
train / evaluate / cross-validate pipeline."""

__version__ = "0.1.0"

from . import autodiff, config, data, fusion, models, ops, tensor, train, verify  # noqa: F401
from .fusion import FusionSpec, fuse, param_count, reconstruct_full  # noqa: F401
