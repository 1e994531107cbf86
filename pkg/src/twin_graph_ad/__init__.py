"""Multi-modal twin-graph anomaly detection for microservice telemetry.

Metrics, logs and traces are fused into one graph per timestamp; a
transformer with spatial, temporal and cross attention reconstructs the last
graph of each sliding window and a small head scores every instance.
"""
from .kernels import BACKEND
from .network import ModelConfig, TwinGraphModel
from .synth import SynthConfig, generate
from .training import LossConfig, train

__all__ = ["BACKEND", "LossConfig", "ModelConfig", "SynthConfig", "TwinGraphModel", "generate", "train"]
__version__ = "0.1.0"
