"""Causal fair metrics: SCM tooling, metric learning and fair classifiers."""

from .metric import BaseMetric, OracleMetric, PcpBall
from .scm import BUILTINS, Scm

__all__ = ["BUILTINS", "BaseMetric", "OracleMetric", "PcpBall", "Scm"]
__version__ = "0.1.0"
