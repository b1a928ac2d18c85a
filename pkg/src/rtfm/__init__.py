"""Weakly supervised video anomaly detection by learned feature magnitudes.

Trains a temporal feature-magnitude model over precomputed snippet
features: a multi-scale temporal network maps each video's (T, D) feature
matrix to learned features whose top-k mean magnitude separates abnormal
from normal videos, and a snippet classifier scores each snippet. The
package bundles the tensor engine, model, losses, trainer, an expected
separability simulator, synthetic data tooling, evaluation metrics and a
CLI.
"""

__version__ = "0.1.0"
