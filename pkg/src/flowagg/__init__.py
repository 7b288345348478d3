"""Scene-flow motion aggregation for occluded point clouds.

The core idea: a point whose counterpart is missing in the next frame
carries no usable cross-frame motion evidence, but points with similar
context descriptors usually move consistently. This package rebuilds
motion features at such points by attending over semantically similar
points, both within a local k-NN graph and across the whole cloud, and
applying a gated residual correction.

Everything is float64 numpy under the hood, with a small reverse-mode
tape so the module can be trained and gradient-checked at desk scale.
"""

__version__ = "0.1.0"

from . import aggregator, containers, metrics, rng, scenegen, spatial, tensor, train
from .config import RunConfig, parse_config, parse_config_file, render_config

__all__ = [
    "aggregator",
    "containers",
    "metrics",
    "rng",
    "scenegen",
    "spatial",
    "tensor",
    "train",
    "RunConfig",
    "parse_config",
    "parse_config_file",
    "render_config",
]
