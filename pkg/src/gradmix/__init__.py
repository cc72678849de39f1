"""Layer-wise gradient mixing for multi-source transfer learning.

Modules: ``tensor_net`` (numpy ConvNet and backprop), ``datasets`` (IDX I/O,
domain shifts, splits), ``mixing`` (weight solver and mixed update),
``pseudolabel`` (ensemble labels for the unlabeled pool), ``trainer``
(baselines, GradMix loop, grid search, pseudo-label pipeline) and ``cli``.
"""

from .config import RunConfig, load_config
from .mixing import AdaptiveLrParams, MixDiagnostics, MixWeights, gradmix_step, lr_scale, solve_layer_weights
from .tensor_net import GradientSet, NetworkParams, backward, forward, init_network

__version__ = "0.1.0"

__all__ = [
    "AdaptiveLrParams",
    "GradientSet",
    "MixDiagnostics",
    "MixWeights",
    "NetworkParams",
    "RunConfig",
    "backward",
    "forward",
    "gradmix_step",
    "init_network",
    "load_config",
    "lr_scale",
    "solve_layer_weights",
]
