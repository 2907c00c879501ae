"""Structured channel pruning with polarizing gates.

Trainable per-channel gates drift to exact zero or toward one during
training; zero-gated channels are removed and surviving gates are absorbed
into the succeeding kernels without changing network outputs.  The package
bundles a small float64 autodiff engine, a gated network graph, an exact
bilinear MAC model, the proximal optimizer that drives polarization, the
pruning surgery, and a CLI harness.
"""

from .autodiff import Tape, Tensor, backward, gate_grad, gate_value, zero_grad
from .errors import (
    ConfigError,
    GraphInvariantError,
    NumericsError,
    PolargateError,
    ShapeMismatchError,
)
from .network import (
    GateVector,
    LayerSpec,
    NetworkGraph,
    attach_gates,
    init_params,
    zero_gate_count,
)
from .optimizer import (
    EpsilonSchedule,
    ProxConfig,
    epsilon_step,
    loss_step,
    prox_step,
    soft_threshold,
    solve_bilinear_l0,
)
from .pruner import PruneReport, absorb_and_remove, consistency_check
from .resource import (
    ResourceModel,
    derive_coefficients,
    flops_of_counts,
    flops_of_gates,
)

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "zero_grad",
    "gate_value",
    "gate_grad",
    "LayerSpec",
    "NetworkGraph",
    "GateVector",
    "attach_gates",
    "init_params",
    "zero_gate_count",
    "ResourceModel",
    "derive_coefficients",
    "flops_of_counts",
    "flops_of_gates",
    "ProxConfig",
    "EpsilonSchedule",
    "soft_threshold",
    "solve_bilinear_l0",
    "prox_step",
    "loss_step",
    "epsilon_step",
    "PruneReport",
    "absorb_and_remove",
    "consistency_check",
    "PolargateError",
    "ShapeMismatchError",
    "GraphInvariantError",
    "ConfigError",
    "NumericsError",
    "__version__",
]
