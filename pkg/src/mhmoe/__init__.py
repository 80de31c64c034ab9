"""Multi-head mixture-of-experts laboratory.

Layers and a byte-level LM harness on a small float64 autodiff core, exact
operation/parameter accounting, an SMoE -> MH-MoE parity planner, and ternary
weight quantization.
"""

from .layers import MoEConfig, RoutingDecision, init_params, mhmoe_forward, moe_forward, route_topk
from .parity import (
    CostReport, ParityPlan, count_mhmoe_ops, count_params, count_smoe_ops, solve_parity, verify_parity,
)
from .tensor import OpCounter, Rng, Tensor, backward

__all__ = [
    "CostReport", "MoEConfig", "OpCounter", "ParityPlan", "Rng", "RoutingDecision", "Tensor", "backward",
    "count_mhmoe_ops", "count_params", "count_smoe_ops", "init_params", "mhmoe_forward", "moe_forward",
    "route_topk", "solve_parity", "verify_parity",
]
__version__ = "0.1.0"
