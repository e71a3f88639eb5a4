"""Evenly cascaded convolutional networks on a small numpy autograd engine."""

__version__ = "0.1.0"

from .blocks import BlockKind, BlockSpec, block_forward, block_param_count, init_block_params
from .cascade import (
    ECN,
    CascadeConfig,
    FeatureState,
    NetworkPlan,
    audit_params,
    cascade_layer_forward,
    network_forward,
    plan_network,
)
from .gradcheck import gradcheck
from .tensor import Tensor, backward, precision

__all__ = [
    "BlockKind",
    "BlockSpec",
    "CascadeConfig",
    "ECN",
    "FeatureState",
    "NetworkPlan",
    "Tensor",
    "audit_params",
    "backward",
    "block_forward",
    "block_param_count",
    "cascade_layer_forward",
    "gradcheck",
    "init_block_params",
    "network_forward",
    "plan_network",
    "precision",
]
