from flownull.flow.condnet import CondNet, UNet
from flownull.flow.layers import ActNorm, AffineCoupling, Orth1x1, merge, split, squeeze, unsqueeze
from flownull.flow.model import (
    ConditionalFlow,
    FlowModel,
    ModelConfig,
    condnet_features,
    flow_forward_sample,
    flow_inverse_density,
)

__all__ = [
    "ActNorm", "AffineCoupling", "CondNet", "ConditionalFlow", "FlowModel", "ModelConfig",
    "Orth1x1", "UNet", "condnet_features", "flow_forward_sample", "flow_inverse_density",
    "merge", "split", "squeeze", "unsqueeze",
]
