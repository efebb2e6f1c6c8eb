"""Detail-enhanced convolution, content-guided attention and a dehazing
network built from them, on a small numpy autodiff core."""

from deanet.attention import CGAParams, cga
from deanet.deconv import DEConvParams, FusedKernel, deconv_forward_fused, deconv_forward_unfused, reparameterize
from deanet.network import NetworkConfig, NetworkParams, TINY_CONFIG, dea_net_forward, fuse_network, init_params
from deanet.tensor import ConvSpec, DimensionError, NumericError, Tape, Tensor, backward

__version__ = "0.1.0"

__all__ = [
    "CGAParams",
    "ConvSpec",
    "DEConvParams",
    "DimensionError",
    "FusedKernel",
    "NetworkConfig",
    "NetworkParams",
    "NumericError",
    "TINY_CONFIG",
    "Tape",
    "Tensor",
    "backward",
    "cga",
    "dea_net_forward",
    "deconv_forward_fused",
    "deconv_forward_unfused",
    "fuse_network",
    "init_params",
    "reparameterize",
]
