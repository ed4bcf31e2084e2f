"""
Numpy autodiff U-Net
"""

from ddreg.nn.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from ddreg.nn.functional import concat, conv3d, leaky_relu, maxpool3d, upsample_nn
from ddreg.nn.tensor import ParameterStore, Tensor
from ddreg.nn.unet import UNet, count_parameters, init_parameters, unet_forward

__all__ = [
    "Checkpoint",
    "ParameterStore",
    "Tensor",
    "UNet",
    "concat",
    "conv3d",
    "count_parameters",
    "init_parameters",
    "leaky_relu",
    "load_checkpoint",
    "maxpool3d",
    "save_checkpoint",
    "unet_forward",
    "upsample_nn",
]
