"""
U-Net displacement predictor

The network reads the concatenated ``(fixed, moving)`` pair and returns a
three-channel displacement field in millimetres. Layout per level ``i``:

- encoder: conv -> leaky ReLU, kept as skip ``i``, then 2x max pool
- decoder (deepest first): conv -> leaky ReLU -> 2x upsample, concatenated with skip ``i``
- head: two convolutions with leaky ReLU, then a linear three-channel output

The output convolution starts at zero, so a fresh network predicts the
identity transform.
"""

from typing import Dict, Optional, Tuple

import numpy as np

from ddreg.config import NetConfig
from ddreg.errors import ShapeError
from ddreg.nn.functional import concat, conv3d, leaky_relu, maxpool3d, upsample_nn
from ddreg.nn.tensor import ParameterStore, Tensor
from ddreg.volume import DisplacementField, Volume, require_same_grid


def layer_shapes(cfg: NetConfig) -> Dict[str, Tuple[int, int]]:
    """``(in_channels, out_channels)`` of every convolution, in parameter order"""
    shapes: Dict[str, Tuple[int, int]] = {}
    channels = cfg.input_channels
    for i, filters in enumerate(cfg.filters):
        shapes[f"encoder.{i}"] = (channels, filters)
        channels = filters
    for i in reversed(range(cfg.depth)):
        in_channels = cfg.filters[-1] if i == cfg.depth - 1 else 2 * cfg.filters[i + 1]
        shapes[f"decoder.{i}"] = (in_channels, cfg.filters[i])
    shapes["head.0"] = (2 * cfg.filters[0], cfg.head_filters)
    shapes["head.1"] = (cfg.head_filters, cfg.head_filters)
    shapes["output"] = (cfg.head_filters, cfg.output_channels)
    return shapes


def init_parameters(cfg: NetConfig, seed: int = 0) -> ParameterStore:
    """
    Fresh parameters: uniform kernels with bound ``sqrt(1 / fan_in)``, zero
    biases and a zero output layer
    """
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 0x6E6E])))
    params = ParameterStore()
    for name, (fan_in, fan_out) in layer_shapes(cfg).items():
        shape = (fan_out, fan_in, 3, 3, 3)
        if name == "output":
            kernel = np.zeros(shape)
        else:
            bound = np.sqrt(1.0 / (27 * fan_in))
            kernel = rng.uniform(-bound, bound, shape)
        params.add(f"{name}.kernel", kernel)
        params.add(f"{name}.bias", np.zeros(fan_out))
    return params


def count_parameters(params: ParameterStore, prefix: Optional[str] = None, trainable_only: bool = False) -> int:
    """Scalar parameter count, optionally restricted to a name prefix"""
    return params.count(prefix=prefix, trainable_only=trainable_only)


class UNet:
    """Forward pass over a parameter store"""

    def __init__(self, cfg: NetConfig, params: ParameterStore):
        expected = {
            f"{name}.{part}": shape
            for name, (fan_in, fan_out) in layer_shapes(cfg).items()
            for part, shape in (("kernel", (fan_out, fan_in, 3, 3, 3)), ("bias", (fan_out,)))
        }
        if params.shapes() != expected:
            raise ShapeError("Parameter store does not match the network configuration")
        self.cfg = cfg
        self.params = params

    def _conv(self, name: str, x: Tensor, activate: bool = True) -> Tensor:
        out = conv3d(x, self.params[f"{name}.kernel"], self.params[f"{name}.bias"])
        return leaky_relu(out, self.cfg.leaky_slope) if activate else out

    def forward(self, x: Tensor) -> Tensor:
        """Map a (1, 2, X, Y, Z) input to a (1, 3, X, Y, Z) displacement"""
        if x.shape[1] != self.cfg.input_channels:
            raise ShapeError(f"Expected {self.cfg.input_channels} input channels, got {x.shape[1]}")
        divisor = 2**self.cfg.depth
        if any(n % divisor for n in x.shape[2:]):
            raise ShapeError(f"Spatial shape {x.shape[2:]} must be divisible by {divisor}")

        skips = []
        h = x
        for i in range(self.cfg.depth):
            h = self._conv(f"encoder.{i}", h)
            skips.append(h)
            h, _ = maxpool3d(h)

        for i in reversed(range(self.cfg.depth)):
            h = upsample_nn(self._conv(f"decoder.{i}", h))
            h = concat([h, skips[i]])

        h = self._conv("head.0", h)
        h = self._conv("head.1", h)
        return self._conv("output", h, activate=False)

    def predict(self, fixed: Volume, moving: Volume) -> Tuple[DisplacementField, Tensor]:
        """Displacement field for a pair, plus the output tensor for back-propagation"""
        grid = require_same_grid(fixed, moving)
        x = Tensor(np.stack([fixed.data, moving.data])[None])
        out = self.forward(x)
        return DisplacementField(grid, out.data[0]), out


def unet_forward(fixed: Volume, moving: Volume, params: ParameterStore, cfg: NetConfig) -> DisplacementField:
    """Predict the displacement field that aligns `moving` to `fixed`"""
    field, _ = UNet(cfg, params).predict(fixed, moving)
    return field
