"""
Encoder Factory Module

This module provides a factory for the convolutional encoders shared by both Siamese
branches: a plain VGG-style stack, a residual stack, and a dilated residual stack that keeps
an output stride of 8 by trading the last two downsamplings for atrous convolutions.
"""

import logging
from abc import ABC, abstractmethod
from typing import Dict, List, Mapping, Sequence, Tuple

from modules.autograd_ops import NetworkShapeError, Tensor, add, conv2d, max_pool2d, relu

logger = logging.getLogger(__name__)

# name → (shape, initializer) where initializer is 'he' or 'zeros'
ParamSpecs = Dict[str, Tuple[Tuple[int, ...], str]]

DEFAULT_WIDTHS = (16, 32, 64, 128)


class Encoder(ABC):
    """
    Abstract base class for encoders.
    Every encoder starts with a stride-2 3×3 stem followed by four stages.
    """

    variant = ''

    def __init__(self, widths: Sequence[int] = DEFAULT_WIDTHS, in_channels: int = 1, prefix: str = 'encoder'):
        if len(widths) != 4 or any(w < 1 for w in widths):
            raise ValueError(f"encoder needs four positive stage widths, got {list(widths)}")
        self.widths = tuple(int(w) for w in widths)
        self.in_channels = in_channels
        self.prefix = prefix

    @property
    @abstractmethod
    def strides(self) -> Tuple[int, int, int, int]:
        """Downsampling factor of each stage."""

    @property
    def dilations(self) -> Tuple[int, int, int, int]:
        return (1, 1, 1, 1)

    @property
    def output_stride(self) -> int:
        total = 2
        for s in self.strides:
            total *= s
        return total

    @property
    def out_channels(self) -> int:
        return self.widths[-1]

    def _conv_specs(self, name: str, cin: int, cout: int, k: int) -> ParamSpecs:
        return {
            f"{self.prefix}.{name}.w": ((cout, cin, k, k), 'he'),
            f"{self.prefix}.{name}.b": ((cout,), 'zeros'),
        }

    def _conv(self, x: Tensor, params: Mapping[str, Tensor], name: str,
              stride: int = 1, dilation: int = 1) -> Tensor:
        weight = params[f"{self.prefix}.{name}.w"]
        padding = dilation * (weight.shape[2] // 2)
        return conv2d(x, weight, params[f"{self.prefix}.{name}.b"], stride=stride, padding=padding, dilation=dilation)

    def parameter_specs(self) -> ParamSpecs:
        specs = self._conv_specs('stem', self.in_channels, self.widths[0], 3)
        cin = self.widths[0]
        for i, cout in enumerate(self.widths):
            specs.update(self._stage_specs(i, cin, cout))
            cin = cout
        return specs

    def forward(self, x: Tensor, params: Mapping[str, Tensor]) -> Tensor:
        """
        Encode a (N, C_in, H, W) batch into (N, widths[-1], H/OS, W/OS) features.

        Args:
            x: Input batch; H and W must be multiples of the output stride
            params: Parameter tensors by name

        Returns:
            Feature map tensor
        """
        h, w = x.shape[2:]
        if h % self.output_stride or w % self.output_stride:
            raise NetworkShapeError(
                f"{self.variant}: input {h}x{w} is not a multiple of output stride {self.output_stride}")
        out = relu(self._conv(x, params, 'stem', stride=2))
        cin = self.widths[0]
        for i, cout in enumerate(self.widths):
            out = self._stage_forward(out, params, i, cin, cout)
            cin = cout
        return out

    @abstractmethod
    def _stage_specs(self, index: int, cin: int, cout: int) -> ParamSpecs:
        pass

    @abstractmethod
    def _stage_forward(self, x: Tensor, params: Mapping[str, Tensor], index: int, cin: int, cout: int) -> Tensor:
        pass


class VggEncoder(Encoder):
    """Plain conv + relu stages, downsampled by 2×2 max pooling, no residual paths."""

    variant = 'vgg-s'

    def __init__(self, widths: Sequence[int] = DEFAULT_WIDTHS, in_channels: int = 1,
                 output_stride: int = 16, prefix: str = 'encoder'):
        super().__init__(widths, in_channels, prefix)
        if output_stride not in (16, 32):
            raise ValueError(f"Unsupported output stride for {self.variant}: {output_stride}. Supported: [16, 32]")
        self._strides = (2, 2, 2, 1) if output_stride == 16 else (2, 2, 2, 2)

    @property
    def strides(self) -> Tuple[int, int, int, int]:
        return self._strides

    def _stage_specs(self, index, cin, cout):
        return self._conv_specs(f"stage{index}.conv", cin, cout, 3)

    def _stage_forward(self, x, params, index, cin, cout):
        out = relu(self._conv(x, params, f"stage{index}.conv"))
        if self.strides[index] == 2:
            out = max_pool2d(out, 2)
        return out


class ResNetEncoder(Encoder):
    """
    One basic residual block per stage; the first conv carries the stride, and a 1×1
    projection shortcut appears wherever width or resolution changes.
    """

    variant = 'resnet-s'

    def __init__(self, widths: Sequence[int] = DEFAULT_WIDTHS, in_channels: int = 1,
                 output_stride: int = 16, prefix: str = 'encoder'):
        super().__init__(widths, in_channels, prefix)
        if output_stride not in (16, 32):
            raise ValueError(f"Unsupported output stride for {self.variant}: {output_stride}. Supported: [16, 32]")
        self._strides = (2, 2, 2, 1) if output_stride == 16 else (2, 2, 2, 2)

    @property
    def strides(self) -> Tuple[int, int, int, int]:
        return self._strides

    def _needs_projection(self, index: int, cin: int, cout: int) -> bool:
        return cin != cout or self.strides[index] != 1

    def _stage_specs(self, index, cin, cout):
        specs = self._conv_specs(f"stage{index}.conv1", cin, cout, 3)
        specs.update(self._conv_specs(f"stage{index}.conv2", cout, cout, 3))
        if self._needs_projection(index, cin, cout):
            specs.update(self._conv_specs(f"stage{index}.proj", cin, cout, 1))
        return specs

    def _stage_forward(self, x, params, index, cin, cout):
        stride, dilation = self.strides[index], self.dilations[index]
        out = relu(self._conv(x, params, f"stage{index}.conv1", stride=stride, dilation=dilation))
        out = self._conv(out, params, f"stage{index}.conv2", dilation=dilation)
        shortcut = x
        if self._needs_projection(index, cin, cout):
            shortcut = self._conv(x, params, f"stage{index}.proj", stride=stride)
        return relu(add(out, shortcut))


class DilatedResNetEncoder(ResNetEncoder):
    """Residual stages with the last two strides replaced by dilation 2 and 4 (output stride 8)."""

    variant = 'drn-s'

    def __init__(self, widths: Sequence[int] = DEFAULT_WIDTHS, in_channels: int = 1,
                 output_stride: int = 8, prefix: str = 'encoder'):
        if output_stride != 8:
            raise ValueError(f"Unsupported output stride for drn-s: {output_stride}. Supported: [8]")
        super().__init__(widths, in_channels, 16, prefix)
        self._strides = (2, 2, 1, 1)

    @property
    def dilations(self) -> Tuple[int, int, int, int]:
        return (1, 1, 2, 4)


class EncoderFactory:
    """
    Factory class for creating encoder instances by variant name.
    """

    def __init__(self):
        self.encoders = {
            'vgg-s': VggEncoder,
            'resnet-s': ResNetEncoder,
            'drn-s': DilatedResNetEncoder,
        }
        self.default_strides = {'vgg-s': 16, 'resnet-s': 16, 'drn-s': 8}

    def create_encoder(self, variant: str, widths: Sequence[int] = DEFAULT_WIDTHS,
                       output_stride: int = None, in_channels: int = 1) -> Encoder:
        """
        Create an encoder instance.

        Args:
            variant: Encoder name (vgg-s, resnet-s, drn-s)
            widths: Four stage channel widths
            output_stride: Total downsampling; defaults to 16, or 8 for drn-s
            in_channels: Input image channels

        Returns:
            Encoder instance

        Raises:
            ValueError: If the variant or output stride is not supported
        """
        if variant not in self.encoders:
            raise ValueError(f"Unsupported encoder variant: {variant}. Supported variants: {list(self.encoders.keys())}")
        if output_stride is None:
            output_stride = self.default_strides[variant]
        return self.encoders[variant](widths, in_channels, output_stride)

    def get_supported_variants(self) -> List[str]:
        """Get list of supported encoder variants."""
        return list(self.encoders.keys())
