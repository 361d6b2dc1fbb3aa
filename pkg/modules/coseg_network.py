"""
Coseg Network Module

This module provides the Siamese encoder-decoder co-segmentation network: a shared encoder
applied to each image of a pair, a channel (optionally channel-spatial) attention gate fed
by both images, and a two-class decoder that upsamples back to the input resolution.
Output channel 1 is the lesion (foreground) class.
"""

import logging
from collections import OrderedDict
from dataclasses import dataclass
from enum import Enum
from typing import Dict, Iterator, Mapping, Optional, Sequence, Tuple

import numpy as np

from modules.autograd_ops import (
    AutogradError, NetworkShapeError, Tensor, bilinear_upsample, channel_max, channel_mean,
    concat, conv2d, fully_connected, global_avg_pool, mul, relu, reshape, sigmoid, softmax_channels,
)
from modules.encoder_factory import DEFAULT_WIDTHS, EncoderFactory, ParamSpecs
from modules.image_grid import SeededRng

logger = logging.getLogger(__name__)


class AttentionKind(str, Enum):
    NONE = 'none'
    CHANNEL = 'channel'
    CHANNEL_SPATIAL = 'channel_spatial'


class ParamStore:
    """
    Named parameter tensors. Names are unique and iteration follows insertion order.
    """

    def __init__(self, tensors: Optional[Mapping[str, np.ndarray]] = None):
        self._tensors: 'OrderedDict[str, Tensor]' = OrderedDict()
        for name, value in (tensors or {}).items():
            self.add(name, value)

    @classmethod
    def initialize(cls, specs: ParamSpecs, rng: SeededRng) -> 'ParamStore':
        """He fan-in normal initialization for 'he' entries, zeros for 'zeros' entries."""
        store = cls()
        gen = rng.generator
        for name, (shape, init) in specs.items():
            if init == 'he':
                fan_in = int(np.prod(shape[1:]))
                value = gen.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
            elif init == 'zeros':
                value = np.zeros(shape)
            else:
                raise ValueError(f"Unsupported initializer: {init}. Supported: ['he', 'zeros']")
            store.add(name, value)
        return store

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self._tensors:
            raise ValueError(f"duplicate parameter name: {name}")
        self._tensors[name] = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self):
        return list(self._tensors)

    def zero_grad(self) -> None:
        for tensor in self._tensors.values():
            tensor.zero_grad()

    def gradients(self) -> Dict[str, np.ndarray]:
        """Gradient per parameter; parameters the loss does not reach get zeros."""
        if all(t.grad is None for t in self._tensors.values()):
            raise AutogradError("no gradients recorded: run backward after a forward pass")
        return {name: (t.grad if t.grad is not None else np.zeros_like(t.data))
                for name, t in self._tensors.items()}

    def state(self) -> Dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self._tensors.items()}

    def copy(self) -> 'ParamStore':
        return ParamStore(self.state())

    def set_value(self, name: str, value: np.ndarray) -> None:
        tensor = self._tensors[name]
        value = np.asarray(value, dtype=np.float64)
        if value.shape != tensor.shape:
            raise NetworkShapeError(f"{name}: expected shape {tensor.shape}, got {value.shape}")
        tensor.data = value.copy()


@dataclass(frozen=True)
class NetworkConfig:
    encoder: str = 'drn-s'
    widths: Tuple[int, ...] = DEFAULT_WIDTHS
    output_stride: Optional[int] = None
    attention: AttentionKind = AttentionKind.CHANNEL
    single_branch: bool = False

    def __post_init__(self):
        object.__setattr__(self, 'attention', AttentionKind(self.attention))
        object.__setattr__(self, 'widths', tuple(int(w) for w in self.widths))


def _as_batch(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None, None]
    elif arr.ndim == 3:
        arr = arr[:, None]
    return Tensor(arr)


class CosegNetwork:
    """
    Siamese co-segmentation network (or its single-branch baseline) over a ParamStore.

    The encoder runs on each image separately, so both branches see bit-identical arithmetic
    and swapping the inputs swaps the outputs exactly.
    """

    def __init__(self, config: NetworkConfig = NetworkConfig()):
        self.config = config
        self.encoder = EncoderFactory().create_encoder(config.encoder, config.widths, config.output_stride)
        self.feature_channels = self.encoder.out_channels
        self.hidden_channels = max(1, self.feature_channels // 4)

    @property
    def attention(self) -> AttentionKind:
        if self.config.single_branch:
            return AttentionKind.NONE
        return self.config.attention

    def parameter_specs(self) -> ParamSpecs:
        c, r = self.feature_channels, self.hidden_channels
        specs = self.encoder.parameter_specs()
        if self.attention != AttentionKind.NONE:
            specs.update({
                'attention.fc1.w': ((r, c), 'he'),
                'attention.fc1.b': ((r,), 'zeros'),
                'attention.fc2.w': ((c, r), 'zeros'),
                'attention.fc2.b': ((c,), 'zeros'),
            })
        if self.attention == AttentionKind.CHANNEL_SPATIAL:
            specs.update({
                'attention.spatial.w': ((1, 2, 7, 7), 'zeros'),
                'attention.spatial.b': ((1,), 'zeros'),
            })
        mid = self.config.widths[1]
        specs.update({
            'decoder.conv.w': ((mid, c, 3, 3), 'he'),
            'decoder.conv.b': ((mid,), 'zeros'),
            'decoder.head.w': ((2, mid, 1, 1), 'he'),
            'decoder.head.b': ((2,), 'zeros'),
        })
        return specs

    def init_params(self, rng: SeededRng) -> ParamStore:
        return ParamStore.initialize(self.parameter_specs(), rng)

    def channel_attention(self, f_a: Tensor, f_b: Tensor, params: ParamStore) -> Tuple[Tensor, Tensor]:
        """
        Shared channel gate from the product of both images' squeezed descriptors.

        Returns:
            (gate for A, gate for B), both the same (N, C, 1, 1) tensor
        """
        if f_a.shape != f_b.shape:
            raise NetworkShapeError(f"channel_attention: feature shapes {f_a.shape} and {f_b.shape} differ")
        n, c = f_a.shape[:2]
        joint = reshape(mul(global_avg_pool(f_a), global_avg_pool(f_b)), (n, c))
        hidden = relu(fully_connected(joint, params['attention.fc1.w'], params['attention.fc1.b']))
        gate = sigmoid(fully_connected(hidden, params['attention.fc2.w'], params['attention.fc2.b']))
        gate = reshape(gate, (n, c, 1, 1))
        return gate, gate

    def spatial_attention(self, f: Tensor, params: ParamStore) -> Tensor:
        """(N, 1, h, w) map from 7×7 conv over concatenated channel mean and max."""
        pooled = concat([channel_mean(f), channel_max(f)], axis=1)
        return sigmoid(conv2d(pooled, params['attention.spatial.w'], params['attention.spatial.b'], padding=3))

    def decode(self, f: Tensor, params: ParamStore, out_h: int, out_w: int) -> Tensor:
        out = relu(conv2d(f, params['decoder.conv.w'], params['decoder.conv.b'], padding=1))
        out = conv2d(out, params['decoder.head.w'], params['decoder.head.b'])
        return bilinear_upsample(out, out_h, out_w)

    def encode(self, x, params: ParamStore) -> Tensor:
        return self.encoder.forward(_as_batch(x), params)

    def forward_siamese(self, img_a, img_b, params: ParamStore) -> Tuple[Tensor, Tensor]:
        """
        Segment both images of a pair.

        Args:
            img_a: (N, 1, H, W) batch, or (N, H, W) / (H, W) arrays
            img_b: Partner batch of the same shape
            params: Network parameters

        Returns:
            (logits A, logits B), each (N, 2, H, W)
        """
        x_a, x_b = _as_batch(img_a), _as_batch(img_b)
        if x_a.shape != x_b.shape:
            raise NetworkShapeError(f"forward_siamese: input shapes {x_a.shape} and {x_b.shape} differ")
        h, w = x_a.shape[2:]
        f_a, f_b = self.encode(x_a, params), self.encode(x_b, params)
        if self.attention != AttentionKind.NONE:
            g_a, g_b = self.channel_attention(f_a, f_b, params)
            f_a, f_b = mul(f_a, g_a), mul(f_b, g_b)
        if self.attention == AttentionKind.CHANNEL_SPATIAL:
            f_a = mul(f_a, self.spatial_attention(f_a, params))
            f_b = mul(f_b, self.spatial_attention(f_b, params))
        return self.decode(f_a, params, h, w), self.decode(f_b, params, h, w)

    def forward_single(self, img, params: ParamStore) -> Tensor:
        """Single-branch baseline: encoder and decoder without attention."""
        x = _as_batch(img)
        h, w = x.shape[2:]
        return self.decode(self.encode(x, params), params, h, w)

    def foreground_probability(self, logits: Tensor) -> np.ndarray:
        return softmax_channels(logits).data[:, 1]


def infer(network: CosegNetwork, params: ParamStore, img_a, img_b=None) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """
    Foreground probability maps for a pair (or a single image for the baseline).

    Returns:
        (prob A, prob B) as (N, H, W) arrays in [0, 1]; prob B is None in single-branch mode
    """
    if network.config.single_branch:
        return network.foreground_probability(network.forward_single(img_a, params)), None
    if img_b is None:
        raise ValueError("Siamese inference needs a partner image")
    logits_a, logits_b = network.forward_siamese(img_a, img_b, params)
    return network.foreground_probability(logits_a), network.foreground_probability(logits_b)


def stack_images(images: Sequence[np.ndarray]) -> np.ndarray:
    return np.stack([np.asarray(i, dtype=np.float64) for i in images])[:, None]
