"""Two-input convolutional encoder-decoder.

Topology (C = base_channels, S = stages)::

    image  -> img_stem (3x3, 1->C) --+
                                      +-- concat (copy connection) -> enc1
    interim -> seg_stem (3x3, 1->C) -+
                  |
                  +-> [pool, 3x3, 3x3] x (max merge point - 1)   interim branch,
                      concatenated into enc_k for every merge point k > 1

    enc_k     : 3x3+ReLU, 3x3+ReLU (output kept as skip_k), maxpool 2x2
    bottleneck: 3x3+ReLU, 3x3+ReLU at C * 2**S channels
    dec_k     : transposed 3x3 stride 2 + ReLU, concat skip_k, 3x3+ReLU, 3x3+ReLU
    head      : 1x1 conv + sigmoid -> one channel

Encoder stage k outputs C * 2**(k-1) channels; decoder stage k halves back.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence, Union

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    concat_channels,
    conv2d,
    conv2d_1x1,
    maxpool2x2,
    relu,
    sigmoid,
    transposed_conv2d,
)


class ConfigError(ValueError):
    """Invalid network configuration."""


@dataclass
class NetworkConfig:
    input_height: int = 256
    input_width: int = 320
    stages: int = 4
    base_channels: int = 16
    # None resolves to the default merge points (1, 2) clipped to `stages`
    merge_points: Optional[Sequence[int]] = None

    def __post_init__(self):
        if self.merge_points is None:
            self.merge_points = tuple(m for m in (1, 2) if m <= self.stages)
        self.merge_points = tuple(int(m) for m in self.merge_points)
        self.validate()

    def validate(self) -> None:
        if self.stages < 1:
            raise ConfigError(f"stages must be >= 1, got {self.stages}")
        if self.base_channels < 1:
            raise ConfigError(f"base_channels must be >= 1, got {self.base_channels}")
        div = 2**self.stages
        if self.input_height % div or self.input_width % div or self.input_height < div or self.input_width < div:
            raise ConfigError(
                f"input {self.input_height}x{self.input_width} must be a positive multiple of 2**stages = {div}"
            )
        mp = self.merge_points
        if not mp:
            raise ConfigError("merge_points must be non-empty")
        if list(mp) != sorted(set(mp)):
            raise ConfigError(f"merge_points must be sorted and unique, got {list(mp)}")
        if mp[0] < 1 or mp[-1] > self.stages:
            raise ConfigError(f"merge_points must lie in [1, {self.stages}], got {list(mp)}")

    @property
    def num_pixels(self) -> int:
        return self.input_height * self.input_width


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str  # "conv3", "conv1" or "deconv"
    in_channels: int
    out_channels: int

    @property
    def weight_shape(self) -> tuple:
        k = 1 if self.kind == "conv1" else 3
        if self.kind == "deconv":
            return (self.in_channels, self.out_channels, k, k)
        return (self.out_channels, self.in_channels, k, k)

    @property
    def num_parameters(self) -> int:
        return int(np.prod(self.weight_shape)) + self.out_channels


def _branch_channels(config: NetworkConfig, level: int) -> int:
    return config.base_channels * 2 ** (level - 1)


def layer_specs(config: NetworkConfig) -> list[LayerSpec]:
    """The fixed layer list for ``config``, in construction order."""
    c, s = config.base_channels, config.stages
    merges = set(config.merge_points)
    specs = [LayerSpec("img_stem", "conv3", 1, c), LayerSpec("seg_stem", "conv3", 1, c)]
    prev = c
    for level in range(1, max(merges)):
        out = _branch_channels(config, level)
        specs.append(LayerSpec(f"seg_branch{level}.conv1", "conv3", prev, out))
        specs.append(LayerSpec(f"seg_branch{level}.conv2", "conv3", out, out))
        prev = out
    for k in range(1, s + 1):
        out = c * 2 ** (k - 1)
        cin = c if k == 1 else c * 2 ** (k - 2)
        if k in merges:
            cin += c if k == 1 else _branch_channels(config, k - 1)
        specs.append(LayerSpec(f"enc{k}.conv1", "conv3", cin, out))
        specs.append(LayerSpec(f"enc{k}.conv2", "conv3", out, out))
    deep = c * 2**s
    specs.append(LayerSpec("bottleneck.conv1", "conv3", deep // 2, deep))
    specs.append(LayerSpec("bottleneck.conv2", "conv3", deep, deep))
    for k in range(s, 0, -1):
        out = c * 2 ** (k - 1)
        specs.append(LayerSpec(f"dec{k}.up", "deconv", 2 * out, out))
        specs.append(LayerSpec(f"dec{k}.conv1", "conv3", 2 * out, out))
        specs.append(LayerSpec(f"dec{k}.conv2", "conv3", out, out))
    specs.append(LayerSpec("head", "conv1", c, 1))
    return specs


@dataclass
class Layer:
    weight: Tensor
    bias: Tensor


@dataclass
class ParameterSet:
    """All learnable tensors of one network, keyed by layer name."""

    config: NetworkConfig
    layers: "OrderedDict[str, Layer]" = field(default_factory=OrderedDict)

    def named_tensors(self) -> Iterator[tuple[str, Tensor]]:
        for name, layer in self.layers.items():
            yield f"{name}.weight", layer.weight
            yield f"{name}.bias", layer.bias

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_tensors()]

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self.parameters())

    @property
    def dtype(self):
        return next(iter(self.layers.values())).weight.dtype

    def copy(self, dtype=None) -> "ParameterSet":
        out = ParameterSet(self.config)
        for name, layer in self.layers.items():
            out.layers[name] = Layer(
                Tensor(layer.weight.data.astype(dtype or layer.weight.dtype, copy=True), requires_grad=True),
                Tensor(layer.bias.data.astype(dtype or layer.bias.dtype, copy=True), requires_grad=True),
            )
        return out

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = None


def build(config: NetworkConfig, seed: int = 0, dtype=np.float32) -> ParameterSet:
    """Create freshly initialised parameters (He-uniform kernels, zero biases)."""
    config.validate()
    rng = np.random.default_rng(seed)
    params = ParameterSet(config)
    for spec in layer_specs(config):
        shape = spec.weight_shape
        fan_in = spec.in_channels * shape[2] * shape[3]
        bound = np.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, size=shape).astype(dtype)
        b = np.zeros(spec.out_channels, dtype=dtype)
        params.layers[spec.name] = Layer(Tensor(w, requires_grad=True), Tensor(b, requires_grad=True))
    return params


@dataclass
class SegmentationMap:
    """Single-channel map in [0, 1] at input resolution, tagged with its iteration index."""

    values: np.ndarray
    t: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 2:
            raise ShapeError(f"segmentation map must be 2-d (H x W), got {self.values.shape}")
        if self.values.size and (self.values.min() < 0 or self.values.max() > 1):
            raise ValueError("segmentation map values must lie in [0, 1]")

    @property
    def shape(self) -> tuple:
        return self.values.shape


def _as_batch(x, dtype, what: str) -> Tensor:
    if isinstance(x, SegmentationMap):
        x = x.values
    if isinstance(x, Tensor):
        x = x.data
    arr = np.asarray(x, dtype=dtype)
    if arr.ndim == 2:
        arr = arr[None, None]
    if arr.ndim != 4 or arr.shape[1] != 1:
        raise ShapeError(f"{what} must be H x W or N x 1 x H x W, got {arr.shape}")
    # network inputs are data, never differentiated
    return Tensor(arr)


def _conv(params: ParameterSet, name: str, x: Tensor) -> Tensor:
    layer = params.layers[name]
    return relu(conv2d(x, layer.weight, layer.bias))


def forward(params: ParameterSet, image, interim) -> Tensor:
    """Run the network; returns an N x 1 x H x W tensor of probabilities in (0, 1).

    ``image`` and ``interim`` may be H x W arrays, N x 1 x H x W arrays,
    tensors, or (for ``interim``) a SegmentationMap. Neither input is
    differentiated.
    """
    cfg = params.config
    dtype = params.dtype
    x_img = _as_batch(image, dtype, "image")
    x_seg = _as_batch(interim, dtype, "interim map")
    if x_img.shape != x_seg.shape:
        raise ShapeError(f"image {x_img.shape} and interim map {x_seg.shape} resolutions differ")
    if x_img.shape[2:] != (cfg.input_height, cfg.input_width):
        raise ShapeError(
            f"input {x_img.shape[2]}x{x_img.shape[3]} does not match configured "
            f"{cfg.input_height}x{cfg.input_width}"
        )
    merges = cfg.merge_points

    img = _conv(params, "img_stem", x_img)
    seg = _conv(params, "seg_stem", x_seg)

    branch = {}
    b = seg
    for level in range(1, max(merges)):
        b, _ = maxpool2x2(b)
        b = _conv(params, f"seg_branch{level}.conv1", b)
        b = _conv(params, f"seg_branch{level}.conv2", b)
        branch[level + 1] = b

    h = concat_channels(img, seg) if 1 in merges else img
    skips = []
    for k in range(1, cfg.stages + 1):
        if k > 1 and k in merges:
            h = concat_channels(h, branch[k])
        h = _conv(params, f"enc{k}.conv1", h)
        h = _conv(params, f"enc{k}.conv2", h)
        skips.append(h)
        h, _ = maxpool2x2(h)

    h = _conv(params, "bottleneck.conv1", h)
    h = _conv(params, "bottleneck.conv2", h)

    for k in range(cfg.stages, 0, -1):
        up = params.layers[f"dec{k}.up"]
        h = relu(transposed_conv2d(h, up.weight, up.bias))
        h = concat_channels(h, skips[k - 1])
        h = _conv(params, f"dec{k}.conv1", h)
        h = _conv(params, f"dec{k}.conv2", h)

    head = params.layers["head"]
    return sigmoid(conv2d_1x1(h, head.weight, head.bias))


def segment(params: ParameterSet, image, interim: Union[SegmentationMap, np.ndarray], t: int = 1) -> SegmentationMap:
    """Single-image convenience wrapper around :func:`forward`."""
    out = forward(params, image, interim)
    if out.shape[0] != 1:
        raise ShapeError("segment handles one image; use forward for batches")
    return SegmentationMap(out.data[0, 0], t)
