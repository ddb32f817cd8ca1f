"""Small U-Net style encoder/decoder built on :mod:`lymphoseg.autodiff`."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .labels import NUM_CLASSES


@dataclass(frozen=True)
class NetworkConfig:
    input_channels: int = 1
    num_classes: int = NUM_CLASSES
    widths: tuple = (16, 32, 64, 128)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) < 2:
            raise ValueError(f"encoder depth must be >= 2; got widths {self.widths}")
        if any(w <= 0 for w in self.widths):
            raise ValueError(f"encoder widths must be positive; got {self.widths}")
        if self.input_channels <= 0 or self.num_classes < 2:
            raise ValueError("need input_channels >= 1 and num_classes >= 2")

    @property
    def depth(self) -> int:
        return len(self.widths)


@dataclass
class NetworkParams:
    """Named weight tensors in a fixed order, plus the config that shaped them."""

    config: NetworkConfig
    tensors: "OrderedDict[str, Tensor]" = field(default_factory=OrderedDict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def items(self):
        return self.tensors.items()

    def count(self) -> int:
        return int(sum(t.data.size for t in self.tensors.values()))

    def copy(self) -> "NetworkParams":
        return NetworkParams(self.config, OrderedDict((k, Tensor(v.data.copy(), requires_grad=True)) for k, v in self.tensors.items()))


def layer_shapes(config: NetworkConfig) -> "OrderedDict[str, tuple]":
    """Kernel and bias shapes for every conv layer, in forward order."""
    shapes: OrderedDict[str, tuple] = OrderedDict()

    def conv(name, cin, cout, k):
        shapes[f"{name}.weight"] = (cout, cin, k, k)
        shapes[f"{name}.bias"] = (cout,)

    w = config.widths
    cin = config.input_channels
    for s, width in enumerate(w):
        conv(f"enc{s}.conv0", cin, width, 3)
        conv(f"enc{s}.conv1", width, width, 3)
        cin = width
    for s in reversed(range(config.depth - 1)):
        conv(f"dec{s}.up", w[s + 1], w[s], 3)
        conv(f"dec{s}.conv0", 2 * w[s], w[s], 3)
        conv(f"dec{s}.conv1", w[s], w[s], 3)
    conv("head", w[0], config.num_classes, 1)
    return shapes


def build_network(config: NetworkConfig) -> NetworkParams:
    """Seeded fan-in scaled (Kaiming uniform) kernels and zero biases."""
    rng = np.random.default_rng(config.seed)
    tensors = OrderedDict()
    for name, shape in layer_shapes(config).items():
        if name.endswith(".bias"):
            data = np.zeros(shape, dtype=np.float32)
        else:
            fan_in = shape[1] * shape[2] * shape[3]
            bound = np.sqrt(6.0 / fan_in)
            data = rng.uniform(-bound, bound, size=shape).astype(np.float32)
        tensors[name] = Tensor(data, requires_grad=True)
    return NetworkParams(config, tensors)


def _conv_relu(p: NetworkParams, name: str, x: Tensor) -> Tensor:
    return ad.relu(ad.conv2d(x, p[f"{name}.weight"], p[f"{name}.bias"], pad=1))


def forward(params: NetworkParams, image, ablate_skips: bool = False) -> Tensor:
    """Per-class logits with the input's spatial size.

    ``image`` may be ``(C, H, W)`` or batched ``(N, C, H, W)``; the result has
    the same rank. ``ablate_skips`` zeroes every skip connection (used to check
    the skips are actually wired in).
    """
    x = image if isinstance(image, Tensor) else Tensor(image)
    unbatched = x.ndim == 3
    if unbatched:
        x = ad.reshape(x, (1,) + x.shape)
    cfg = params.config
    if x.ndim != 4 or x.shape[1] != cfg.input_channels:
        raise ad.ShapeError(f"expected input (N, {cfg.input_channels}, H, W); got {x.shape}")
    mult = 2 ** (cfg.depth - 1)
    h, w = x.shape[2:]
    if h % mult or w % mult:
        raise ad.ShapeError(f"spatial dims {h}x{w} must be multiples of {mult} for depth {cfg.depth}")

    skips = []
    for s in range(cfg.depth):
        if s:
            x = ad.max_pool2(x)
        x = _conv_relu(params, f"enc{s}.conv0", x)
        x = _conv_relu(params, f"enc{s}.conv1", x)
        skips.append(x)
    for s in reversed(range(cfg.depth - 1)):
        x = _conv_relu(params, f"dec{s}.up", ad.upsample_nearest2(x))
        skip = skips[s]
        if ablate_skips:
            skip = Tensor(np.zeros_like(skip.data))
        x = ad.concat_channels(x, skip)
        x = _conv_relu(params, f"dec{s}.conv0", x)
        x = _conv_relu(params, f"dec{s}.conv1", x)
    logits = ad.conv2d(x, params["head.weight"], params["head.bias"])
    if unbatched:
        logits = ad.reshape(logits, logits.shape[1:])
    return logits


def predict(params: NetworkParams, image) -> np.ndarray:
    """Per-pixel argmax class; ties resolve to the lower class index."""
    logits = forward(params, image)
    probs = ad.softmax_channels(logits, axis=logits.ndim - 3)
    return np.argmax(probs.data, axis=logits.ndim - 3).astype(np.uint8)
