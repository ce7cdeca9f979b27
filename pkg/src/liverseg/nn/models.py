"""The four encoder-decoder families: U-Net, Dense U-Net, residual, SegNet.

All models map an N x 1 x H x W float image batch to an N x 1 x H x W
sigmoid probability map.  ``depth`` is the number of 2x downsamplings and
``base_channels`` the width of the first level; widths double per level.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from liverseg import autodiff as ad
from liverseg.autodiff import ShapeError, Tensor
from liverseg.nn.layers import Conv2d, ConvBNReLU, ConvTranspose2d, Layer

FAMILIES = ("unet", "dense_unet", "resnet_seg", "segnet")


@dataclass
class ModelConfig:
    family: str = "unet"
    depth: int = 2
    base_channels: int = 8
    growth: int = 4
    use_batchnorm: bool = True
    seed: int = 0
    input_size: Optional[tuple] = None  # (H, W); checked at build when given

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown model family {self.family!r}; expected one of {FAMILIES}")
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.base_channels < 1:
            raise ValueError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.family == "dense_unet" and self.growth < 1:
            raise ValueError(f"dense_unet needs growth >= 1, got {self.growth}")
        if self.input_size is not None:
            self.input_size = tuple(int(v) for v in self.input_size)
            check_divisible(self.input_size, self.depth)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_size"] = None if self.input_size is None else list(self.input_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def check_divisible(size, depth: int) -> None:
    factor = 2 ** depth
    for axis, extent in zip(("height", "width"), size):
        if extent % factor:
            raise ShapeError(
                f"input {axis} {extent} is not divisible by 2**depth = {factor} (depth={depth})"
            )


class Model:
    """Parameter container plus forward pass; subclasses define the topology."""

    family = ""

    def __init__(self, cfg: ModelConfig):
        self.config = cfg
        self.rng = np.random.default_rng(cfg.seed)
        self._layers: list = []
        self.build()
        del self.rng
        for name, p in self.named_parameters():
            p.name = name

    def build(self) -> None:
        raise NotImplementedError

    def forward_impl(self, x: Tensor, training: bool) -> Tensor:
        raise NotImplementedError

    def register(self, name: str, layer: Layer) -> Layer:
        self._layers.append((name, layer))
        return layer

    def block(self, name, cin, cout, k=3, stride=1, activation=True) -> ConvBNReLU:
        return self.register(name, ConvBNReLU(self.rng, cin, cout, k, stride,
                                              self.config.use_batchnorm, activation))

    def leaf_layers(self):
        for name, layer in self._layers:
            yield from layer.leaves(name)

    def named_parameters(self):
        out = []
        for name, layer in self.leaf_layers():
            out.extend(layer.named_parameters(name))
        return out

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self):
        out = []
        for name, layer in self.leaf_layers():
            out.extend(layer.named_buffers(name))
        return out

    def inventory(self) -> list:
        """(parameter name, layer kind, shape) for every trainable tensor."""
        out = []
        for name, layer in self.leaf_layers():
            for pname, p in layer.named_parameters(name):
                out.append((pname, layer.kind, p.shape))
        return out

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> dict:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: b.copy() for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict) -> None:
        for name, p in self.named_parameters():
            p.data[...] = state[name]
        for name, b in self.named_buffers():
            b[...] = state[name]

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        if x.ndim != 4 or x.shape[1] != 1:
            raise ShapeError(f"{self.family} expects N x 1 x H x W input, got {x.shape}")
        check_divisible(x.shape[2:], self.config.depth)
        return self.forward_impl(x, training)

    __call__ = forward


def _double(model: Model, name: str, cin: int, cout: int):
    return (model.block(f"{name}.0", cin, cout), model.block(f"{name}.1", cout, cout))


def _run(layers, x, training):
    for layer in layers:
        x = layer(x, training)
    return x


class UNet(Model):
    family = "unet"

    def build(self):
        d, c = self.config.depth, self.config.base_channels
        widths = [c * 2 ** i for i in range(d + 1)]
        self.widths = widths
        self.enc = [_double(self, f"enc{i}", 1 if i == 0 else widths[i - 1], widths[i])
                    for i in range(d)]
        self.bottom = _double(self, "bottom", widths[d - 1], widths[d])
        self.up, self.dec = [None] * d, [None] * d
        for i in reversed(range(d)):
            self.up[i] = self.register(f"up{i}", ConvTranspose2d(self.rng, widths[i + 1], widths[i]))
            self.dec[i] = _double(self, f"dec{i}", 2 * widths[i], widths[i])
        self.head = self.register("head", Conv2d(self.rng, widths[0], 1, k=1))

    def forward_impl(self, x, training):
        skips = []
        for blocks in self.enc:
            x = _run(blocks, x, training)
            skips.append(x)
            x, _ = ad.maxpool2d_indices(x)
        x = _run(self.bottom, x, training)
        for i in reversed(range(self.config.depth)):
            x = ad.concat_channels(skips[i], self.up[i](x))
            x = _run(self.dec[i], x, training)
        return ad.sigmoid(self.head(x))


class DenseBlock(Layer):
    """Three conv layers, each fed the concatenation of everything before it,
    closed by a 1x1 transition conv to ``cout`` channels."""

    kind = "dense_block"
    n_layers = 3

    def __init__(self, model: Model, name: str, cin: int, cout: int, growth: int):
        self.layers = [model.block(f"{name}.layer{l}", cin + l * growth, growth)
                       for l in range(self.n_layers)]
        self.transition = model.block(f"{name}.transition", cin + self.n_layers * growth, cout, k=1)

    @property
    def layer_in_channels(self) -> list:
        return [layer.in_channels for layer in self.layers]

    def __call__(self, x, training):
        feats = [x]
        for layer in self.layers:
            feats.append(layer(ad.concat_channels(*feats), training))
        return self.transition(ad.concat_channels(*feats), training)

    def leaves(self, prefix):
        return []  # sublayers are registered on the model directly


class DenseUNet(Model):
    family = "dense_unet"

    def build(self):
        d, c, g = self.config.depth, self.config.base_channels, self.config.growth
        widths = [c * 2 ** i for i in range(d + 1)]
        self.widths = widths
        self.enc = [DenseBlock(self, f"enc{i}", 1 if i == 0 else widths[i - 1], widths[i], g)
                    for i in range(d)]
        self.bottom = DenseBlock(self, "bottom", widths[d - 1], widths[d], g)
        self.up, self.dec = [None] * d, [None] * d
        for i in reversed(range(d)):
            self.up[i] = self.register(f"up{i}", ConvTranspose2d(self.rng, widths[i + 1], widths[i]))
            self.dec[i] = DenseBlock(self, f"dec{i}", 2 * widths[i], widths[i], g)
        self.head = self.register("head", Conv2d(self.rng, widths[0], 1, k=1))

    @property
    def blocks(self) -> list:
        return [*self.enc, self.bottom, *self.dec]

    def forward_impl(self, x, training):
        skips = []
        for block in self.enc:
            x = block(x, training)
            skips.append(x)
            x, _ = ad.maxpool2d_indices(x)
        x = self.bottom(x, training)
        for i in reversed(range(self.config.depth)):
            x = ad.concat_channels(skips[i], self.up[i](x))
            x = self.dec[i](x, training)
        return ad.sigmoid(self.head(x))


class ResidualBlock(Layer):
    """Two 3x3 convs plus a shortcut; the shortcut is the identity unless the
    block changes width or stride, in which case a 1x1 projection is used."""

    kind = "residual_block"

    def __init__(self, model: Model, name: str, cin: int, cout: int, stride: int):
        bn = model.config.use_batchnorm
        self.conv1 = model.block(f"{name}.conv1", cin, cout, stride=stride)
        self.conv2 = model.block(f"{name}.conv2", cout, cout, activation=False)
        self.proj = None
        if stride != 1 or cin != cout:
            self.proj = model.register(
                f"{name}.proj", ConvBNReLU(model.rng, cin, cout, 1, stride, bn, activation=False))

    def __call__(self, x, training):
        y = self.conv2(self.conv1(x, training), training)
        shortcut = x if self.proj is None else self.proj(x, training)
        return ad.relu(ad.add(y, shortcut))

    def leaves(self, prefix):
        return []


class ResNetSeg(Model):
    """Residual encoder (2 blocks per stage, stage widths doubling, stride-2
    entry per downsampling) with a plain nearest-upsample + conv decoder.

    At depth 3 the encoder is the ResNet-18 layout: a stem conv followed by
    four stages of two basic blocks.
    """

    family = "resnet_seg"
    blocks_per_stage = 2

    def build(self):
        d, c = self.config.depth, self.config.base_channels
        widths = [c * 2 ** i for i in range(d + 1)]
        self.widths = widths
        self.stem = self.block("stem", 1, widths[0])
        self.stages = []
        for s in range(d + 1):
            cin = widths[max(s - 1, 0)]
            blocks = []
            for b in range(self.blocks_per_stage):
                stride = 2 if (s > 0 and b == 0) else 1
                blocks.append(ResidualBlock(self, f"stage{s}.{b}", cin if b == 0 else widths[s],
                                            widths[s], stride))
            self.stages.append(blocks)
        self.dec = [None] * d
        for s in reversed(range(d)):
            self.dec[s] = self.block(f"dec{s}", widths[s + 1], widths[s])
        self.head = self.register("head", Conv2d(self.rng, widths[0], 1, k=1))

    def forward_impl(self, x, training):
        x = self.stem(x, training)
        for blocks in self.stages:
            for block in blocks:
                x = block(x, training)
        for s in reversed(range(self.config.depth)):
            x = self.dec[s](ad.upsample_nearest2d(x, 2), training)
        return ad.sigmoid(self.head(x))


class SegNet(Model):
    """Conv encoder with index-recording max pooling; the decoder upsamples
    only through those indices.  No fully connected layers and no feature
    maps cross from encoder to decoder."""

    family = "segnet"

    def build(self):
        d, c = self.config.depth, self.config.base_channels
        widths = [c * 2 ** i for i in range(d)]
        self.widths = widths
        self.enc = [_double(self, f"enc{i}", 1 if i == 0 else widths[i - 1], widths[i])
                    for i in range(d)]
        self.dec = [None] * d
        for i in reversed(range(d)):
            self.dec[i] = (self.block(f"dec{i}.0", widths[i], widths[i]),
                           self.block(f"dec{i}.1", widths[i], widths[max(i - 1, 0)]))
        self.head = self.register("head", Conv2d(self.rng, widths[0], 1, k=1))

    def forward_impl(self, x, training):
        indices = []
        for blocks in self.enc:
            x = _run(blocks, x, training)
            x, idx = ad.maxpool2d_indices(x)
            indices.append(idx)
        for i in reversed(range(self.config.depth)):
            x = ad.unpool2d(x, indices[i])
            x = _run(self.dec[i], x, training)
        return ad.sigmoid(self.head(x))


_REGISTRY = {cls.family: cls for cls in (UNet, DenseUNet, ResNetSeg, SegNet)}


def build_model(cfg: ModelConfig) -> Model:
    """Instantiate the configured family with He-uniform weights from ``cfg.seed``."""
    return _REGISTRY[cfg.family](cfg)
