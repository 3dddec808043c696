"""Layer-stack descriptions for the seven sub-networks and their torch realization.

A :class:`NetworkSpec` is a plain, hashable list of layer descriptors. Shape and
receptive-field questions are answered from the spec alone; :func:`realize`
turns a spec into a ``torch.nn.Module``.

Widths can be scaled by ``width`` (stack depth is unchanged) so the full
architecture fits desk-scale CPU budgets.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

logger = logging.getLogger(__name__)

INIT_STD = 0.02


class SpecError(ValueError):
    pass


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class Layer:
    """One entry of a layer stack.

    kind is one of ``conv``, ``deconv``, ``res``, ``maxpool``, ``upsample``.
    ``padding`` is (left, right, top, bottom). For ``res`` blocks, ``act`` is
    the activation applied after the skip addition.
    """

    kind: str
    in_ch: int = 0
    out_ch: int = 0
    kernel: int = 1
    stride: int = 1
    padding: tuple[int, int, int, int] = (0, 0, 0, 0)
    dilation: int = 1
    norm: Optional[str] = None
    act: Optional[str] = None
    pad_mode: str = "zeros"
    output_padding: int = 0
    scale: int = 1


@dataclass(frozen=True)
class NetworkSpec:
    name: str
    in_channels: int
    layers: tuple[Layer, ...]
    # optional second output branching off the trunk layers[:-1]
    aux_head: Optional[Layer] = None
    bias: bool = field(default=True)

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]


def _ch(c: int, width: float) -> int:
    return max(1, int(round(c * width)))


def _same(k: int, dilation: int = 1) -> tuple[int, int, int, int]:
    total = dilation * (k - 1)
    lo, hi = total // 2, total - total // 2
    return (lo, hi, lo, hi)


def conv(in_ch, out_ch, k=3, stride=1, norm=None, act=None, dilation=1, pad_mode="zeros", padding=None):
    if padding is None:
        if stride == 1:
            padding = _same(k, dilation)
        else:
            # halves even sizes exactly: floor((H + p - k) / s) + 1 == H / s
            p = (k - stride + 1) // 2 if k > stride else 0
            rest = max(k - stride - p, 0)
            padding = (p, rest, p, rest)
    return Layer("conv", in_ch, out_ch, k, stride, tuple(padding), dilation, norm, act, pad_mode)


def deconv(in_ch, out_ch, norm=None, act=None):
    # kernel 3, stride 2, padding 1, output_padding 1 doubles the size
    return Layer("deconv", in_ch, out_ch, 3, 2, (1, 1, 1, 1), 1, norm, act, output_padding=1)


def res(in_ch, out_ch, norm, act="relu", dilation=1, pad_mode="zeros"):
    return Layer("res", in_ch, out_ch, 3, 1, _same(3, dilation), dilation, norm, act, pad_mode)


def maxpool():
    return Layer("maxpool", kernel=2, stride=2)


def upsample(scale):
    return Layer("upsample", scale=scale)


# ---------------------------------------------------------------------------
# spec builders
# ---------------------------------------------------------------------------


def generator_t_spec(in_channels: int = 1, width: float = 1.0, n_res: int = 9) -> NetworkSpec:
    if in_channels < 1:
        raise SpecError("in_channels must be >= 1")
    c1, c2, c3 = _ch(64, width), _ch(128, width), _ch(256, width)
    layers = [
        conv(in_channels, c1, 7, norm="instance", act="relu", pad_mode="reflect"),
        conv(c1, c2, 3, 2, norm="instance", act="relu"),
        conv(c2, c3, 3, 2, norm="instance", act="relu"),
    ]
    layers += [res(c3, c3, "instance", act=None, pad_mode="reflect") for _ in range(n_res)]
    layers += [deconv(c3, c2, "instance", "relu"), deconv(c2, c1, "instance", "relu")]
    layers.append(conv(c1, in_channels, 7, act="tanh", pad_mode="reflect"))
    return NetworkSpec("G_t", in_channels, tuple(layers))


def encoder_spec(in_channels: int = 1, width: float = 1.0) -> NetworkSpec:
    w = lambda c: _ch(c, width)  # noqa: E731
    bn = "batch"
    layers = [conv(in_channels, w(16), 3, norm=bn, act="relu")]
    layers.append(res(w(16), w(16), bn))
    layers.append(maxpool())
    layers.append(res(w(16), w(32), bn))
    layers.append(maxpool())
    layers += [res(w(32), w(64), bn), res(w(64), w(64), bn)]
    layers.append(maxpool())
    prev = w(64)
    for c, n in ((128, 2), (256, 4), (512, 2)):
        for _ in range(n):
            layers.append(res(prev, w(c), bn))
            prev = w(c)
    layers += [res(prev, prev, bn, dilation=2) for _ in range(2)]
    layers += [conv(prev, prev, 3, norm=bn, act="relu") for _ in range(2)]
    return NetworkSpec("E", in_channels, tuple(layers))


def decoder_u_spec(out_channels: int = 1, width: float = 1.0) -> NetworkSpec:
    if out_channels < 1:
        raise SpecError("out_channels must be >= 1")
    feat = _ch(512, width)
    c = _ch(128, width)
    layers = [conv(feat, c, 3, norm="instance", act="relu")]
    layers += [res(c, c, "instance") for _ in range(4)]
    c64, c32 = _ch(64, width), _ch(32, width)
    layers += [deconv(c, c64, "instance", "relu"), deconv(c64, c64, "instance", "relu"), deconv(c64, c32, "instance", "relu")]
    layers.append(conv(c32, out_channels, 7, act="tanh", pad_mode="reflect"))
    return NetworkSpec("U", feat, tuple(layers))


def classifier_spec(K: int = 5, width: float = 1.0) -> NetworkSpec:
    if K < 2:
        raise SpecError("K must be >= 2")
    feat = _ch(512, width)
    return NetworkSpec("C", feat, (conv(feat, K, 1), upsample(8)))


def patch_discriminator_spec(in_channels: int = 1, width: float = 1.0, aux_head: bool = False, name: str = "D") -> NetworkSpec:
    if in_channels < 1:
        raise SpecError("in_channels must be >= 1")
    chans = [_ch(c, width) for c in (64, 128, 256, 512)]
    layers, prev = [], in_channels
    for i, c in enumerate(chans):
        stride = 2 if i < 3 else 1
        layers.append(conv(prev, c, 4, stride, norm="instance", act="lrelu"))
        prev = c
    last = conv(prev, 1, 4, 1)
    layers.append(last)
    return NetworkSpec(name, in_channels, tuple(layers), aux_head=last if aux_head else None)


# ---------------------------------------------------------------------------
# spec introspection
# ---------------------------------------------------------------------------


def _out_size(n: int, k: int, s: int, p_lo: int, p_hi: int, d: int = 1) -> int:
    return (n + p_lo + p_hi - d * (k - 1) - 1) // s + 1


def _layer_out_shape(layer: Layer, shape: tuple[int, int, int], idx: int) -> tuple[int, int, int]:
    c, h, w = shape
    if layer.kind in ("conv", "deconv", "res") and layer.in_ch != c:
        raise ShapeError(f"layer {idx} ({layer.kind}) expects {layer.in_ch} channels, got {c}")
    if layer.kind == "conv" or layer.kind == "res":
        l, r, t, b = layer.padding
        oh = _out_size(h, layer.kernel, layer.stride, t, b, layer.dilation)
        ow = _out_size(w, layer.kernel, layer.stride, l, r, layer.dilation)
        if layer.kind == "res" and (oh, ow) != (h, w):
            raise ShapeError(f"layer {idx} (res) changes spatial size")
        out = (layer.out_ch, oh, ow)
    elif layer.kind == "deconv":
        p = layer.padding[0]
        oh = (h - 1) * layer.stride - 2 * p + layer.kernel + layer.output_padding
        ow = (w - 1) * layer.stride - 2 * p + layer.kernel + layer.output_padding
        out = (layer.out_ch, oh, ow)
    elif layer.kind == "maxpool":
        if h % 2 or w % 2:
            raise ShapeError(f"layer {idx} (maxpool) needs even input, got {h}x{w}")
        out = (c, h // layer.stride, w // layer.stride)
    elif layer.kind == "upsample":
        out = (c, h * layer.scale, w * layer.scale)
    else:
        raise SpecError(f"layer {idx}: unknown kind {layer.kind!r}")
    if out[1] < 1 or out[2] < 1:
        raise ShapeError(f"layer {idx} ({layer.kind}) produces empty output from {h}x{w}")
    return out


def predict_output_shape(spec: NetworkSpec, in_shape: Sequence[int]) -> tuple[int, int, int]:
    """(C, H, W) of the main output, computed from the spec without parameters."""
    shape = tuple(int(s) for s in in_shape)
    if len(shape) != 3:
        raise ShapeError("in_shape must be (C, H, W)")
    if shape[0] != spec.in_channels:
        raise ShapeError(f"{spec.name} expects {spec.in_channels} input channels, got {shape[0]}")
    for i, layer in enumerate(spec.layers):
        shape = _layer_out_shape(layer, shape, i)
    return shape


def receptive_field(spec: NetworkSpec | Sequence[Layer]) -> int:
    """Side length of the input window seen by one output unit.

    Uses r <- r + (k_eff - 1) * j, j <- j * s over conv and pooling layers.
    """
    layers = spec.layers if isinstance(spec, NetworkSpec) else spec
    r, j = 1, 1
    for i, layer in enumerate(layers):
        if layer.kind not in ("conv", "maxpool"):
            raise SpecError(f"layer {i}: receptive field undefined for kind {layer.kind!r}")
        k_eff = layer.dilation * (layer.kernel - 1) + 1
        r += (k_eff - 1) * j
        j *= layer.stride
    return r


def count_parameters_from_spec(spec: NetworkSpec) -> int:
    """Parameter count from kernel-shape arithmetic alone."""

    def conv_params(cin, cout, k, bias):
        return cin * cout * k * k + (cout if bias else 0)

    def norm_params(kind, c):
        return 2 * c if kind == "batch" else 0

    def layer_params(layer: Layer) -> int:
        if layer.kind in ("conv", "deconv"):
            return conv_params(layer.in_ch, layer.out_ch, layer.kernel, layer.norm is None) + norm_params(layer.norm, layer.out_ch)
        if layer.kind == "res":
            n = conv_params(layer.in_ch, layer.out_ch, 3, False) + conv_params(layer.out_ch, layer.out_ch, 3, False)
            n += 2 * norm_params(layer.norm, layer.out_ch)
            if layer.in_ch != layer.out_ch:
                n += conv_params(layer.in_ch, layer.out_ch, 1, False) + norm_params(layer.norm, layer.out_ch)
            return n
        return 0

    total = sum(layer_params(l) for l in spec.layers)
    if spec.aux_head is not None:
        total += layer_params(spec.aux_head)
    return total


# ---------------------------------------------------------------------------
# torch realization
# ---------------------------------------------------------------------------


def _norm(kind: Optional[str], c: int) -> nn.Module:
    if kind == "batch":
        return nn.BatchNorm2d(c)
    if kind == "instance":
        return nn.InstanceNorm2d(c, affine=False)
    return nn.Identity()


def _act(kind: Optional[str]) -> nn.Module:
    return {
        None: nn.Identity(),
        "relu": nn.ReLU(),
        "lrelu": nn.LeakyReLU(0.2),
        "tanh": nn.Tanh(),
    }[kind]


class _Conv(nn.Module):
    def __init__(self, layer: Layer, k: Optional[int] = None, in_ch=None, out_ch=None, padding=None):
        super().__init__()
        k = layer.kernel if k is None else k
        self.padding = layer.padding if padding is None else padding
        self.pad_mode = "constant" if layer.pad_mode == "zeros" else layer.pad_mode
        self.conv = nn.Conv2d(
            layer.in_ch if in_ch is None else in_ch,
            layer.out_ch if out_ch is None else out_ch,
            k,
            stride=layer.stride,
            dilation=layer.dilation,
            bias=layer.norm is None,
        )

    def forward(self, x):
        if any(self.padding):
            x = F.pad(x, self.padding, mode=self.pad_mode)
        return self.conv(x)


class ConvBlock(nn.Module):
    def __init__(self, layer: Layer):
        super().__init__()
        self.conv = _Conv(layer)
        self.norm = _norm(layer.norm, layer.out_ch)
        self.act = _act(layer.act)

    def forward(self, x):
        return self.act(self.norm(self.conv(x)))


class DeconvBlock(nn.Module):
    def __init__(self, layer: Layer):
        super().__init__()
        self.conv = nn.ConvTranspose2d(
            layer.in_ch, layer.out_ch, layer.kernel, stride=layer.stride,
            padding=layer.padding[0], output_padding=layer.output_padding, bias=layer.norm is None,
        )
        self.norm = _norm(layer.norm, layer.out_ch)
        self.act = _act(layer.act)

    def forward(self, x):
        return self.act(self.norm(self.conv(x)))


class ResBlock(nn.Module):
    """Two 3x3 convs with identity skip (1x1 projection when widths differ)."""

    def __init__(self, layer: Layer):
        super().__init__()
        inner = dataclasses.replace(layer, stride=1)
        self.conv1 = _Conv(inner)
        self.norm1 = _norm(layer.norm, layer.out_ch)
        self.conv2 = _Conv(inner, in_ch=layer.out_ch)
        self.norm2 = _norm(layer.norm, layer.out_ch)
        self.relu = nn.ReLU()
        if layer.in_ch != layer.out_ch:
            self.skip = nn.Sequential(
                _Conv(inner, k=1, padding=(0, 0, 0, 0)), _norm(layer.norm, layer.out_ch)
            )
        else:
            self.skip = nn.Identity()
        self.out_act = _act(layer.act)

    def forward(self, x):
        y = self.relu(self.norm1(self.conv1(x)))
        y = self.norm2(self.conv2(y))
        return self.out_act(y + self.skip(x))


class Upsample(nn.Module):
    def __init__(self, scale: int):
        super().__init__()
        self.scale = scale

    def forward(self, x):
        return F.interpolate(x, scale_factor=self.scale, mode="bilinear", align_corners=False)


def _realize_layer(layer: Layer) -> nn.Module:
    if layer.kind == "conv":
        return ConvBlock(layer)
    if layer.kind == "deconv":
        return DeconvBlock(layer)
    if layer.kind == "res":
        return ResBlock(layer)
    if layer.kind == "maxpool":
        return nn.MaxPool2d(layer.kernel, layer.stride)
    if layer.kind == "upsample":
        return Upsample(layer.scale)
    raise SpecError(f"unknown layer kind {layer.kind!r}")


class Network(nn.Module):
    """A spec plus its parameters. ``forward`` returns the main output;
    ``forward_both`` also returns the auxiliary head when one exists."""

    def __init__(self, spec: NetworkSpec):
        super().__init__()
        self.spec = spec
        self.trunk = nn.Sequential(*[_realize_layer(l) for l in spec.layers[:-1]])
        self.head = _realize_layer(spec.layers[-1])
        self.aux = _realize_layer(spec.aux_head) if spec.aux_head is not None else None

    def forward(self, x):
        return self.head(self.trunk(x))

    def forward_aux(self, x):
        if self.aux is None:
            raise SpecError(f"{self.spec.name} has no auxiliary head")
        return self.aux(self.trunk(x))

    def forward_both(self, x):
        h = self.trunk(x)
        return self.head(h), (self.aux(h) if self.aux is not None else None)


def init_weights(net: nn.Module, generator: Optional[torch.Generator] = None) -> None:
    for m in net.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            with torch.no_grad():
                m.weight.normal_(0.0, INIT_STD, generator=generator)
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, nn.BatchNorm2d):
            with torch.no_grad():
                m.weight.normal_(1.0, INIT_STD, generator=generator)
                m.bias.zero_()


def realize(spec: NetworkSpec, generator: Optional[torch.Generator] = None) -> Network:
    net = Network(spec)
    init_weights(net, generator)
    return net


def build_generator_t(in_channels: int = 1, width: float = 1.0, generator=None) -> Network:
    return realize(generator_t_spec(in_channels, width), generator)


def build_encoder(in_channels: int = 1, width: float = 1.0, generator=None) -> Network:
    return realize(encoder_spec(in_channels, width), generator)


def build_decoder_u(out_channels: int = 1, width: float = 1.0, generator=None) -> Network:
    return realize(decoder_u_spec(out_channels, width), generator)


def build_classifier_c(K: int = 5, width: float = 1.0, generator=None) -> Network:
    return realize(classifier_spec(K, width), generator)


def build_patch_discriminator(in_channels: int = 1, width: float = 1.0, aux_head: bool = False, name="D", generator=None) -> Network:
    return realize(patch_discriminator_spec(in_channels, width, aux_head, name), generator)


def check_input_size(spec: NetworkSpec, h: int, w: int) -> None:
    """Raise ShapeError if the spec cannot take an h x w input; warn if a
    discriminator input is smaller than its receptive field."""
    predict_output_shape(spec, (spec.in_channels, h, w))
    try:
        rf = receptive_field(spec)
    except SpecError:
        return
    if min(h, w) < rf:
        logger.warning("%s: input %dx%d smaller than receptive field %d", spec.name, h, w, rf)


def encoder_downsampling(spec: NetworkSpec) -> int:
    return int(math.prod(l.stride for l in spec.layers if l.kind == "maxpool"))
