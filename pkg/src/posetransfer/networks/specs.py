"""Declarative layer tables for the generators and discriminators.

Every network is described by a :class:`NetworkSpec`, a flat list of
:class:`LayerSpec` rows grouped into named blocks.  The torch modules in
:mod:`posetransfer.networks.modules` are built from these specs, so
:func:`verify_spec` checks exactly what gets instantiated.

Rows marked ``None`` for the market column exist only in the deepfashion
profile.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

from ..pose import NUM_JOINTS

PROFILES = ("market", "deepfashion")
DEFAULT_IMAGE_SIZE = {"market": (128, 64), "deepfashion": (256, 256)}
# number of stride-2 stages in G1 / G2 / D
G1_DOWN = {"market": 3, "deepfashion": 4}
G2_DOWN = {"market": 2, "deepfashion": 3}
D_LAYERS = {"market": 4, "deepfashion": 5}
BOTTLENECK_DIMS = 64
IMAGE_CHANNELS = 3


class SpecError(ValueError):
    """A layer does not chain with its predecessor."""

    def __init__(self, index: int, layer: str, message: str):
        self.index = index
        self.layer = layer
        super().__init__(f"layer {index} ({layer}): {message}")


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str  # conv | deconv | fully-connected | head
    block: str
    block_kind: str  # conv | deconv | residual-block | conv-block | fully-connected | head
    out_channels: int
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    output_padding: int = 0
    activation: str = "relu"  # relu | leaky_relu | tanh | none
    batch_norm: bool = False
    reshape: Optional[tuple[int, int, int]] = None
    zero_init: bool = False


@dataclass(frozen=True)
class NetworkSpec:
    name: str
    profile: str
    layers: tuple[LayerSpec, ...]

    def blocks(self) -> list[tuple[str, str, list[LayerSpec]]]:
        out: list[tuple[str, str, list[LayerSpec]]] = []
        for layer in self.layers:
            if out and out[-1][0] == layer.block:
                out[-1][2].append(layer)
            else:
                out.append((layer.block, layer.block_kind, [layer]))
        return out

    def block_names(self) -> list[str]:
        return [b[0] for b in self.blocks()]


def _check_profile(profile: str) -> None:
    if profile not in PROFILES:
        raise ValueError(f"unknown profile {profile!r}; expected one of {PROFILES}")


def _rows_to_layers(rows, profile: str, width_divisor: int) -> list[LayerSpec]:
    """``rows``: (block, block_kind, kind, k, s, p, out_market, out_deepfashion[, extra])."""
    layers = []
    counters: dict[str, int] = {}
    for row in rows:
        block, block_kind, kind, k, s, p, om, od, *extra = row
        out = om if profile == "market" else od
        if out is None:
            continue
        counters[block] = counters.get(block, 0) + 1
        opts = extra[0] if extra else {}
        scale = opts.pop("fixed", False)
        channels = out if scale else max(1, out // width_divisor)
        layers.append(LayerSpec(
            name=f"{block}.{counters[block]}", kind=kind, block=block, block_kind=block_kind,
            out_channels=channels, kernel=k, stride=s, padding=p, **opts,
        ))
    return layers


def g1_encoder_spec(profile: str = "market", width_divisor: int = 1) -> NetworkSpec:
    _check_profile(profile)
    R = "residual-block"
    rows = [
        ("Con1", "conv", "conv", 3, 1, 1, 128, 128),
        ("ResB1", R, "conv", 3, 1, 1, 128, 128),
        ("ResB1", R, "conv", 3, 1, 1, 128, 128),
        ("ResB1", R, "conv", 3, 2, 1, 256, 256),
        ("ResB2", R, "conv", 3, 1, 1, 256, 256),
        ("ResB2", R, "conv", 3, 1, 1, 256, 256),
        ("ResB2", R, "conv", 3, 2, 1, 512, 512),
        ("ResB3", R, "conv", 3, 1, 1, 512, 512),
        ("ResB3", R, "conv", 3, 1, 1, 512, 512),
        ("ResB3", R, "conv", 3, 2, 1, 1024, 1024),
        ("ResB4", R, "conv", 3, 1, 1, 1024, 1024),
        ("ResB4", R, "conv", 3, 1, 1, 1024, 1024),
        ("Con2", "conv", "conv", 3, 2, 1, None, 2048),
        ("ResB5", R, "conv", 3, 1, 1, None, 2048),
        ("ResB5", R, "conv", 3, 1, 1, None, 2048),
        ("FC", "fully-connected", "fully-connected", 0, 1, 0, BOTTLENECK_DIMS, BOTTLENECK_DIMS,
         {"fixed": True, "activation": "none"}),
    ]
    return NetworkSpec("G1.encoder", profile, tuple(_rows_to_layers(rows, profile, width_divisor)))


def g1_decoder_spec(profile: str = "market", image_size: Optional[tuple[int, int]] = None,
                    width_divisor: int = 1) -> NetworkSpec:
    """Decoder of G1.  The FC width is derived from the bottleneck grid."""
    _check_profile(profile)
    h, w = image_size or DEFAULT_IMAGE_SIZE[profile]
    R = "residual-block"
    # the three leading deconvs are 3x3/s2/p1; output_padding=1 makes them exact x2
    up = {"output_padding": 1}
    rows = [
        ("ResB1", R, "conv", 3, 1, 1, 1024, 2048),
        ("ResB1", R, "conv", 3, 1, 1, 1024, 2048),
        ("ResB1", R, "deconv", 3, 2, 1, 512, 1024, dict(up)),
        ("ResB2", R, "conv", 3, 1, 1, 512, 1024),
        ("ResB2", R, "conv", 3, 1, 1, 512, 1024),
        ("ResB2", R, "deconv", 3, 2, 1, 256, 512, dict(up)),
        ("ResB3", R, "conv", 3, 1, 1, 256, 512),
        ("ResB3", R, "conv", 3, 1, 1, 256, 512),
        ("ResB3", R, "deconv", 3, 2, 1, 128, 256, dict(up)),
        ("ResB4", R, "conv", 3, 1, 1, 128, 256),
        ("ResB4", R, "conv", 3, 1, 1, 128, 256),
        ("Dec1", "deconv", "deconv", 3, 2, 1, None, 128, dict(up)),
        ("ResB5", R, "conv", 3, 1, 1, None, 128),
        ("ResB5", R, "conv", 3, 1, 1, None, 128),
        ("Con1", "conv", "conv", 3, 1, 1, IMAGE_CHANNELS, IMAGE_CHANNELS,
         {"fixed": True, "activation": "tanh"}),
    ]
    body = _rows_to_layers(rows, profile, width_divisor)
    scale = 2 ** G1_DOWN[profile]
    grid = (body[0].out_channels, h // scale, w // scale)
    fc = LayerSpec(name="FC.1", kind="fully-connected", block="FC", block_kind="fully-connected",
                   out_channels=math.prod(grid), activation="none", reshape=grid)
    return NetworkSpec("G1.decoder", profile, (fc, *body))


def g2_encoder_spec(profile: str = "market", width_divisor: int = 1) -> NetworkSpec:
    _check_profile(profile)
    B = "conv-block"
    rows = [
        ("Con1", "conv", "conv", 3, 1, 1, 128, 128),
        ("ConB1", B, "conv", 3, 1, 1, 128, 128),
        ("ConB1", B, "conv", 3, 1, 1, 128, 128),
        ("ConB1", B, "conv", 4, 2, 1, 256, 256),
        ("ConB2", B, "conv", 3, 1, 1, 256, 256),
        ("ConB2", B, "conv", 3, 1, 1, 256, 256),
        ("ConB2", B, "conv", 4, 2, 1, 512, 512),
        ("ConB3", B, "conv", 3, 1, 1, 512, 512),
        ("ConB3", B, "conv", 3, 1, 1, 512, 512),
        ("Con2", "conv", "conv", 4, 2, 1, None, 1024),
        ("ConB4", B, "conv", 3, 1, 1, None, 1024),
        ("ConB4", B, "conv", 3, 1, 1, None, 1024),
    ]
    return NetworkSpec("G2.encoder", profile, tuple(_rows_to_layers(rows, profile, width_divisor)))


def g2_decoder_spec(profile: str = "market", width_divisor: int = 1) -> NetworkSpec:
    _check_profile(profile)
    B = "conv-block"
    rows = [
        ("ConB1", B, "conv", 3, 1, 1, 512, 1024),
        ("ConB1", B, "conv", 3, 1, 1, 512, 1024),
        ("ConB1", B, "deconv", 4, 2, 1, 256, 512),
        ("ConB2", B, "conv", 3, 1, 1, 256, 512),
        ("ConB2", B, "conv", 3, 1, 1, 256, 512),
        ("ConB2", B, "deconv", 4, 2, 1, 128, 256),
        ("ConB3", B, "conv", 3, 1, 1, 128, 256),
        ("ConB3", B, "conv", 3, 1, 1, 128, 256),
        ("Dec1", "deconv", "deconv", 4, 2, 1, None, 128),
        ("ConB4", B, "conv", 3, 1, 1, None, 128),
        ("ConB4", B, "conv", 3, 1, 1, None, 128),
        ("Con1", "conv", "conv", 3, 1, 1, IMAGE_CHANNELS, IMAGE_CHANNELS,
         {"fixed": True, "activation": "tanh", "zero_init": True}),
    ]
    return NetworkSpec("G2.decoder", profile, tuple(_rows_to_layers(rows, profile, width_divisor)))


def discriminator_spec(profile: str = "market", width_divisor: int = 1,
                       n_layers: Optional[int] = None) -> NetworkSpec:
    """Conv stack plus a global-average-pool / linear logit head.

    ``n_layers`` truncates the stack; only used for shrunken test replicas.
    """
    _check_profile(profile)
    rows = [
        ("Con1", "conv", "conv", 4, 2, 1, 128, 128, {"activation": "leaky_relu"}),
        ("Con2", "conv", "conv", 4, 2, 1, 256, 256, {"activation": "leaky_relu", "batch_norm": True}),
        ("Con3", "conv", "conv", 4, 2, 1, 512, 512, {"activation": "leaky_relu", "batch_norm": True}),
        ("Con4", "conv", "conv", 4, 2, 1, 1024, 1024, {"activation": "leaky_relu", "batch_norm": True}),
        ("Con5", "conv", "conv", 4, 2, 1, None, 2048, {"activation": "leaky_relu", "batch_norm": True}),
    ]
    layers = _rows_to_layers(rows, profile, width_divisor)
    if n_layers is not None:
        layers = layers[:n_layers]
    head = LayerSpec(name="Head.1", kind="head", block="Head", block_kind="head",
                     out_channels=1, activation="none")
    return NetworkSpec("D", profile, (*layers, head))


def all_specs(profile: str, image_size: Optional[tuple[int, int]] = None,
              width_divisor: int = 1) -> list[tuple[NetworkSpec, tuple[int, ...]]]:
    """The five table specs paired with the input shape each one consumes."""
    h, w = image_size or DEFAULT_IMAGE_SIZE[profile]
    g1e = g1_encoder_spec(profile, width_divisor)
    g2e = g2_encoder_spec(profile, width_divisor)
    g2e_out = verify_spec(g2e, (2 * IMAGE_CHANNELS, h, w))[-1][1]
    return [
        (g1e, (IMAGE_CHANNELS + NUM_JOINTS, h, w)),
        (g1_decoder_spec(profile, (h, w), width_divisor), (BOTTLENECK_DIMS,)),
        (g2e, (2 * IMAGE_CHANNELS, h, w)),
        (g2_decoder_spec(profile, width_divisor), g2e_out),
        (discriminator_spec(profile, width_divisor), (2 * IMAGE_CHANNELS, h, w)),
    ]


def verify_spec(spec: NetworkSpec, input_shape: tuple[int, ...]) -> list[tuple[str, tuple[int, ...]]]:
    """Trace ``input_shape`` through ``spec``; return ``[(layer name, output shape)]``.

    Every conv/deconv must scale its input exactly by its stride, residual
    spans must preserve their input shape, and FC reshapes must match the FC
    width.  The first violation raises :class:`SpecError`.
    """
    shape = tuple(int(d) for d in input_shape)
    trace: list[tuple[str, tuple[int, ...]]] = []
    index = 0
    for _, block_kind, layers in spec.blocks():
        block_in = shape
        span_end = len(layers) - 1 if (block_kind == "residual-block" and len(layers) > 1
                                       and layers[-1].stride > 1) else len(layers)
        for i, layer in enumerate(layers):
            shape = _layer_out(layer, shape, index)
            trace.append((layer.name, shape))
            if block_kind == "residual-block" and i == span_end - 1 and shape != block_in:
                raise SpecError(index, layer.name,
                                f"residual span maps {block_in} to {shape}; shapes must match")
            index += 1
    return trace


def _layer_out(layer: LayerSpec, shape: tuple[int, ...], index: int) -> tuple[int, ...]:
    if layer.kind in ("conv", "deconv", "head") and len(shape) != 3:
        raise SpecError(index, layer.name, f"expects a (C, H, W) input, got {shape}")
    if layer.kind == "conv":
        _, h, w = shape
        k, s, p = layer.kernel, layer.stride, layer.padding
        oh, ow = (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1
        if oh < 1 or ow < 1 or oh * s != h or ow * s != w:
            raise SpecError(index, layer.name,
                            f"conv k={k} s={s} p={p} maps {h}x{w} to {oh}x{ow}, "
                            f"not an exact 1/{s} scaling")
        return (layer.out_channels, oh, ow)
    if layer.kind == "deconv":
        _, h, w = shape
        k, s, p, op = layer.kernel, layer.stride, layer.padding, layer.output_padding
        oh, ow = (h - 1) * s - 2 * p + k + op, (w - 1) * s - 2 * p + k + op
        if oh != h * s or ow != w * s:
            raise SpecError(index, layer.name,
                            f"deconv k={k} s={s} p={p} maps {h}x{w} to {oh}x{ow}, "
                            f"not an exact x{s} scaling")
        return (layer.out_channels, oh, ow)
    if layer.kind == "fully-connected":
        if layer.reshape is not None:
            if math.prod(layer.reshape) != layer.out_channels:
                raise SpecError(index, layer.name,
                                f"reshape {layer.reshape} does not hold {layer.out_channels} features")
            return tuple(layer.reshape)
        return (layer.out_channels,)
    if layer.kind == "head":
        return (layer.out_channels,)
    raise SpecError(index, layer.name, f"unknown layer kind {layer.kind!r}")


def with_layer(spec: NetworkSpec, name: str, **changes) -> NetworkSpec:
    """Copy of ``spec`` with fields of layer ``name`` replaced."""
    layers = tuple(replace(l, **changes) if l.name == name else l for l in spec.layers)
    if layers == spec.layers:
        raise KeyError(name)
    return replace(spec, layers=layers)
