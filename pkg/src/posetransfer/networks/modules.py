"""Torch modules built from the layer tables."""
from __future__ import annotations

from typing import Optional

import torch
from torch import nn

from ..pose import NUM_JOINTS
from .specs import (
    DEFAULT_IMAGE_SIZE, G1_DOWN, G2_DOWN, IMAGE_CHANNELS, LayerSpec, NetworkSpec,
    discriminator_spec, g1_decoder_spec, g1_encoder_spec, g2_decoder_spec, g2_encoder_spec,
    verify_spec,
)

LEAKY_SLOPE = 0.2
INIT_STD = 0.02


def _activation(name: str) -> nn.Module:
    if name == "relu":
        return nn.ReLU()
    if name == "leaky_relu":
        return nn.LeakyReLU(LEAKY_SLOPE)
    if name == "tanh":
        return nn.Tanh()
    if name == "none":
        return nn.Identity()
    raise ValueError(f"unknown activation {name!r}")


class ConvUnit(nn.Module):
    def __init__(self, layer: LayerSpec, in_channels: int):
        super().__init__()
        if layer.kind == "conv":
            self.conv = nn.Conv2d(in_channels, layer.out_channels, layer.kernel,
                                  layer.stride, layer.padding)
        else:
            self.conv = nn.ConvTranspose2d(in_channels, layer.out_channels, layer.kernel,
                                           layer.stride, layer.padding, layer.output_padding)
        self.norm = nn.BatchNorm2d(layer.out_channels) if layer.batch_norm else nn.Identity()
        self.act = _activation(layer.activation)
        self.zero_init = layer.zero_init

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.act(self.norm(self.conv(x)))


class ResidualBlock(nn.Module):
    """``x + span(x)``, then an optional strided (de)conv tail."""

    def __init__(self, units: list[ConvUnit], has_tail: bool):
        super().__init__()
        self.span = nn.Sequential(*(units[:-1] if has_tail else units))
        self.tail = units[-1] if has_tail else None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = x + self.span(x)
        return self.tail(h) if self.tail is not None else h


class FullyConnected(nn.Module):
    def __init__(self, layer: LayerSpec, in_features: int):
        super().__init__()
        self.linear = nn.Linear(in_features, layer.out_channels)
        self.reshape = layer.reshape

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = self.linear(x.flatten(1))
        if self.reshape is not None:
            out = out.view(out.shape[0], *self.reshape)
        return out


class LogitHead(nn.Module):
    def __init__(self, in_channels: int):
        super().__init__()
        self.linear = nn.Linear(in_channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.linear(x.mean(dim=(2, 3))).squeeze(1)


class SkipFuse(nn.Module):
    """Concatenate an encoder feature and project back with a 1x1 conv."""

    def __init__(self, channels: int, skip_channels: int):
        super().__init__()
        self.proj = nn.Conv2d(channels + skip_channels, channels, 1)

    def forward(self, x: torch.Tensor, skip: torch.Tensor) -> torch.Tensor:
        return self.proj(torch.cat([x, skip], dim=1))


def build_blocks(spec: NetworkSpec, input_shape: tuple[int, ...]):
    """Instantiate ``spec`` block by block.

    Returns ``(ModuleDict of blocks, {block: (input shape, output shape)})``.
    """
    trace = verify_spec(spec, input_shape)
    shapes = [tuple(input_shape)] + [s for _, s in trace]
    modules = nn.ModuleDict()
    io: dict[str, tuple[tuple[int, ...], tuple[int, ...]]] = {}
    pos = 0
    for name, kind, layers in spec.blocks():
        in_shape = shapes[pos]
        if kind == "fully-connected":
            (layer,) = layers
            in_features = 1
            for d in in_shape:
                in_features *= d
            mod: nn.Module = FullyConnected(layer, in_features)
        elif kind == "head":
            mod = LogitHead(in_shape[0])
        else:
            units = [ConvUnit(layer, shapes[pos + i][0]) for i, layer in enumerate(layers)]
            if kind == "residual-block":
                mod = ResidualBlock(units, has_tail=len(layers) > 1 and layers[-1].stride > 1)
            elif len(units) == 1:
                mod = units[0]
            else:
                mod = nn.Sequential(*units)
        modules[name] = mod
        pos += len(layers)
        io[name] = (in_shape, shapes[pos])
    return modules, io


def init_weights(module: nn.Module, std: float = INIT_STD) -> None:
    """Normal(0, std) weights and zero biases; zero for flagged output layers."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            nn.init.normal_(m.weight, 0.0, std)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.normal_(m.weight, 1.0, std)
            nn.init.zeros_(m.bias)
    for m in module.modules():
        if isinstance(m, ConvUnit) and m.zero_init:
            nn.init.zeros_(m.conv.weight)
            nn.init.zeros_(m.conv.bias)


def _as_batch(t: torch.Tensor, what: str) -> tuple[torch.Tensor, bool]:
    if t.dim() == 3:
        return t.unsqueeze(0), True
    if t.dim() == 4:
        return t, False
    raise ValueError(f"{what}: expected (C, H, W) or (B, C, H, W), got {tuple(t.shape)}")


def _check_size(h: int, w: int, n_down: int, what: str) -> None:
    f = 2 ** n_down
    if h % f or w % f:
        raise ValueError(f"{what}: spatial size {h}x{w} must be divisible by {f}")


class _Network(nn.Module):
    profile: str
    image_size: tuple[int, int]
    width_divisor: int

    def arch(self) -> dict:
        return {"kind": type(self).__name__, "profile": self.profile,
                "image_size": list(self.image_size), "width_divisor": self.width_divisor}


class GeneratorG1(_Network):
    """Coarse generator: (x, p) -> y1_hat, U-Net style with an FC bottleneck."""

    def __init__(self, profile: str = "market", image_size: Optional[tuple[int, int]] = None,
                 width_divisor: int = 1):
        super().__init__()
        self.profile = profile
        self.image_size = tuple(image_size or DEFAULT_IMAGE_SIZE[profile])
        self.width_divisor = width_divisor
        h, w = self.image_size
        _check_size(h, w, G1_DOWN[profile], "G1")
        self.encoder_spec = g1_encoder_spec(profile, width_divisor)
        self.decoder_spec = g1_decoder_spec(profile, self.image_size, width_divisor)
        self.encoder, enc_io = build_blocks(self.encoder_spec, (IMAGE_CHANNELS + NUM_JOINTS, h, w))
        self.decoder, dec_io = build_blocks(self.decoder_spec, enc_io["FC"][1])

        # latest encoder feature at each resolution feeds the decoder
        # residual block consuming that resolution
        by_res: dict[tuple[int, int], tuple[str, int]] = {}
        for name, (_, out) in enc_io.items():
            if len(out) == 3:
                by_res[out[1:]] = (name, out[0])
        self.skip_sources: dict[str, str] = {}
        self.skips = nn.ModuleDict()
        for name, kind, _ in self.decoder_spec.blocks():
            in_shape = dec_io[name][0]
            if kind == "residual-block" and in_shape[1:] in by_res:
                src, ch = by_res[in_shape[1:]]
                self.skip_sources[name] = src
                self.skips[name] = SkipFuse(in_shape[0], ch)
        init_weights(self)

    def encode(self, x: torch.Tensor, p: torch.Tensor):
        h = torch.cat([x, p], dim=1)
        feats = {}
        for name, block in self.encoder.items():
            h = block(h)
            feats[name] = h
        return h, feats

    def forward(self, x: torch.Tensor, p: torch.Tensor) -> torch.Tensor:
        x, squeeze = _as_batch(x, "G1 image")
        p, _ = _as_batch(p, "G1 pose")
        if x.shape[0] != p.shape[0] or x.shape[2:] != p.shape[2:]:
            raise ValueError(f"G1: image {tuple(x.shape)} and pose {tuple(p.shape)} do not match")
        if x.shape[1] != IMAGE_CHANNELS or p.shape[1] != NUM_JOINTS:
            raise ValueError(f"G1: expected {IMAGE_CHANNELS}+{NUM_JOINTS} channels, "
                             f"got {x.shape[1]}+{p.shape[1]}")
        if tuple(x.shape[2:]) != self.image_size:
            _check_size(x.shape[2], x.shape[3], G1_DOWN[self.profile], "G1")
            raise ValueError(f"G1 built for {self.image_size}, got {tuple(x.shape[2:])}")
        h, feats = self.encode(x, p)
        for name, block in self.decoder.items():
            if name in self.skips:
                h = self.skips[name](h, feats[self.skip_sources[name]])
            h = block(h)
        return h.squeeze(0) if squeeze else h


class GeneratorG2(_Network):
    """Fully convolutional refinement generator: (x, y1_hat) -> difference map."""

    def __init__(self, profile: str = "market", image_size: Optional[tuple[int, int]] = None,
                 width_divisor: int = 1):
        super().__init__()
        self.profile = profile
        self.image_size = tuple(image_size or DEFAULT_IMAGE_SIZE[profile])
        self.width_divisor = width_divisor
        h, w = self.image_size
        _check_size(h, w, G2_DOWN[profile], "G2")
        self.encoder_spec = g2_encoder_spec(profile, width_divisor)
        self.decoder_spec = g2_decoder_spec(profile, width_divisor)
        self.encoder, enc_io = build_blocks(self.encoder_spec, (2 * IMAGE_CHANNELS, h, w))
        last = list(enc_io.values())[-1][1]
        self.decoder, _ = build_blocks(self.decoder_spec, last)
        init_weights(self)

    def forward(self, x: torch.Tensor, y1_hat: torch.Tensor) -> torch.Tensor:
        x, squeeze = _as_batch(x, "G2 image")
        y1_hat, _ = _as_batch(y1_hat, "G2 coarse image")
        if x.shape != y1_hat.shape:
            raise ValueError(f"G2: image {tuple(x.shape)} and coarse {tuple(y1_hat.shape)} differ")
        if tuple(x.shape[2:]) != self.image_size:
            raise ValueError(f"G2 built for {self.image_size}, got {tuple(x.shape[2:])}")
        h = torch.cat([x, y1_hat], dim=1)
        for block in self.encoder.values():
            h = block(h)
        for block in self.decoder.values():
            h = block(h)
        return h.squeeze(0) if squeeze else h


class Discriminator(_Network):
    """Conditional discriminator on concat(x, candidate); one logit per pair."""

    def __init__(self, profile: str = "market", image_size: Optional[tuple[int, int]] = None,
                 width_divisor: int = 1, n_layers: Optional[int] = None):
        super().__init__()
        self.profile = profile
        self.image_size = tuple(image_size or DEFAULT_IMAGE_SIZE[profile])
        self.width_divisor = width_divisor
        self.n_layers = n_layers
        self.spec = discriminator_spec(profile, width_divisor, n_layers)
        self.blocks, _ = build_blocks(self.spec, (2 * IMAGE_CHANNELS, *self.image_size))
        init_weights(self)

    def arch(self) -> dict:
        return {**super().arch(), "n_layers": self.n_layers}

    def forward(self, x_cond: torch.Tensor, candidate: torch.Tensor) -> torch.Tensor:
        x_cond, squeeze = _as_batch(x_cond, "D condition")
        candidate, _ = _as_batch(candidate, "D candidate")
        if x_cond.shape != candidate.shape:
            raise ValueError(f"D: condition {tuple(x_cond.shape)} and candidate "
                             f"{tuple(candidate.shape)} differ")
        if tuple(x_cond.shape[2:]) != self.image_size:
            raise ValueError(f"D operates at {self.image_size}, got {tuple(x_cond.shape[2:])}")
        h = torch.cat([x_cond, candidate], dim=1)
        for block in self.blocks.values():
            h = block(h)
        return h.squeeze(0) if squeeze else h


def merge(y1_hat: torch.Tensor, y2_hat: torch.Tensor, w1: float = 1.0, w2: float = 1.0) -> torch.Tensor:
    """Weighted sum of the coarse image and the difference map, clamped to [-1, 1]."""
    if y1_hat.shape != y2_hat.shape:
        raise ValueError(f"merge: shapes {tuple(y1_hat.shape)} and {tuple(y2_hat.shape)} differ")
    return torch.clamp(w1 * y1_hat + w2 * y2_hat, -1.0, 1.0)


def build_network(arch: dict) -> _Network:
    """Rebuild a network from :meth:`_Network.arch` output."""
    kinds = {"GeneratorG1": GeneratorG1, "GeneratorG2": GeneratorG2, "Discriminator": Discriminator}
    arch = dict(arch)
    cls = kinds[arch.pop("kind")]
    arch["image_size"] = tuple(arch["image_size"])
    return cls(**arch)
