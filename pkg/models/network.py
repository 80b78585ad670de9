"""
Residual U-Net with configurable per-level channel allocation.

Layout (5 encoder units, 4 decoder units):

    unit 1-4   residual unit, first convolution stride 2   -> H/2, H/4, H/8, H/16
    unit 5     residual unit, stride 1 (bottom)            -> H/16
    decoder    transposed conv (stride 2) + one residual stage, concatenating
               the encoder output of the same resolution

Every encoder unit's output is exposed as a tap for the decorrelation loss.
With instance normalization the baseline (32, 64, 128, 256, 512) network has
6,494,716 parameters and the re-weighted (248, 248, 112, 112, 112) network
6,456,844; batch normalization adds two parameters per normalized channel.
"""

import logging
from dataclasses import dataclass, field

import torch
import torch.nn as nn

from utils.exceptions import ShapeMismatchError

logger = logging.getLogger(__name__)

NUM_LEVELS = 5
BASELINE_CHANNELS = (32, 64, 128, 256, 512)
REWEIGHTED_CHANNELS = (248, 248, 112, 112, 112)
BLOCK_KINDS = ("residual", "plain")
NORMS = ("batch", "instance")


@dataclass
class ChannelConfig:
    channels: tuple = REWEIGHTED_CHANNELS

    def __post_init__(self):
        channels = tuple(self.channels)
        if len(channels) != NUM_LEVELS:
            raise ValueError(f"channel config needs exactly {NUM_LEVELS} entries, got {len(channels)}")
        for c in channels:
            if isinstance(c, bool) or int(c) != c or c < 1:
                raise ValueError(f"channel counts must be positive integers, got {channels}")
        self.channels = tuple(int(c) for c in channels)


@dataclass
class NetworkSpec:
    channel_config: ChannelConfig = field(default_factory=ChannelConfig)
    in_channels: int = 1
    out_channels: int = 1
    block_kind: str = "residual"
    norm: str = "batch"

    def __post_init__(self):
        if isinstance(self.channel_config, (list, tuple)):
            self.channel_config = ChannelConfig(tuple(self.channel_config))
        elif isinstance(self.channel_config, dict):
            self.channel_config = ChannelConfig(**self.channel_config)
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("in_channels and out_channels must be >= 1")
        if self.block_kind not in BLOCK_KINDS:
            raise ValueError(f"block_kind must be one of {BLOCK_KINDS}")
        if self.norm not in NORMS:
            raise ValueError(f"norm must be one of {NORMS}")

    @property
    def channels(self):
        return self.channel_config.channels

    def to_dict(self):
        return {
            "channels": list(self.channels),
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "block_kind": self.block_kind,
            "norm": self.norm,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            channel_config=ChannelConfig(tuple(data["channels"])),
            in_channels=data.get("in_channels", 1),
            out_channels=data.get("out_channels", 1),
            block_kind=data.get("block_kind", "residual"),
            norm=data.get("norm", "batch"),
        )


def _norm(kind, channels):
    if kind == "instance":
        return nn.InstanceNorm2d(channels)
    return nn.BatchNorm2d(channels)


def _conv_stage(in_ch, out_ch, stride, norm, conv_only=False):
    conv = nn.Conv2d(in_ch, out_ch, kernel_size=3, stride=stride, padding=1)
    if conv_only:
        return conv
    return nn.Sequential(conv, _norm(norm, out_ch), nn.PReLU())


class ResidualUnit(nn.Module):
    """``stages`` conv-norm-PReLU stages plus a shortcut.

    The shortcut is the identity, a 1×1 projection when only the channel count
    changes, or a strided 3×3 projection when the unit downsamples.
    """

    def __init__(self, in_ch, out_ch, stride=1, stages=2, norm="batch", residual=True, last_conv_only=False):
        super().__init__()
        layers = []
        ch = in_ch
        for i in range(stages):
            conv_only = last_conv_only and i == stages - 1
            layers.append(_conv_stage(ch, out_ch, stride if i == 0 else 1, norm, conv_only))
            ch = out_ch
        self.conv = nn.Sequential(*layers)

        self.shortcut = None
        if residual:
            if stride != 1:
                self.shortcut = nn.Conv2d(in_ch, out_ch, kernel_size=3, stride=stride, padding=1)
            elif in_ch != out_ch:
                self.shortcut = nn.Conv2d(in_ch, out_ch, kernel_size=1)
            else:
                self.shortcut = nn.Identity()

    def forward(self, x):
        out = self.conv(x)
        if self.shortcut is not None:
            out = out + self.shortcut(x)
        return out


class UpUnit(nn.Module):
    def __init__(self, in_ch, out_ch, norm="batch", residual=True, is_top=False):
        super().__init__()
        self.up = nn.Sequential(
            nn.ConvTranspose2d(in_ch, out_ch, kernel_size=3, stride=2, padding=1, output_padding=1),
            _norm(norm, out_ch),
            nn.PReLU(),
        )
        self.refine = ResidualUnit(out_ch, out_ch, stages=1, norm=norm, residual=residual, last_conv_only=is_top)

    def forward(self, x):
        return self.refine(self.up(x))


class ResUNet(nn.Module):
    def __init__(self, spec):
        super().__init__()
        self.spec = spec
        c = spec.channels
        residual = spec.block_kind == "residual"
        norm = spec.norm

        self.encoder = nn.ModuleList()
        in_ch = spec.in_channels
        for level, out_ch in enumerate(c):
            stride = 2 if level < NUM_LEVELS - 1 else 1
            self.encoder.append(ResidualUnit(in_ch, out_ch, stride=stride, norm=norm, residual=residual))
            in_ch = out_ch

        # decoder[k] consumes cat(encoder_k, deeper stream) and restores level k's input resolution
        self.decoder = nn.ModuleList(
            [
                UpUnit(2 * c[0], spec.out_channels, norm, residual, is_top=True),
                UpUnit(2 * c[1], c[0], norm, residual),
                UpUnit(2 * c[2], c[1], norm, residual),
                UpUnit(c[3] + c[4], c[2], norm, residual),
            ]
        )

    def forward_with_taps(self, x):
        _check_spatial(x)
        taps = []
        out = x
        for unit in self.encoder:
            out = unit(out)
            taps.append(out)
        stream = taps[-1]
        for level in range(NUM_LEVELS - 2, -1, -1):
            stream = self.decoder[level](torch.cat([taps[level], stream], dim=1))
        return stream, taps

    def forward(self, x):
        logits, _ = self.forward_with_taps(x)
        return logits

    def encoder_kernels(self):
        """Weights of every encoder convolution (for the orthogonality penalty)."""
        return [m.weight for m in self.encoder.modules() if isinstance(m, nn.Conv2d)]


def _check_spatial(x):
    if x.dim() != 4:
        raise ShapeMismatchError(f"expected an (N, C, H, W) batch, got shape {tuple(x.shape)}")
    height, width = x.shape[-2:]
    if height % 16 or width % 16:
        pad_h = (-height) % 16
        pad_w = (-width) % 16
        raise ShapeMismatchError(
            f"spatial size {height}x{width} is not divisible by 16; pad by ({pad_h}, {pad_w}) "
            f"to {height + pad_h}x{width + pad_w}"
        )


def build_network(spec):
    network = ResUNet(spec)
    logger.info(
        "Built %s network with channels %s (%d parameters)",
        spec.block_kind,
        spec.channels,
        count_parameters(network),
    )
    return network


def forward_with_taps(network, batch):
    """(logits (N, out, H, W), [5 taps of shape (N, C_l, H_l, W_l)])."""
    return network.forward_with_taps(batch)


def expected_tap_shapes(spec, height, width):
    sizes = [(height // 2, width // 2), (height // 4, width // 4), (height // 8, width // 8)]
    sizes += [(height // 16, width // 16)] * 2
    return [(c, h, w) for c, (h, w) in zip(spec.channels, sizes)]


def count_parameters(network):
    return sum(p.numel() for p in network.parameters() if p.requires_grad)
