"""
DEFN Network
Dual-encoder volumetric segmentation network with frequency-domain blocks
"""

import logging
from typing import List, Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import NetConfig
from .errors import ConfigError, DataError

logger = logging.getLogger(__name__)

SPATIAL_DIMS = (2, 3, 4)


class FuGH(nn.Module):
    """Grouped pointwise channel mixing on the real and imaginary spectra, with residuals.

    The spectrum is taken with a real FFT so the inverse is real by construction.
    """

    def __init__(self, channels: int, groups: int = 4, split_weights: bool = False):
        super().__init__()
        if groups < 1 or channels % groups:
            raise ConfigError(f"FuGH channels ({channels}) must be divisible by groups ({groups})")
        self.channels = channels
        self.groups = groups
        self.conv1 = nn.Conv3d(channels, channels, 1, groups=groups, bias=False)
        self.conv2 = nn.Conv3d(channels, channels, 1, groups=groups, bias=False)
        if split_weights:
            self.conv1_imag = nn.Conv3d(channels, channels, 1, groups=groups, bias=False)
            self.conv2_imag = nn.Conv3d(channels, channels, 1, groups=groups, bias=False)
        else:
            self.conv1_imag = None
            self.conv2_imag = None

    def _mix(self, u: torch.Tensor, conv1: nn.Module, conv2: nn.Module) -> torch.Tensor:
        return conv2(F.gelu(conv1(u))) + u

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.channels:
            raise DataError(f"FuGH expects {self.channels} channels, got {x.shape[1]}")
        D, H, W = x.shape[2:]
        if min(D, H, W) < 2:
            raise DataError(f"FuGH needs spatial dims >= 2, got {(D, H, W)}")
        spectrum = torch.fft.rfftn(x, dim=SPATIAL_DIMS, norm='ortho')
        real = self._mix(spectrum.real, self.conv1, self.conv2)
        if self.conv1_imag is None:
            imag = self._mix(spectrum.imag, self.conv1, self.conv2)
        else:
            imag = self._mix(spectrum.imag, self.conv1_imag, self.conv2_imag)
        return torch.fft.irfftn(torch.complex(real, imag), s=(D, H, W), dim=SPATIAL_DIMS, norm='ortho')


class S3DSA(nn.Module):
    """Spatial gate: x * sigmoid(conv3d(x))"""

    def __init__(self, channels: int, kernel_size: int = 3):
        super().__init__()
        self.conv = nn.Conv3d(channels, channels, kernel_size, padding=kernel_size // 2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x * torch.sigmoid(self.conv(x))


class SEBlock(nn.Module):
    def __init__(self, channels: int, ratio: int = 4):
        super().__init__()
        if channels < ratio:
            raise ConfigError(f"SE channels ({channels}) must be >= ratio ({ratio})")
        self.fc1 = nn.Linear(channels, channels // ratio)
        self.fc2 = nn.Linear(channels // ratio, channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        pooled = x.mean(dim=SPATIAL_DIMS)
        gate = torch.sigmoid(self.fc2(F.gelu(self.fc1(pooled))))
        return x * gate[:, :, None, None, None]


class ChannelLayerNorm(nn.Module):
    """LayerNorm over the channel axis of a (B, C, D, H, W) tensor"""

    def __init__(self, channels: int, eps: float = 1e-6):
        super().__init__()
        self.norm = nn.LayerNorm(channels, eps=eps)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.norm(x.permute(0, 2, 3, 4, 1)).permute(0, 4, 1, 2, 3)


class DropPath(nn.Module):
    """Per-sample stochastic depth; identity in eval mode"""

    def __init__(self, rate: float = 0.0):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ConfigError(f"droppath rate must be in [0, 1), got {rate}")
        self.rate = rate

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if not self.training or self.rate == 0.0:
            return x
        keep = 1.0 - self.rate
        mask = x.new_empty((x.shape[0],) + (1,) * (x.dim() - 1)).bernoulli_(keep)
        return x * mask / keep


class HSEBlock(nn.Module):
    """FuGH followed by an inverted-bottleneck conv stack with SE recalibration and a residual"""

    def __init__(self, channels: int, groups: int = 4, se_ratio: int = 4, droppath_rate: float = 0.0,
                 use_fugh: bool = True, split_weights: bool = False):
        super().__init__()
        expanded = 4 * channels
        self.fugh = FuGH(channels, groups, split_weights) if use_fugh else nn.Identity()
        self.norm_in = ChannelLayerNorm(channels)
        self.conv1 = nn.Conv3d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv3d(channels, expanded, 1)
        self.norm_mid = ChannelLayerNorm(expanded)
        self.conv3 = nn.Conv3d(expanded, channels, 1)
        self.se = SEBlock(channels, se_ratio)
        self.drop_path = DropPath(droppath_rate)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x1 = self.norm_in(self.conv1(self.norm_in(self.fugh(x))))
        y = self.conv3(F.gelu(self.norm_mid(self.conv2(x1))))
        return self.drop_path(self.se(y)) + x1


def conv_block(in_ch: int, out_ch: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv3d(in_ch, out_ch, 3, padding=1),
        nn.InstanceNorm3d(out_ch, affine=True),
        nn.GELU(),
    )


class Upsample(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, mode: str = 'transpose'):
        super().__init__()
        self.mode = mode
        if mode == 'transpose':
            self.proj = nn.ConvTranspose3d(in_ch, out_ch, 2, stride=2)
        elif mode == 'trilinear':
            self.proj = nn.Conv3d(in_ch, out_ch, 1)
        else:
            raise ConfigError(f"Unknown upsample mode: {mode}")

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.mode == 'trilinear':
            x = F.interpolate(x, scale_factor=2, mode='trilinear', align_corners=False)
        return self.proj(x)


class DEFN(nn.Module):
    """
    Input gate -> stem -> two encoders (FuGH/pool main branch, HSE branch) fused
    by sum at every scale -> transposed-conv decoder with skip concatenation -> 1x1 head.
    """

    def __init__(self, config: Optional[NetConfig] = None):
        super().__init__()
        self.config = config or NetConfig()
        cfg = self.config
        C = cfg.base_channels
        widths = [C * 2 ** i for i in range(cfg.depth + 1)]
        self.widths = widths

        self.gate = S3DSA(cfg.in_channels)
        self.stem = conv_block(cfg.in_channels, C)

        self.main_fugh = nn.ModuleList(
            FuGH(w, cfg.fugh_groups, cfg.split_frequency_weights) if cfg.use_fugh else nn.Identity()
            for w in widths[:-1]
        )
        self.main_pool = nn.MaxPool3d(2)
        self.main_conv = nn.ModuleList(conv_block(w, 2 * w) for w in widths[:-1])

        if cfg.use_hse_branch:
            rates = np.linspace(0.0, cfg.droppath_rate, cfg.depth + 1)
            self.hse = nn.ModuleList(
                HSEBlock(w, cfg.fugh_groups, cfg.se_ratio, float(r), cfg.use_fugh, cfg.split_frequency_weights)
                for w, r in zip(widths, rates)
            )
            self.hse_norm = nn.ModuleList(ChannelLayerNorm(w) for w in widths[:-1])
            self.hse_down = nn.ModuleList(nn.Conv3d(w, 2 * w, 2, stride=2) for w in widths[:-1])

        self.up = nn.ModuleList(Upsample(2 * w, w, cfg.upsample_mode) for w in widths[:-1])
        self.decode = nn.ModuleList(conv_block(2 * w, w) for w in widths[:-1])
        self.head = nn.Conv3d(C, cfg.num_classes, 1)

    def check_input(self, x: torch.Tensor) -> None:
        cfg = self.config
        if x.dim() != 5 or x.shape[1] != cfg.in_channels:
            raise DataError(f"Expected input (B, {cfg.in_channels}, D, H, W), got {tuple(x.shape)}")
        m = cfg.size_multiple
        if any(s % m for s in x.shape[2:]):
            raise DataError(f"Input spatial dims {tuple(x.shape[2:])} must be divisible by {m}")
        if min(x.shape[2:]) < cfg.min_input_size:
            raise DataError(f"Input spatial dims {tuple(x.shape[2:])} must be at least {cfg.min_input_size}")

    def encode(self, x: torch.Tensor) -> List[torch.Tensor]:
        e = self.stem(self.gate(x))
        main = [e]
        for fugh, conv in zip(self.main_fugh, self.main_conv):
            main.append(conv(self.main_pool(fugh(main[-1]))))
        if not self.config.use_hse_branch:
            return main

        h = self.hse[0](e)
        fused = [main[0] + h]
        for i in range(self.config.depth):
            h = self.hse[i + 1](self.hse_down[i](self.hse_norm[i](h)))
            fused.append(main[i + 1] + h)
        return fused

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        self.check_input(x)
        skips = self.encode(x)
        y = skips[-1]
        for i in reversed(range(self.config.depth)):
            y = self.decode[i](torch.cat([self.up[i](y), skips[i]], dim=1))
        return self.head(y)


def build_model(config: Optional[NetConfig] = None) -> DEFN:
    model = DEFN(config)
    params = sum(p.numel() for p in model.parameters())
    logger.info(f"Built DEFN base={model.config.base_channels} classes={model.config.num_classes} params={params:,}")
    return model
