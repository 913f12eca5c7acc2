"""Generators and discriminators.

Both generators share a CycleGAN-style ResNet body (strided encoder, residual
blocks, transposed-conv decoder) and take the domain label as tiled one-hot
input channels. ``g_map`` emits a disease map in [-2, 2]; ``g_recon`` emits an
image in [-1, 1] and by default also feeds its input image to the output
layer. Discriminators are PatchGAN-style; only the abnormal-domain one carries
a domain-classification head.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional, Union

import torch
from torch import nn
import torch.nn.functional as F

from .core import MAP_RANGE, ConfigError, ShapeError


@dataclass
class ArchConfig:
    n_domains: int = 3
    image_size: int = 64
    base_channels: int = 16
    n_residual_blocks: int = 2
    n_downsamples: int = 2
    patch_output: bool = True
    norm: str = "instance"
    init_gain: float = 0.02
    recon_input_skip: bool = True

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if self.n_domains < 1:
            raise ConfigError("n_domains must be >= 1")
        if self.base_channels < 1 or self.n_residual_blocks < 0 or self.n_downsamples < 0:
            raise ConfigError("channel/block/downsample counts must be non-negative")
        if self.image_size < 16 or self.image_size % (2 ** self.n_downsamples):
            raise ConfigError(
                f"image_size {self.image_size} must be >= 16 and divisible by 2**{self.n_downsamples}")
        if self.norm not in ("instance", "none"):
            raise ConfigError(f"unknown norm {self.norm!r}")
        if not self.init_gain > 0:
            raise ConfigError("init_gain must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def _norm(kind: str, channels: int) -> nn.Module:
    return nn.InstanceNorm2d(channels) if kind == "instance" else nn.Identity()


class ResidualBlock(nn.Module):
    def __init__(self, channels: int, norm: str):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1, padding_mode="reflect"),
            _norm(norm, channels),
            nn.ReLU(),
            nn.Conv2d(channels, channels, 3, padding=1, padding_mode="reflect"),
            _norm(norm, channels),
        )

    def forward(self, x):
        return x + self.body(x)


class Generator(nn.Module):
    """Label-conditioned encoder / residual / decoder network with a tanh head."""

    def __init__(self, arch: ArchConfig, out_scale: float = 1.0, input_skip: bool = False):
        super().__init__()
        self.n_domains = arch.n_domains
        self.out_scale = out_scale
        self.input_skip = input_skip
        ch = arch.base_channels
        self.head = nn.Sequential(
            nn.Conv2d(1 + arch.n_domains, ch, 7, padding=3, padding_mode="reflect"),
            _norm(arch.norm, ch),
        )
        # Instance norm removes the per-channel constant the tiled one-hot
        # channels contribute, so the label is also added back after it.
        self.label_shift = nn.Linear(arch.n_domains, ch, bias=False)
        layers: list[nn.Module] = [nn.ReLU()]
        for _ in range(arch.n_downsamples):
            layers += [nn.Conv2d(ch, 2 * ch, 3, stride=2, padding=1), _norm(arch.norm, 2 * ch), nn.ReLU()]
            ch *= 2
        layers += [ResidualBlock(ch, arch.norm) for _ in range(arch.n_residual_blocks)]
        for _ in range(arch.n_downsamples):
            layers += [
                nn.ConvTranspose2d(ch, ch // 2, 3, stride=2, padding=1, output_padding=1),
                _norm(arch.norm, ch // 2),
                nn.ReLU(),
            ]
            ch //= 2
        self.net = nn.Sequential(*layers)
        # the skip lets pixel-level detail (noise) bypass the bottleneck
        self.out = nn.Conv2d(ch + int(input_skip), 1, 7, padding=3, padding_mode="reflect")

    def forward(self, x: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        onehot = F.one_hot(c, self.n_domains).to(x.dtype)
        cond = onehot[:, :, None, None].expand(-1, -1, x.shape[2], x.shape[3])
        h = self.head(torch.cat([x, cond], dim=1)) + self.label_shift(onehot)[:, :, None, None]
        h = self.net(h)
        if self.input_skip:
            h = torch.cat([h, x], dim=1)
        return self.out_scale * torch.tanh(self.out(h))


class Discriminator(nn.Module):
    """PatchGAN scorer; optionally adds a global-pooled domain-classification head."""

    def __init__(self, arch: ArchConfig, classify: bool = False):
        super().__init__()
        ch = arch.base_channels
        layers: list[nn.Module] = [nn.Conv2d(1, ch, 3, padding=1), nn.LeakyReLU(0.2)]
        for _ in range(arch.n_downsamples):
            layers += [nn.Conv2d(ch, 2 * ch, 4, stride=2, padding=1), _norm(arch.norm, 2 * ch), nn.LeakyReLU(0.2)]
            ch *= 2
        self.features = nn.Sequential(*layers)
        self.adv = nn.Conv2d(ch, 1, 3, padding=1)
        self.cls = nn.Linear(ch, arch.n_domains) if classify else None
        self.patch_output = arch.patch_output

    def forward(self, img: torch.Tensor) -> tuple[torch.Tensor, Optional[torch.Tensor]]:
        h = self.features(img)
        logits = self.adv(h)[:, 0]
        if not self.patch_output:
            logits = logits.mean(dim=(1, 2))
        domain_logits = self.cls(h.mean(dim=(2, 3))) if self.cls is not None else None
        return torch.sigmoid(logits), domain_logits


class TagGANNets(nn.Module):
    """The four networks trained together."""

    def __init__(self, arch: ArchConfig):
        super().__init__()
        self.arch = arch
        self.g_map = Generator(arch, out_scale=MAP_RANGE)
        self.g_recon = Generator(arch, out_scale=1.0, input_skip=arch.recon_input_skip)
        self.d_normal = Discriminator(arch, classify=False)
        self.d_abnormal = Discriminator(arch, classify=True)

    def generator_parameters(self):
        return [*self.g_map.parameters(), *self.g_recon.parameters()]

    def discriminator_parameters(self):
        return [*self.d_normal.parameters(), *self.d_abnormal.parameters()]


def init_params(arch: ArchConfig, seed: int) -> TagGANNets:
    """Build the networks with fan-in-scaled Gaussian weights (std = gain / sqrt(fan_in)) and zero biases."""
    arch.validate()
    nets = TagGANNets(arch)
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for name, p in nets.named_parameters():
            if name.endswith("bias"):
                p.zero_()
                continue
            if p.dim() == 4 and "ConvTranspose" in type(_owner(nets, name)).__name__:
                fan_in = p.shape[0] * p.shape[2] * p.shape[3]
            else:
                fan_in = math.prod(p.shape[1:])
            p.normal_(0.0, arch.init_gain / math.sqrt(fan_in), generator=gen)
    return nets


def _owner(root: nn.Module, param_name: str) -> nn.Module:
    return root.get_submodule(param_name.rsplit(".", 1)[0])


def _labels(c: Union[int, torch.Tensor], n: int, n_domains: int) -> torch.Tensor:
    c = torch.full((n,), int(c), dtype=torch.long) if not torch.is_tensor(c) else c.long().reshape(-1)
    if c.numel() != n:
        raise ShapeError(f"{c.numel()} labels for a batch of {n}")
    if c.numel() and (c.min() < 0 or c.max() >= n_domains):
        raise ValueError(f"label out of range for {n_domains} domains")
    return c


def _check_image(nets: TagGANNets, x: torch.Tensor) -> None:
    s = nets.arch.image_size
    if x.dim() != 4 or x.shape[1] != 1 or x.shape[2] != s or x.shape[3] != s:
        raise ShapeError(f"expected input of shape (N, 1, {s}, {s}), got {tuple(x.shape)}")


def generator_map_forward(nets: TagGANNets, x: torch.Tensor, c) -> torch.Tensor:
    """Disease map in [-2, 2] for abnormal images ``x`` (N, 1, H, W) under labels ``c``."""
    _check_image(nets, x)
    return nets.g_map(x, _labels(c, x.shape[0], nets.arch.n_domains))


def generator_recon_forward(nets: TagGANNets, y: torch.Tensor, c) -> torch.Tensor:
    """Abnormal-domain image in [-1, 1] synthesised from ``y`` under labels ``c``."""
    _check_image(nets, y)
    return nets.g_recon(y, _labels(c, y.shape[0], nets.arch.n_domains))


def discriminator_forward(nets: TagGANNets, img: torch.Tensor, which: str):
    """Return ``(adv_scores, domain_logits)``; ``which`` is ``"normal"`` or ``"abnormal"``.

    ``domain_logits`` is None for the normal-domain discriminator.
    """
    _check_image(nets, img)
    if which == "normal":
        return nets.d_normal(img)
    if which == "abnormal":
        return nets.d_abnormal(img)
    raise ValueError(f"unknown discriminator {which!r}")
