"""ResNet-style generator and PatchGAN discriminator."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn


@dataclass(frozen=True)
class GeneratorSpec:
    input_dim: int = 256
    base_width: int = 64
    n_res_blocks: int | None = None  # None: 9 above 128 px, else 6
    channels: int = 1

    def __post_init__(self):
        if self.input_dim < 4 or self.input_dim % 4:
            raise ValueError(f"generator input_dim must be a positive multiple of 4, got {self.input_dim}")
        if self.n_res_blocks is None:
            object.__setattr__(self, "n_res_blocks", 9 if self.input_dim > 128 else 6)
        if self.base_width < 1 or self.n_res_blocks < 0 or self.channels < 1:
            raise ValueError("base_width and channels must be positive, n_res_blocks non-negative")


@dataclass(frozen=True)
class DiscriminatorSpec:
    input_dim: int = 256
    n_layers: int = 3  # stride-2 convolutions; 3 gives the 70x70 receptive field
    base_width: int = 64
    channels: int = 1

    @property
    def grid_dim(self) -> int:
        return patch_grid_dim(self.input_dim, self.n_layers)


def conv_out(n: int, kernel: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - kernel) // stride + 1


def patch_grid_dim(input_dim: int, n_layers: int) -> int:
    d = input_dim
    for _ in range(n_layers):
        d = conv_out(d, 4, 2, 1)
    d = conv_out(d, 4, 1, 1)
    d = conv_out(d, 4, 1, 1)
    if d < 1:
        raise ValueError(f"input_dim {input_dim} too small for {n_layers} discriminator layers")
    return d


class ResidualBlock(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.ReflectionPad2d(1),
            nn.Conv2d(width, width, 3),
            nn.InstanceNorm2d(width),
            nn.ReLU(inplace=True),
            nn.ReflectionPad2d(1),
            nn.Conv2d(width, width, 3),
            nn.InstanceNorm2d(width),
        )

    def forward(self, x):
        return x + self.body(x)


class Generator(nn.Module):
    """c7s1-k, d2k, d4k, R4k x n, u2k, uk, c7s1-C with tanh."""

    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        self.spec = spec
        k, c = spec.base_width, spec.channels
        layers = [
            nn.ReflectionPad2d(3),
            nn.Conv2d(c, k, 7),
            nn.InstanceNorm2d(k),
            nn.ReLU(inplace=True),
        ]
        width = k
        for _ in range(2):
            layers += [
                nn.Conv2d(width, width * 2, 3, stride=2, padding=1),
                nn.InstanceNorm2d(width * 2),
                nn.ReLU(inplace=True),
            ]
            width *= 2
        layers += [ResidualBlock(width) for _ in range(spec.n_res_blocks)]
        for _ in range(2):
            layers += [
                nn.ConvTranspose2d(width, width // 2, 3, stride=2, padding=1, output_padding=1),
                nn.InstanceNorm2d(width // 2),
                nn.ReLU(inplace=True),
            ]
            width //= 2
        layers += [nn.ReflectionPad2d(3), nn.Conv2d(width, c, 7), nn.Tanh()]
        self.net = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class PatchDiscriminator(nn.Module):
    def __init__(self, spec: DiscriminatorSpec):
        super().__init__()
        self.spec = spec
        k = spec.base_width
        layers = [nn.Conv2d(spec.channels, k, 4, stride=2, padding=1), nn.LeakyReLU(0.2, inplace=True)]
        width = k
        for i in range(1, spec.n_layers):
            nxt = k * min(2 ** i, 8)
            layers += [
                nn.Conv2d(width, nxt, 4, stride=2, padding=1),
                nn.InstanceNorm2d(nxt),
                nn.LeakyReLU(0.2, inplace=True),
            ]
            width = nxt
        nxt = k * min(2 ** spec.n_layers, 8)
        layers += [
            nn.Conv2d(width, nxt, 4, stride=1, padding=1),
            nn.InstanceNorm2d(nxt),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(nxt, 1, 4, stride=1, padding=1),
        ]
        self.net = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


def init_weights(module: nn.Module, std: float = 0.02, generator: torch.Generator | None = None) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            with torch.no_grad():
                m.weight.normal_(0.0, std, generator=generator)
                if m.bias is not None:
                    m.bias.zero_()
