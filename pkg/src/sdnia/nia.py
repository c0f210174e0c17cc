"""Lightweight full-resolution image-adaptation CNN placed in front of the detector."""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

LEAK = 0.1


def _conv(cin, cout, k):
    return nn.Conv2d(cin, cout, k, stride=1, padding=k // 2, bias=True)


class ResidualBlock(nn.Module):
    """1x1 squeeze then 3x3 expand, added back to the input."""

    def __init__(self, channels: int, hidden: int):
        super().__init__()
        self.reduce = _conv(channels, hidden, 1)
        self.expand = _conv(hidden, channels, 3)

    def branch(self, x):
        x = nn.functional.leaky_relu(self.reduce(x), LEAK)
        return nn.functional.leaky_relu(self.expand(x), LEAK)

    def forward(self, x):
        return x + self.branch(x)


class NIANetwork(nn.Module):
    """Conv3x3(3->32), Conv3x3(32->64), one residual block (64->32->64), Conv3x3(64->3).

    Every convolution is stride 1 with same padding, so the output has the
    input's spatial size. Inner layers use leaky ReLU; the output goes
    through a sigmoid so it is a valid image.
    """

    def __init__(self):
        super().__init__()
        self.conv1 = _conv(3, 32, 3)
        self.conv2 = _conv(32, 64, 3)
        self.res = ResidualBlock(64, 32)
        self.head = _conv(64, 3, 3)
        nn.init.zeros_(self.head.bias)  # sigmoid(0) = 0.5: mid-gray start

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"expected N x 3 x H x W input, got {tuple(x.shape)}")
        x = nn.functional.leaky_relu(self.conv1(x), LEAK)
        x = nn.functional.leaky_relu(self.conv2(x), LEAK)
        x = self.res(x)
        return torch.sigmoid(self.head(x))


def nia_forward(net: NIANetwork, image) -> np.ndarray | torch.Tensor:
    """Adapt one image.

    Accepts an ``H x W x 3`` numpy array (returns numpy, no grad) or an
    ``N x 3 x H x W`` tensor (returns a tensor in the autograd graph).
    """
    if isinstance(image, torch.Tensor):
        return net(image)
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected H x W x 3 image, got shape {image.shape}")
    if min(image.shape[:2]) < 8:
        raise ValueError(f"image must be at least 8 x 8, got {image.shape[:2]}")
    p = next(net.parameters())
    x = torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1)))[None].to(p.dtype)
    with torch.no_grad():
        y = net(x)
    return y[0].permute(1, 2, 0).cpu().numpy()


def nia_param_count(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters() if p.requires_grad)
