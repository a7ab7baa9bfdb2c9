"""Small torch building blocks shared by the codec's networks."""

import math

import numpy as np
import torch
from torch import nn


def group_norm(channels):
    # Largest group count <= 8 that divides the channel count, capped so
    # every group keeps >= 2 channels (1x1 feature maps would otherwise
    # leave a single value per group, which GroupNorm rejects).
    groups = min(math.gcd(8, channels), max(1, channels // 2))
    return nn.GroupNorm(groups, channels)


class ResBlock(nn.Module):
    """Two 3x3 convs with GroupNorm/SiLU and an identity skip."""

    def __init__(self, channels):
        super().__init__()
        self.norm1 = group_norm(channels)
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm2 = group_norm(channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        h = self.conv1(torch.nn.functional.silu(self.norm1(x)))
        h = self.conv2(torch.nn.functional.silu(self.norm2(h)))
        return x + h


def timestep_embedding(t, dim):
    """Sinusoidal embedding of integer timesteps, shape (B, dim)."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float32, device=t.device) / half
    )
    args = t.float()[:, None] * freqs[None, :]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=1)


def state_to_tensors(module, prefix=""):
    """Flatten a module state dict to named numpy arrays."""
    return {prefix + k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def tensors_to_state(module, tensors, prefix=""):
    """Load named numpy arrays back into a module."""
    state = {
        k[len(prefix):]: torch.from_numpy(np.ascontiguousarray(v))
        for k, v in tensors.items()
        if k.startswith(prefix)
    }
    module.load_state_dict(state)
    return module


def to_batch(arr, dtype=torch.float32):
    """(C, H, W) numpy array to a (1, C, H, W) tensor."""
    return torch.from_numpy(np.ascontiguousarray(arr)).to(dtype)[None]
