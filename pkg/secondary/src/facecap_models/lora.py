"""Minimal LoRA adapters for Linear and Conv2d layers.

The wrapped base layer is frozen; only the low-rank A/B factors train.
B starts at zero so a freshly wrapped module computes exactly what the base
did.
"""

from __future__ import annotations

from typing import Iterator

import torch
from torch import nn


class LoRALinear(nn.Module):
    def __init__(self, base: nn.Linear, rank: int = 8, alpha: float = 8.0):
        super().__init__()
        self.base = base
        self.base.weight.requires_grad_(False)
        if self.base.bias is not None:
            self.base.bias.requires_grad_(False)
        self.lora_a = nn.Linear(base.in_features, rank, bias=False)
        self.lora_b = nn.Linear(rank, base.out_features, bias=False)
        nn.init.normal_(self.lora_a.weight, std=1.0 / rank)
        nn.init.zeros_(self.lora_b.weight)
        self.scaling = alpha / rank

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.base(x) + self.scaling * self.lora_b(self.lora_a(x))


class LoRAConv2d(nn.Module):
    def __init__(self, base: nn.Conv2d, rank: int = 8, alpha: float = 8.0):
        super().__init__()
        self.base = base
        self.base.weight.requires_grad_(False)
        if self.base.bias is not None:
            self.base.bias.requires_grad_(False)
        self.lora_a = nn.Conv2d(
            base.in_channels, rank, base.kernel_size,
            stride=base.stride, padding=base.padding, bias=False,
        )
        self.lora_b = nn.Conv2d(rank, base.out_channels, 1, bias=False)
        nn.init.normal_(self.lora_a.weight, std=1.0 / rank)
        nn.init.zeros_(self.lora_b.weight)
        self.scaling = alpha / rank

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.base(x) + self.scaling * self.lora_b(self.lora_a(x))


def apply_lora(module: nn.Module, rank: int = 8, alpha: float = 8.0) -> int:
    """Wrap every Linear/Conv2d child in place; returns how many were wrapped."""
    wrapped = 0
    for name, child in list(module.named_children()):
        if isinstance(child, nn.Linear):
            setattr(module, name, LoRALinear(child, rank, alpha))
            wrapped += 1
        elif isinstance(child, nn.Conv2d):
            setattr(module, name, LoRAConv2d(child, rank, alpha))
            wrapped += 1
        else:
            wrapped += apply_lora(child, rank, alpha)
    return wrapped


def lora_parameters(module: nn.Module) -> Iterator[nn.Parameter]:
    for submodule in module.modules():
        if isinstance(submodule, (LoRALinear, LoRAConv2d)):
            yield from submodule.lora_a.parameters()
            yield from submodule.lora_b.parameters()


def lora_state_dict(module: nn.Module) -> dict[str, torch.Tensor]:
    return {
        name: tensor
        for name, tensor in module.state_dict().items()
        if ".lora_a." in name or ".lora_b." in name
    }
