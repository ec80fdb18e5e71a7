"""Optimiser and schedule plumbing shared by the trainable models."""

from dataclasses import dataclass

import torch


class TrainingError(RuntimeError):
    """Raised when a loss turns non-finite during training."""


@dataclass
class TrainSpec:
    steps: int = 3000
    batch: int = 64
    lr: float = 1e-3
    epochs: int = 10
    optimizer: str = "adam"
    weight_decay: float = 0.0


def make_optimizer(net, spec: TrainSpec):
    if spec.optimizer == "adam":
        return torch.optim.Adam(net.parameters(), lr=spec.lr, weight_decay=spec.weight_decay)
    if spec.optimizer == "adamw":
        return torch.optim.AdamW(net.parameters(), lr=spec.lr, weight_decay=spec.weight_decay)
    if spec.optimizer == "sgd":
        return torch.optim.SGD(net.parameters(), lr=spec.lr, momentum=0.9)
    raise ValueError(f"unknown optimizer {spec.optimizer!r}")


def make_scheduler(opt, spec: TrainSpec):
    """One-cycle schedule with a 10% warm-up; constant rate for tiny runs."""
    if spec.steps < 20:
        return torch.optim.lr_scheduler.LambdaLR(opt, lambda _: 1.0)
    return torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=spec.lr, total_steps=spec.steps, pct_start=0.1)
