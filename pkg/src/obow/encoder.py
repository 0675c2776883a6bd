"""Student/teacher convolutional encoders and the momentum teacher update."""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass
from typing import Sequence

import torch
from torch import nn


class ConfigError(ValueError):
    """Raised when a configuration violates its invariants."""


@dataclass
class EncoderConfig:
    input_channels: int = 3
    stage_widths: Sequence[int] = (32, 64, 128, 256)
    # extra stride-1 conv layers after the downsampling conv of each stage
    convs_per_stage: int = 1
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    # "batch": teacher normalizes with current-batch statistics during target
    # generation; "running": it uses its frozen running statistics.
    teacher_norm_mode: str = "batch"

    def __post_init__(self):
        self.stage_widths = tuple(int(w) for w in self.stage_widths)
        if len(self.stage_widths) < 2:
            raise ConfigError(
                f"encoder needs at least two downsampling stages, got {len(self.stage_widths)}"
            )
        if self.input_channels < 1 or min(self.stage_widths) < 1:
            raise ConfigError("channel counts must be positive")
        if self.convs_per_stage < 0:
            raise ConfigError("convs_per_stage must be >= 0")
        if self.teacher_norm_mode not in ("batch", "running"):
            raise ConfigError(f"unknown teacher_norm_mode {self.teacher_norm_mode!r}")

    @property
    def pooled_dim(self) -> int:
        return self.stage_widths[-1]

    @property
    def level_dims(self) -> dict[str, int]:
        return {"L": self.stage_widths[-1], "L-1": self.stage_widths[-2]}

    @property
    def total_stride(self) -> int:
        return 2 ** len(self.stage_widths)

    def level_size(self, resolution: int, level: str = "L") -> int:
        """Spatial side length of a level's feature map for a square input."""
        n_stages = len(self.stage_widths) - (0 if level == "L" else 1)
        size = resolution
        for _ in range(n_stages):
            size = (size - 1) // 2 + 1  # 3x3 conv, stride 2, padding 1
        return size

    def receptive_field(self, level: str = "L") -> tuple[int, int, int]:
        """(jump, size, start) of a level's receptive field in input pixels.

        A location (i, j) covers input rows ``start + i*jump - size//2`` to
        ``start + i*jump + size//2`` (and likewise for columns).
        """
        n_stages = len(self.stage_widths) - (0 if level == "L" else 1)
        jump, size, start = 1, 1, 0.0
        for _ in range(n_stages):
            layers = [(3, 2, 1)] + [(3, 1, 1)] * self.convs_per_stage
            for k, s, p in layers:
                size = size + (k - 1) * jump
                start = start + ((k - 1) / 2 - p) * jump
                jump = jump * s
        return jump, size, int(start)


@dataclass
class FeaturePyramid:
    """Batched features: maps are (B, C, H, W), pooled is (B, C)."""

    map_L: torch.Tensor
    map_Lminus1: torch.Tensor
    pooled: torch.Tensor

    def level(self, name: str) -> torch.Tensor:
        if name == "L":
            return self.map_L
        if name == "L-1":
            return self.map_Lminus1
        raise KeyError(name)


class Encoder(nn.Module):
    """Stack of stride-2 conv-BN-ReLU stages exposing the two last levels."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        stages = []
        in_ch = config.input_channels
        for width in config.stage_widths:
            layers: list[nn.Module] = [
                nn.Conv2d(in_ch, width, 3, stride=2, padding=1, bias=False),
                nn.BatchNorm2d(width, eps=config.bn_eps, momentum=config.bn_momentum),
                nn.ReLU(inplace=True),
            ]
            for _ in range(config.convs_per_stage):
                layers += [
                    nn.Conv2d(width, width, 3, stride=1, padding=1, bias=False),
                    nn.BatchNorm2d(width, eps=config.bn_eps, momentum=config.bn_momentum),
                    nn.ReLU(inplace=True),
                ]
            stages.append(nn.Sequential(*layers))
            in_ch = width
        self.stages = nn.ModuleList(stages)
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")

    def forward(self, x: torch.Tensor) -> FeaturePyramid:
        if x.dim() == 3:
            x = x.unsqueeze(0)
        side = min(x.shape[-2:])
        if self.config.level_size(side, "L") < 1:
            raise ValueError(f"input of size {tuple(x.shape[-2:])} is too small for this encoder")
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return FeaturePyramid(map_L=feats[-1], map_Lminus1=feats[-2], pooled=feats[-1].mean(dim=(2, 3)))


def build_encoder_pair(config: EncoderConfig, seed: int, dtype=torch.float32) -> tuple[Encoder, Encoder]:
    """Student encoder and a teacher with bitwise-identical parameters.

    The teacher never receives gradients. Its normalization buffers start at
    the same defaults but are written only by teacher forwards.
    """
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        student = Encoder(config).to(dtype)
    finally:
        torch.random.set_rng_state(gen_state)
    teacher = copy.deepcopy(student)
    for p in teacher.parameters():
        p.requires_grad_(False)
    return student, teacher


def _check_min_size(encoder: Encoder, image: torch.Tensor, min_side: int):
    side = min(image.shape[-2:])
    got = encoder.config.level_size(side, "L")
    if got < min_side:
        raise ValueError(
            f"input {tuple(image.shape[-2:])} yields a {got}x{got} last-level map; need >= {min_side}"
        )


@torch.no_grad()
def teacher_forward(teacher: Encoder, image: torch.Tensor) -> FeaturePyramid:
    """Teacher features for target generation; updates only the teacher's BN buffers."""
    _check_min_size(teacher, image, 3)
    teacher.train(teacher.config.teacher_norm_mode == "batch")
    return teacher(image)


def student_forward(student: Encoder, view: torch.Tensor) -> FeaturePyramid:
    _check_min_size(student, view, 1)
    student.train()
    return student(view)


def _check_structure(teacher: nn.Module, student: nn.Module):
    t_params = list(teacher.named_parameters())
    s_params = list(student.named_parameters())
    if [n for n, _ in t_params] != [n for n, _ in s_params]:
        raise ValueError("teacher and student parameter names differ")
    for (name, pt), (_, ps) in zip(t_params, s_params):
        if pt.shape != ps.shape:
            raise ValueError(f"shape mismatch for {name}: {tuple(pt.shape)} vs {tuple(ps.shape)}")
    return t_params, s_params


@torch.no_grad()
def ema_update(teacher: nn.Module, student: nn.Module, alpha: float) -> nn.Module:
    """In place ``theta_T <- alpha*theta_T + (1-alpha)*theta_S`` over learnable parameters.

    Normalization running statistics are per-network and left untouched.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    t_params, s_params = _check_structure(teacher, student)
    for (_, pt), (_, ps) in zip(t_params, s_params):
        pt.mul_(alpha).add_(ps.detach(), alpha=1.0 - alpha)
    return teacher


def momentum_schedule(step: int, total_steps: int, alpha0: float = 0.99) -> float:
    """Cosine annealing of the teacher momentum from ``alpha0`` to 1."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if total_steps == 0:
        return 1.0
    return 1.0 - (1.0 - alpha0) * (1.0 + math.cos(math.pi * step / total_steps)) / 2.0


def parameter_snapshot(module: nn.Module) -> dict[str, torch.Tensor]:
    """Detached copies of learnable parameters, in registration order."""
    return {n: p.detach().clone() for n, p in module.named_parameters()}


def norm_statistics(module: nn.Module) -> dict[str, torch.Tensor]:
    """Detached copies of the normalization running buffers."""
    return {n: b.detach().clone() for n, b in module.named_buffers()}
