"""EMA teacher with a cosine momentum ramp."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from slap.errors import ConfigError, InvariantError


@dataclass(frozen=True)
class MomentumSchedule:
    total_steps: int
    m_start: float = 0.994
    m_end: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.m_start <= self.m_end <= 1.0:
            raise ConfigError("need 0 <= m_start <= m_end <= 1")


def momentum_at(step: int, sched: MomentumSchedule) -> float:
    if sched.total_steps <= 0 or step >= sched.total_steps:
        return sched.m_end
    step = max(step, 0)
    # written from m_start so that step 0 returns m_start bit-exactly
    ramp = (1.0 - math.cos(math.pi * step / sched.total_steps)) / 2.0
    return sched.m_start + (sched.m_end - sched.m_start) * ramp


@torch.no_grad()
def ema_update(teacher: nn.Module, student: nn.Module, m: float) -> None:
    """teacher <- m * teacher + (1 - m) * student, elementwise over every parameter."""
    t_params = dict(teacher.named_parameters())
    s_params = dict(student.named_parameters())
    if t_params.keys() != s_params.keys():
        raise InvariantError("teacher and student parameter names differ")
    for name, t in t_params.items():
        s = s_params[name]
        if t.shape != s.shape:
            raise InvariantError(f"shape mismatch for {name}: {tuple(t.shape)} vs {tuple(s.shape)}")
        t.mul_(m).add_(s.detach(), alpha=1.0 - m)


def make_teacher(student: nn.Module, factory) -> nn.Module:
    """Fresh module from ``factory`` holding an exact copy of ``student``; no grads."""
    teacher = factory()
    teacher.load_state_dict(student.state_dict())
    for p in teacher.parameters():
        p.requires_grad_(False)
    return teacher
