import pytest
import torch
from torch import nn

from slap.ema import MomentumSchedule, ema_update, make_teacher, momentum_at
from slap.errors import ConfigError, InvariantError


@pytest.mark.parametrize("step, expected", [(0, 0.994), (500, 0.997), (1000, 1.0), (5000, 1.0)])
def test_momentum_endpoints(step, expected):
    assert momentum_at(step, MomentumSchedule(1000)) == pytest.approx(expected, abs=1e-12)


def test_momentum_start_is_exact_and_monotone():
    s = MomentumSchedule(100)
    assert momentum_at(0, s) == 0.994
    vals = [momentum_at(i, s) for i in range(101)]
    assert all(b >= a for a, b in zip(vals, vals[1:]))


def test_momentum_zero_steps():
    assert momentum_at(0, MomentumSchedule(0)) == 1.0
    with pytest.raises(ConfigError):
        MomentumSchedule(10, 0.999, 0.99)


def test_ema_update_hand_value():
    s, t = nn.Linear(2, 1, bias=False), nn.Linear(2, 1, bias=False)
    with torch.no_grad():
        s.weight.fill_(1.0)
        t.weight.fill_(0.0)
    ema_update(t, s, 0.75)
    assert torch.allclose(t.weight, torch.full((1, 2), 0.25))


def test_ema_identity_cases():
    s = nn.Linear(3, 3)
    t = make_teacher(s, lambda: nn.Linear(3, 3))
    before = [p.clone() for p in t.parameters()]
    with torch.no_grad():
        for p in s.parameters():
            p.add_(1.0)
    ema_update(t, s, 1.0)
    assert all(torch.equal(a, b) for a, b in zip(before, t.parameters()))
    ema_update(t, s, 0.0)
    assert all(torch.equal(a, b) for a, b in zip(s.parameters(), t.parameters()))


def test_teacher_is_frozen_copy():
    s = nn.Linear(3, 2)
    t = make_teacher(s, lambda: nn.Linear(3, 2))
    assert all(not p.requires_grad for p in t.parameters())
    assert torch.equal(t.weight, s.weight)
    assert t.weight.data_ptr() != s.weight.data_ptr()


def test_ema_schema_mismatch():
    with pytest.raises(InvariantError):
        ema_update(nn.Linear(2, 2), nn.Linear(2, 3), 0.9)
    with pytest.raises(InvariantError):
        ema_update(nn.Linear(2, 2), nn.Linear(2, 2, bias=False), 0.9)
