import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from slap.errors import ConfigError, InputError, InvariantError
from slap.nnet import (
    AttentionSpec,
    Block,
    apply_rotary,
    dense_attention_oracle,
    grad_check,
    linear_nobias,
    packed_attention,
    rmsnorm,
    rope2d,
    rope_table,
    silu,
    swiglu_ffn,
)


def test_linear_hand_value():
    x = torch.tensor([[1.0, 2.0]])
    W = torch.tensor([[1.0, 0.0, 2.0], [0.0, 1.0, -1.0]])
    assert torch.equal(linear_nobias(x, W), torch.tensor([[1.0, 2.0, 0.0]]))
    with pytest.raises(InputError):
        linear_nobias(x, W.T)


def test_rmsnorm_hand_value():
    out = rmsnorm(torch.tensor([3.0, 4.0]), torch.ones(2))
    # rms = sqrt(12.5)
    np.testing.assert_allclose(out.numpy(), [0.848528, 1.131371], atol=1e-5)


def test_rmsnorm_zero_stays_finite():
    assert torch.equal(rmsnorm(torch.zeros(4), torch.ones(4)), torch.zeros(4))


def test_silu_values():
    np.testing.assert_allclose(float(silu(torch.tensor(1.0))), 1 / (1 + math.exp(-1)), atol=1e-6)
    assert float(silu(torch.tensor(0.0))) == 0.0


def test_swiglu_zero_gate_is_zero():
    x = torch.randn(3, 4)
    out = swiglu_ffn(x, torch.zeros(4, 8), torch.randn(4, 8), torch.randn(8, 4))
    assert torch.equal(out, torch.zeros(3, 4))


def test_rope_identity_at_origin():
    x = torch.randn(5, 2, 8)
    out = rope2d(x, torch.zeros(5, 2, dtype=torch.long))
    assert torch.allclose(out, x, atol=0)


def test_rope_one_radian():
    x = torch.tensor([[[1.0, 0.0, 1.0, 0.0]]], dtype=torch.float64)
    out = rope2d(x, torch.tensor([[1, 0]]))
    np.testing.assert_allclose(out[0, 0].numpy(), [math.cos(1), math.sin(1), 1.0, 0.0], atol=1e-12)


def test_rope_frequency_half():
    x = torch.tensor([[[1.0, 0.0, 1.0, 0.0]]], dtype=torch.float64)
    out = rope2d(x, torch.tensor([[0, 2]]))
    np.testing.assert_allclose(out[0, 0].numpy(), [1.0, 0.0, math.cos(2), math.sin(2)], atol=1e-12)


def test_rope_preserves_norm():
    x = torch.randn(6, 2, 16, dtype=torch.float64)
    c = torch.randint(0, 50, (6, 2))
    assert torch.allclose(rope2d(x, c).norm(dim=-1), x.norm(dim=-1), atol=1e-12)


def test_rope_rejects_bad_head_dim():
    with pytest.raises(ConfigError):
        rope_table(torch.zeros(2, 2, dtype=torch.long), 6)
    with pytest.raises(InvariantError):
        rope2d(torch.randn(3, 1, 8), torch.zeros(2, 2, dtype=torch.long))


@settings(max_examples=40, deadline=None)
@given(
    st.integers(0, 200), st.integers(0, 200), st.integers(0, 3), st.integers(0, 3),
    st.integers(-50, 50), st.integers(-3, 3),
)
def test_rope_depends_on_offset_only(t1, t2, f1, f2, dt, df):
    g = torch.Generator().manual_seed(t1 * 7 + t2)
    q = torch.randn(1, 1, 16, dtype=torch.float64, generator=g)
    k = torch.randn(1, 1, 16, dtype=torch.float64, generator=g)

    def score(a, b):
        return float((rope2d(q, torch.tensor([a])) * rope2d(k, torch.tensor([b]))).sum())

    base = score((t1, f1), (t2, f2))
    shifted = score((t1 + dt, f1 + df), (t2 + dt, f2 + df))
    assert abs(base - shifted) <= 1e-6 * max(1.0, abs(base))


def test_attention_spec_validation():
    with pytest.raises(ConfigError):
        AttentionSpec(2, 8, window=4)
    with pytest.raises(ConfigError):
        AttentionSpec(2, 8, is_global=False)
    assert AttentionSpec.local(2, 8, 12).window == 12


def _qkv(L, h=2, d=4, seed=0):
    g = torch.Generator().manual_seed(seed)
    return [torch.randn(L, h, d, dtype=torch.float64, generator=g) for _ in range(3)]


@pytest.mark.parametrize("window", [None, 1, 4, 12])
@pytest.mark.parametrize("causal", [False, True])
def test_packed_matches_dense_oracle(window, causal):
    q, k, v = _qkv(23)
    b = (0, 5, 6, 23)
    got = packed_attention(q, k, v, b, window=window, causal=causal)
    want = dense_attention_oracle(q, k, v, b, window=window, causal=causal)
    assert torch.allclose(got, want, atol=1e-12)


def test_attention_rows_sum_to_one_and_respect_window():
    q, k, v = _qkv(10)
    _, probs = packed_attention(q, k, v, (0, 4, 10), window=1, return_probs=True)
    for p in probs:
        assert torch.allclose(p.sum(-1), torch.ones_like(p.sum(-1)))
        n = p.shape[-1]
        i, j = np.indices((n, n))
        assert torch.all(p[:, torch.from_numpy(np.abs(i - j) > 1)] == 0)


def test_attention_jacobian_zero_across_segments_and_window():
    q, k, v = _qkv(9)
    b = (0, 4, 9)
    v.requires_grad_(True)
    out = packed_attention(q, k, v, b, window=2)
    for i in range(9):
        (g,) = torch.autograd.grad(out[i].sum(), v, retain_graph=True)
        seg = 0 if i < 4 else 1
        for j in range(9):
            same = (j < 4) == (seg == 0)
            if not same or abs(i - j) > 2:
                assert torch.all(g[j] == 0), (i, j)


def test_single_token_segment_returns_its_value():
    q, k, v = _qkv(3)
    out = packed_attention(q, k, v, (0, 1, 3))
    assert torch.allclose(out[0], v[0])


def test_grad_check_linear_and_rmsnorm():
    torch.manual_seed(0)
    x = torch.randn(3, 4, dtype=torch.float64, requires_grad=True)
    W = torch.randn(4, 5, dtype=torch.float64, requires_grad=True)
    assert grad_check(lambda: (linear_nobias(x, W) ** 2).sum(), [x, W]) <= 1e-7
    g = torch.randn(4, dtype=torch.float64, requires_grad=True)
    assert grad_check(lambda: (rmsnorm(x, g) ** 3).sum(), [x, g]) <= 1e-5


def test_grad_check_detects_wrong_gradient():
    x = torch.randn(4, dtype=torch.float64, requires_grad=True)

    class Wrong(torch.autograd.Function):
        @staticmethod
        def forward(ctx, a):
            return (a ** 2).sum()

        @staticmethod
        def backward(ctx, g):
            return g * torch.ones(4, dtype=torch.float64)

    assert grad_check(lambda: Wrong.apply(x), [x]) > 1e-2


def test_grad_check_requires_float64():
    with pytest.raises(InputError):
        grad_check(lambda: torch.zeros(()), [torch.zeros(2, requires_grad=True)])


def test_block_output_shape_and_segment_isolation():
    torch.manual_seed(0)
    blk = Block(16, 2, 32, n_layers=2).double()
    x = torch.randn(7, 16, dtype=torch.float64)
    coords = torch.stack([torch.arange(7), torch.zeros(7, dtype=torch.long)], 1)
    rope = rope_table(coords, 8, dtype=torch.float64)
    full = blk(x, rope, (0, 3, 7))
    x2 = x.clone()
    x2[3:] += 1.0
    assert torch.allclose(blk(x2, rope, (0, 3, 7))[:3], full[:3], atol=0)
    assert full.shape == x.shape


def test_apply_rotary_checks_length():
    table = rope_table(torch.zeros(3, 2, dtype=torch.long), 8)
    with pytest.raises(InvariantError):
        apply_rotary(torch.randn(2, 1, 8), table)
