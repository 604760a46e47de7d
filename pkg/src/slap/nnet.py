"""Numeric building blocks: bias-free linears, RMSNorm, SwiGLU, 2D RoPE and
boundary-respecting packed attention.

Tensors are torch tensors; autograd supplies the analytic gradients and
:func:`grad_check` compares them against central finite differences.
Linear weights are stored ``(in, out)`` so that ``y = x @ W``.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from slap.errors import ConfigError, InputError, InvariantError, NumericError
from slap.packing import check_boundaries

DEBUG = os.environ.get("SLAP_DEBUG") == "1"


def check_finite(name: str, t: torch.Tensor) -> torch.Tensor:
    if DEBUG and not torch.isfinite(t).all():
        raise NumericError(f"non-finite values in {name}")
    return t


def linear_nobias(x: torch.Tensor, W: torch.Tensor) -> torch.Tensor:
    if x.shape[-1] != W.shape[0]:
        raise InputError(f"linear: input dim {x.shape[-1]} does not match weight {tuple(W.shape)}")
    return x @ W


def rmsnorm(x: torch.Tensor, g: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    return x * torch.rsqrt(x.pow(2).mean(dim=-1, keepdim=True) + eps) * g


def silu(z: torch.Tensor) -> torch.Tensor:
    # z * sigmoid(z), fused
    return F.silu(z)


def swiglu_ffn(x, W_gate, W_up, W_down):
    return linear_nobias(silu(linear_nobias(x, W_gate)) * linear_nobias(x, W_up), W_down)


def rope_angles(pos: torch.Tensor, n_channels: int, base: float = 10000.0) -> torch.Tensor:
    """Angles (L, n_channels // 2) for rotating ``n_channels`` channels by ``pos``."""
    k = torch.arange(n_channels // 2, dtype=torch.float64)
    theta = base ** (-2.0 * k / n_channels)
    return pos.to(torch.float64)[:, None] * theta[None, :]


def rope_table(coords: torch.Tensor, head_dim: int, base: float = 10000.0, dtype=torch.float32):
    """cos/sin tables (L, 1, head_dim // 2) for 2D RoPE.

    Channel pairs in the first half of a head turn with the time index, pairs
    in the second half with the frequency index.
    """
    if head_dim % 4:
        raise ConfigError(f"2D RoPE needs head_dim divisible by 4, got {head_dim}")
    if coords is None or coords.ndim != 2 or coords.shape[1] != 2:
        raise InvariantError("need (t, f) coords for every token")
    half = head_dim // 2
    angles = torch.cat([rope_angles(coords[:, 0], half, base), rope_angles(coords[:, 1], half, base)], dim=1)
    return torch.cos(angles).to(dtype)[:, None, :], torch.sin(angles).to(dtype)[:, None, :]


def apply_rotary(x: torch.Tensor, table) -> torch.Tensor:
    """Rotate channel pairs (2k, 2k+1) of x (L, n_heads, head_dim) by the table angles."""
    cos, sin = table
    if cos.shape[0] != x.shape[0]:
        raise InvariantError(f"rotary table covers {cos.shape[0]} tokens, input has {x.shape[0]}")
    even, odd = x[..., 0::2], x[..., 1::2]
    return torch.stack([even * cos - odd * sin, even * sin + odd * cos], dim=-1).flatten(-2)


def rope2d(x: torch.Tensor, coords: torch.Tensor, base: float = 10000.0) -> torch.Tensor:
    """Rotate the first half of each head by time index, the second by frequency index."""
    if coords is None or coords.shape[0] != x.shape[0]:
        raise InvariantError(f"need (t, f) coords for all {x.shape[0]} tokens")
    return apply_rotary(x, rope_table(coords, x.shape[-1], base, x.dtype))


@dataclass(frozen=True)
class AttentionSpec:
    n_heads: int
    head_dim: int
    window: int | None = None  # half-width in tokens; None means global
    is_global: bool = True
    causal: bool = False

    def __post_init__(self):
        if self.is_global and self.window is not None:
            raise ConfigError("a global attention block cannot carry a window")
        if not self.is_global and self.window is None:
            raise ConfigError("a local attention block needs a window half-width")
        if self.head_dim % 4:
            raise ConfigError(f"head_dim {self.head_dim} not divisible by 4")

    @classmethod
    def local(cls, n_heads, head_dim, window):
        return cls(n_heads, head_dim, window=window, is_global=False)


@lru_cache(maxsize=512)
def _blocked(n_q: int, n_k: int, window, causal: bool) -> torch.Tensor:
    i = torch.arange(n_q)[:, None]
    j = torch.arange(n_k)[None, :]
    allowed = torch.ones(n_q, n_k, dtype=torch.bool)
    if window is not None:
        allowed &= (i - j).abs() <= window
    if causal:
        allowed &= j <= i
    return ~allowed


def _segment_attention(q, k, v, window=None, causal=False, return_probs=False):
    # q: (Lq, h, d), k/v: (Lk, h, d)
    logits = torch.einsum("ihd,jhd->hij", q, k) / math.sqrt(q.shape[-1])
    if window is not None or causal:
        logits = logits.masked_fill(_blocked(q.shape[0], k.shape[0], window, causal), float("-inf"))
    # torch.softmax subtracts the row max internally; every row keeps its diagonal
    probs = torch.softmax(logits, dim=-1)
    out = torch.einsum("hij,jhd->ihd", probs, v)
    return (out, probs) if return_probs else out


def packed_attention(q, k, v, boundaries, window=None, causal=False, return_probs=False):
    """Self-attention over a packed stream.

    Token i attends to token j only inside its own segment, and, when a
    window half-width is given, only if |i - j| <= window.
    """
    L = q.shape[0]
    check_boundaries(boundaries, L)
    outs, probs = [], []
    for lo, hi in zip(boundaries[:-1], boundaries[1:]):
        res = _segment_attention(q[lo:hi], k[lo:hi], v[lo:hi], window, causal, return_probs)
        if return_probs:
            outs.append(res[0])
            probs.append(res[1])
        else:
            outs.append(res)
    out = torch.cat(outs, dim=0)
    return (out, probs) if return_probs else out


def packed_cross_attention(q, k, v, q_boundaries, kv_boundaries):
    """Segment i of the queries attends only to segment i of the keys."""
    check_boundaries(q_boundaries, q.shape[0])
    check_boundaries(kv_boundaries, k.shape[0])
    if len(q_boundaries) != len(kv_boundaries):
        raise InvariantError("query and key streams hold different sample counts")
    outs = []
    for (qa, qb), (ka, kb) in zip(
        zip(q_boundaries[:-1], q_boundaries[1:]), zip(kv_boundaries[:-1], kv_boundaries[1:])
    ):
        outs.append(_segment_attention(q[qa:qb], k[ka:kb], v[ka:kb]))
    return torch.cat(outs, dim=0)


def dense_attention_oracle(q, k, v, boundaries, window=None, causal=False):
    """Reference: pad to (B, Lmax), apply one dense boolean mask, softmax, unpad."""
    lengths = [hi - lo for lo, hi in zip(boundaries[:-1], boundaries[1:])]
    B, Lmax = len(lengths), max(lengths)
    h, d = q.shape[1], q.shape[2]

    def pad(x):
        out = x.new_zeros(B, Lmax, h, d)
        for b, (lo, hi) in enumerate(zip(boundaries[:-1], boundaries[1:])):
            out[b, : hi - lo] = x[lo:hi]
        return out

    qp, kp, vp = pad(q), pad(k), pad(v)
    pos = torch.arange(Lmax)
    valid = pos[None, :] < torch.tensor(lengths)[:, None]  # (B, Lmax)
    mask = valid[:, :, None] & valid[:, None, :]
    if window is not None:
        mask = mask & ((pos[:, None] - pos[None, :]).abs() <= window)[None]
    if causal:
        mask = mask & (pos[None, :] <= pos[:, None])[None]
    scores = torch.einsum("bihd,bjhd->bhij", qp, kp) / math.sqrt(d)
    scores = scores.masked_fill(~mask[:, None], float("-inf"))
    # padded query rows have no keys at all; give them a harmless distribution
    scores = torch.where(valid[:, None, :, None], scores, torch.zeros_like(scores))
    out = torch.einsum("bhij,bjhd->bihd", torch.softmax(scores, dim=-1), vp)
    return torch.cat([out[b, :n] for b, n in enumerate(lengths)], dim=0)


def grad_check(fn, params, eps: float = 1e-4, max_entries: int | None = None, seed: int = 0, floor: float = 1e-6):
    """Largest relative gap between autograd and central differences.

    ``fn`` is a zero-argument callable returning a scalar that depends on the
    float64 tensors in ``params``. With ``max_entries`` set, a seeded random
    subset of each tensor's entries is probed.

    Differences use the fourth-order central stencil
    (-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h, whose O(h^4) truncation
    error allows a step large enough to keep roundoff small on tiny gradients.
    The gap is |fd - an| / max(|fd| + |an|, floor); below ``floor`` the
    comparison is effectively absolute, since BLAS results can move by an ulp
    between calls and that noise is amplified by 1/h.
    """
    params = list(params)
    for p in params:
        if p.dtype != torch.float64:
            raise InputError("grad_check runs in float64 only")
    for p in params:
        p.grad = None
    out = fn()
    if not torch.isfinite(out):
        raise NumericError("objective is not finite at the probe point")
    analytic = torch.autograd.grad(out, params, allow_unused=True)
    rng = np.random.default_rng(seed)
    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, analytic):
            g = torch.zeros_like(p) if g is None else g
            flat, gflat = p.view(-1), g.reshape(-1)
            idx = np.arange(flat.numel())
            if max_entries is not None and flat.numel() > max_entries:
                idx = rng.choice(flat.numel(), size=max_entries, replace=False)
            for i in idx:
                orig = flat[i].item()
                vals = []
                for step in (2 * eps, eps, -eps, -2 * eps):
                    flat[i] = orig + step
                    vals.append(fn().item())
                flat[i] = orig
                if not all(math.isfinite(v) for v in vals):
                    raise NumericError("objective became non-finite under perturbation")
                fd = (-vals[0] + 8 * vals[1] - 8 * vals[2] + vals[3]) / (12 * eps)
                an = gflat[i].item()
                worst = max(worst, abs(fd - an) / max(floor, abs(fd) + abs(an)))
    return worst


def _init(shape, fan_in, scale=1.0):
    return nn.Parameter(torch.randn(*shape) * (scale / math.sqrt(fan_in)))


class RMSNorm(nn.Module):
    def __init__(self, dim, eps=1e-6):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim))

    def forward(self, x):
        return rmsnorm(x, self.weight, self.eps)


class SwiGLU(nn.Module):
    def __init__(self, dim, hidden, out_scale=1.0):
        super().__init__()
        self.w_gate = _init((dim, hidden), dim)
        self.w_up = _init((dim, hidden), dim)
        self.w_down = _init((hidden, dim), hidden, out_scale)

    def forward(self, x):
        return swiglu_ffn(x, self.w_gate, self.w_up, self.w_down)


class SelfAttention(nn.Module):
    def __init__(self, dim, n_heads, out_scale=1.0):
        super().__init__()
        if dim % n_heads:
            raise ConfigError(f"hidden size {dim} not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.wq = _init((dim, dim), dim)
        self.wk = _init((dim, dim), dim)
        self.wv = _init((dim, dim), dim)
        self.wo = _init((dim, dim), dim, out_scale)

    def forward(self, x, rope, boundaries, window=None, causal=False):
        """``rope`` is a table from :func:`rope_table` for this stream's coords."""
        L = x.shape[0]
        shape = (L, self.n_heads, self.head_dim)
        q = apply_rotary(linear_nobias(x, self.wq).view(shape), rope)
        k = apply_rotary(linear_nobias(x, self.wk).view(shape), rope)
        v = linear_nobias(x, self.wv).view(shape)
        out = packed_attention(q, k, v, boundaries, window=window, causal=causal)
        return linear_nobias(out.reshape(L, -1), self.wo)


class CrossAttention(nn.Module):
    """Packed cross-attention without positional rotation."""

    def __init__(self, dim, kv_dim, n_heads, out_scale=1.0):
        super().__init__()
        if dim % n_heads:
            raise ConfigError(f"hidden size {dim} not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.wq = _init((dim, dim), dim)
        self.wk = _init((kv_dim, dim), kv_dim)
        self.wv = _init((kv_dim, dim), kv_dim)
        self.wo = _init((dim, dim), dim, out_scale)

    def forward(self, x, q_boundaries, memory, kv_boundaries):
        h, d = self.n_heads, self.head_dim
        q = linear_nobias(x, self.wq).view(-1, h, d)
        k = linear_nobias(memory, self.wk).view(-1, h, d)
        v = linear_nobias(memory, self.wv).view(-1, h, d)
        out = packed_cross_attention(q, k, v, q_boundaries, kv_boundaries)
        return linear_nobias(out.reshape(x.shape[0], -1), self.wo)


class Block(nn.Module):
    """Pre-norm transformer block: x += attn(norm(x)); x += ffn(norm(x))."""

    def __init__(self, dim, n_heads, ffn_dim, n_layers=1, cross_dim=None):
        super().__init__()
        out_scale = 1.0 / math.sqrt(2 * n_layers)
        self.attn_norm = RMSNorm(dim)
        self.attn = SelfAttention(dim, n_heads, out_scale)
        self.cross = None
        if cross_dim is not None:
            self.cross_norm = RMSNorm(dim)
            self.cross = CrossAttention(dim, cross_dim, n_heads, out_scale)
        self.ffn_norm = RMSNorm(dim)
        self.ffn = SwiGLU(dim, ffn_dim, out_scale)

    def forward(self, x, rope, boundaries, window=None, causal=False, memory=None, memory_boundaries=None):
        x = x + self.attn(self.attn_norm(x), rope, boundaries, window=window, causal=causal)
        if self.cross is not None:
            x = x + self.cross(self.cross_norm(x), boundaries, memory, memory_boundaries)
        x = x + self.ffn(self.ffn_norm(x))
        return check_finite("block output", x)
