"""Attention pooling, prototype head, caption decoder and the three losses."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn

from slap.encoders import BOS, EOS, VOCAB, EncoderOutput, pack_token_ids
from slap.errors import ConfigError, InputError, NumericError
from slap.nnet import Block, RMSNorm, _init, linear_nobias, packed_cross_attention, rope_table
from slap.packing import MaskPlan

log = logging.getLogger(__name__)

TAU_MIN, TAU_MAX = 0.005, 1.0


@dataclass
class HeadConfig:
    embed_dim: int = 64  # D, shared audio/text embedding size
    map_heads: int = 4
    proto_hidden: int = 256
    proto_dim: int = 64
    n_prototypes: int = 64
    student_temp: float = 0.1
    teacher_temp: float = 0.04
    center_momentum: float = 0.9

    def __post_init__(self):
        if self.n_prototypes < 2:
            raise ConfigError("need at least two prototypes")

    def to_dict(self):
        return asdict(self)


@dataclass
class CaptionDecoderConfig:
    n_layers: int = 2
    n_heads: int = 2
    hidden: int = 64
    ffn: int = 256
    max_len: int = 128
    vocab: int = VOCAB

    @classmethod
    def full_scale(cls):
        return cls(n_layers=8, n_heads=8, hidden=512, ffn=2048)

    def to_dict(self):
        return asdict(self)


@dataclass
class LossWeights:
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 0.5

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ConfigError("loss weights must be nonnegative")


def l2_normalize(x: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    return x / x.norm(dim=-1, keepdim=True).clamp_min(eps)


class MAPHead(nn.Module):
    """One learned query attends over each segment with several heads."""

    def __init__(self, dim, out_dim, n_heads):
        super().__init__()
        if dim % n_heads:
            raise ConfigError(f"MAP: {dim} not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.query = nn.Parameter(torch.randn(dim) * 0.02)
        self.wq = _init((dim, dim), dim)
        self.wk = _init((dim, dim), dim)
        self.wv = _init((dim, dim), dim)
        self.proj = _init((dim, out_dim), dim)

    def forward(self, feat: EncoderOutput) -> torch.Tensor:
        x, bounds = feat.features, feat.boundaries
        B, h = len(bounds) - 1, self.n_heads
        if any(hi <= lo for lo, hi in zip(bounds[:-1], bounds[1:])):
            raise InputError("MAP pooling over an empty segment")
        d = x.shape[-1] // h
        q = linear_nobias(self.query, self.wq).expand(B, -1).reshape(B, h, d)
        k = linear_nobias(x, self.wk).view(-1, h, d)
        v = linear_nobias(x, self.wv).view(-1, h, d)
        pooled = packed_cross_attention(q, k, v, tuple(range(B + 1)), bounds)
        return l2_normalize(linear_nobias(pooled.reshape(B, -1), self.proj))


class PrototypeHead(nn.Module):
    def __init__(self, dim, cfg: HeadConfig):
        super().__init__()
        self.w1 = _init((dim, cfg.proto_hidden), dim)
        self.w2 = _init((cfg.proto_hidden, cfg.proto_dim), cfg.proto_hidden)
        self.prototypes = nn.Parameter(l2_normalize(torch.randn(cfg.n_prototypes, cfg.proto_dim)))

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        """Cosine similarity of projected features to each prototype."""
        z = l2_normalize(linear_nobias(F.gelu(linear_nobias(x, self.w1)), self.w2))
        return z @ self.prototypes.T

    @torch.no_grad()
    def normalize_prototypes(self):
        self.prototypes.copy_(l2_normalize(self.prototypes))


def prototype_scores(logits: torch.Tensor, temp: float, center=None) -> torch.Tensor:
    if temp <= 0:
        raise InputError("prototype temperature must be positive")
    if center is not None:
        logits = logits - center
    return torch.softmax(logits / temp, dim=-1)


def clap_loss(audio_emb: torch.Tensor, text_emb: torch.Tensor, tau) -> torch.Tensor:
    """Symmetric InfoNCE over matched rows, as a negative log-likelihood."""
    if audio_emb.shape != text_emb.shape or audio_emb.shape[0] < 1:
        raise InputError("embedding pair must share a nonempty (B, D) shape")
    logits = audio_emb @ text_emb.T / tau
    target = torch.arange(logits.shape[0])
    return 0.5 * (F.cross_entropy(logits, target) + F.cross_entropy(logits.T, target))


def ssl_loss(q_teacher: torch.Tensor, q_student: torch.Tensor) -> torch.Tensor:
    """Mean over masked tokens of the cross-entropy H(q_teacher, q_student)."""
    if q_teacher.shape[0] == 0:
        log.warning("ssl_loss: no masked tokens in batch")
        return q_student.sum() * 0.0
    return -(q_teacher.detach() * torch.log(q_student)).sum(dim=-1).mean()


def ssl_loss_from_logits(q_teacher, student_logits, student_temp):
    # log_softmax form of ssl_loss, numerically safer for sharp students
    if q_teacher.shape[0] == 0:
        log.warning("ssl_loss: no masked tokens in batch")
        return student_logits.sum() * 0.0
    logq = F.log_softmax(student_logits / student_temp, dim=-1)
    return -(q_teacher.detach() * logq).sum(dim=-1).mean()


def caption_nll(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    return F.cross_entropy(logits, targets)


def total_loss(l_clap, l_ssl, l_cap, w: LossWeights):
    for name, v in (("l_clap", l_clap), ("l_ssl", l_ssl), ("l_cap", l_cap)):
        if not math.isfinite(float(v.detach() if torch.is_tensor(v) else v)):
            raise NumericError(f"{name} is not finite")
    return w.alpha * l_clap + w.beta * l_ssl + w.gamma * l_cap


class CaptionDecoder(nn.Module):
    """Causal byte-level decoder cross-attending to one clip's dense features."""

    def __init__(self, cfg: CaptionDecoderConfig, audio_dim: int):
        super().__init__()
        self.cfg = cfg
        self.embed = nn.Parameter(torch.randn(VOCAB, cfg.hidden))
        self.blocks = nn.ModuleList(
            Block(cfg.hidden, cfg.n_heads, cfg.ffn, cfg.n_layers, cross_dim=audio_dim)
            for _ in range(cfg.n_layers)
        )
        self.final_norm = RMSNorm(cfg.hidden)
        self.out = _init((cfg.hidden, VOCAB), cfg.hidden)

    def logits(self, prefixes, audio: EncoderOutput) -> tuple:
        """Next-token logits for every position of every prefix; returns (logits, boundaries)."""
        ids, bounds, coords = pack_token_ids(prefixes)
        if len(bounds) != len(audio.boundaries):
            raise InputError("caption batch and audio batch differ in size")
        x = self.embed[ids]
        rope = rope_table(coords, self.cfg.hidden // self.cfg.n_heads, dtype=x.dtype)
        for block in self.blocks:
            x = block(x, rope, bounds, causal=True, memory=audio.features, memory_boundaries=audio.boundaries)
        return linear_nobias(self.final_norm(x), self.out), bounds

    def loss(self, captions, audio: EncoderOutput) -> torch.Tensor:
        """Teacher-forced token NLL averaged over all target positions."""
        for c in captions:
            if len(c) < 2:
                raise InputError("caption needs at least BOS and one target token")
        logits, _ = self.logits([c[:-1] for c in captions], audio)
        targets = torch.tensor([t for c in captions for t in c[1:]], dtype=torch.long)
        return caption_nll(logits, targets)

    @torch.no_grad()
    def greedy_decode(self, audio: EncoderOutput, max_len: int | None = None) -> list:
        """Argmax decoding per clip until EOS or ``max_len`` tokens."""
        max_len = max_len or self.cfg.max_len
        B = len(audio.boundaries) - 1
        seqs = [[BOS] for _ in range(B)]
        done = [False] * B
        while not all(done) and max(len(s) for s in seqs) < max_len:
            logits, bounds = self.logits(seqs, audio)
            for i in range(B):
                if done[i]:
                    continue
                nxt = int(torch.argmax(logits[bounds[i + 1] - 1]))
                seqs[i].append(nxt)
                done[i] = nxt == EOS
        return seqs
