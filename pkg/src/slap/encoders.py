"""Audio and text towers built from the same pre-norm block."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch
from torch import nn

from slap.errors import ConfigError, InputError
from slap.nnet import Block, RMSNorm, _init, check_finite, linear_nobias, rope_table
from slap.packing import PackedBatch, apply_mask, boundaries_from_lengths

PAD, BOS, EOS = 256, 257, 258
VOCAB = 259


def default_pattern(n_layers: int) -> list:
    return ["global" if (i % 3) == 2 else "local" for i in range(n_layers)]


@dataclass
class AudioEncoderConfig:
    n_layers: int = 6
    n_heads: int = 4
    hidden: int = 64
    ffn: int = 256
    window: int = 12
    pattern: list = field(default_factory=list)
    patch_dim: int = 256

    def __post_init__(self):
        if not self.pattern:
            self.pattern = default_pattern(self.n_layers)
        self.pattern = list(self.pattern)
        if len(self.pattern) != self.n_layers:
            raise ConfigError(f"pattern has {len(self.pattern)} entries for {self.n_layers} layers")
        if any(p not in ("local", "global") for p in self.pattern):
            raise ConfigError(f"pattern entries must be 'local' or 'global': {self.pattern}")
        if self.hidden % self.n_heads or (self.hidden // self.n_heads) % 4:
            raise ConfigError("hidden / n_heads must be an integer divisible by 4")

    @classmethod
    def full_scale(cls):
        return cls(n_layers=12, n_heads=12, hidden=768, ffn=3072)

    def to_dict(self):
        return asdict(self)


@dataclass
class TextEncoderConfig:
    n_layers: int = 2
    n_heads: int = 4
    hidden: int = 64
    ffn: int = 256
    max_len: int = 128
    vocab: int = VOCAB

    def __post_init__(self):
        if self.vocab != VOCAB:
            raise ConfigError(f"byte vocabulary is fixed at {VOCAB}")
        if self.hidden % self.n_heads or (self.hidden // self.n_heads) % 4:
            raise ConfigError("hidden / n_heads must be an integer divisible by 4")
        if self.max_len < 2:
            raise ConfigError("max_len must leave room for BOS and EOS")

    def to_dict(self):
        return asdict(self)


@dataclass
class EncoderOutput:
    features: torch.Tensor  # (L_total, H)
    boundaries: tuple
    coords: torch.Tensor


def tokenize(text: str, max_len: int = 128) -> list:
    body = list(text.encode("utf-8"))[: max_len - 2]
    return [BOS, *body, EOS]


def detokenize(ids) -> str:
    return bytes(i for i in ids if i < 256).decode("utf-8", errors="replace")


def pack_token_ids(batch) -> tuple:
    """Drop PAD ids from each sequence and lay the rest end to end.

    Returns (ids, boundaries, coords) where coords are (position, 0).
    """
    seqs = []
    for row in batch:
        ids = [int(i) for i in (row.tolist() if torch.is_tensor(row) else row)]
        ids = [i for i in ids if i != PAD]
        if not ids:
            raise InputError("token sequence is empty after removing padding")
        if any(i < 0 or i >= VOCAB for i in ids):
            raise InputError(f"token id out of range [0, {VOCAB})")
        seqs.append(ids)
    flat = torch.tensor([i for s in seqs for i in s], dtype=torch.long)
    pos = torch.cat([torch.arange(len(s)) for s in seqs])
    coords = torch.stack([pos, torch.zeros_like(pos)], dim=1)
    return flat, boundaries_from_lengths([len(s) for s in seqs]), coords


class AudioEncoder(nn.Module):
    def __init__(self, cfg: AudioEncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.patch_proj = _init((cfg.patch_dim, cfg.hidden), cfg.patch_dim)
        self.stem_norm = RMSNorm(cfg.hidden)
        self.mask_token = nn.Parameter(torch.randn(cfg.hidden) * 0.02)
        self.blocks = nn.ModuleList(
            Block(cfg.hidden, cfg.n_heads, cfg.ffn, cfg.n_layers) for _ in range(cfg.n_layers)
        )
        self.final_norm = RMSNorm(cfg.hidden)

    def forward(self, p: PackedBatch, mask=None) -> EncoderOutput:
        if p.tokens.shape[-1] != self.cfg.patch_dim:
            raise InputError(f"expected {self.cfg.patch_dim}-dim patches, got {p.tokens.shape[-1]}")
        dtype = self.patch_proj.dtype
        x = self.stem_norm(linear_nobias(p.tokens.to(dtype), self.patch_proj))
        if mask is not None:
            x = apply_mask(p.with_tokens(x), mask, self.mask_token).tokens
        rope = rope_table(p.coords, self.cfg.hidden // self.cfg.n_heads, dtype=dtype)
        for block, kind in zip(self.blocks, self.cfg.pattern):
            window = self.cfg.window if kind == "local" else None
            x = block(x, rope, p.boundaries, window=window)
        x = check_finite("audio features", self.final_norm(x))
        return EncoderOutput(x, p.boundaries, p.coords)


class TextEncoder(nn.Module):
    """Bidirectional byte-level encoder; positions use the time half of RoPE."""

    def __init__(self, cfg: TextEncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = nn.Parameter(torch.randn(VOCAB, cfg.hidden))
        self.blocks = nn.ModuleList(
            Block(cfg.hidden, cfg.n_heads, cfg.ffn, cfg.n_layers) for _ in range(cfg.n_layers)
        )
        self.final_norm = RMSNorm(cfg.hidden)

    def forward(self, batch) -> EncoderOutput:
        ids, boundaries, coords = pack_token_ids(batch)
        x = self.embed[ids]
        rope = rope_table(coords, self.cfg.hidden // self.cfg.n_heads, dtype=x.dtype)
        for block in self.blocks:
            x = block(x, rope, boundaries)
        return EncoderOutput(check_finite("text features", self.final_norm(x)), boundaries, coords)

    def encode_texts(self, texts) -> EncoderOutput:
        return self(tokenize(t, self.cfg.max_len) for t in texts)
