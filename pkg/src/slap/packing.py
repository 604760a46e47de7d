"""Padding-free packing of variable-length patch sequences, plus SSL masking."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from slap.dsp import PatchSeq
from slap.errors import InputError, InvariantError


@dataclass
class PackedBatch:
    """All tokens of a batch laid end to end.

    ``boundaries`` holds cumulative sequence lengths: sample ``i`` owns rows
    ``boundaries[i]:boundaries[i + 1]`` of ``tokens`` and ``coords``.
    """

    tokens: torch.Tensor  # (L_total, D)
    boundaries: tuple  # (B + 1,) ints
    coords: torch.Tensor  # (L_total, 2) long, (t_idx, f_idx)

    @property
    def sample_count(self) -> int:
        return len(self.boundaries) - 1

    @property
    def total_len(self) -> int:
        return self.boundaries[-1]

    @property
    def lengths(self) -> list:
        return [b - a for a, b in zip(self.boundaries[:-1], self.boundaries[1:])]

    def segments(self):
        return list(zip(self.boundaries[:-1], self.boundaries[1:]))

    def with_tokens(self, tokens: torch.Tensor) -> "PackedBatch":
        return replace(self, tokens=tokens)


@dataclass
class MaskPlan:
    masked: list = field(default_factory=list)  # per sample: sorted global indices
    ratio: float = 0.0

    def flat_indices(self) -> np.ndarray:
        if not self.masked:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate([np.asarray(m, dtype=np.int64) for m in self.masked])

    @property
    def count(self) -> int:
        return sum(len(m) for m in self.masked)


def check_boundaries(boundaries, total_len=None) -> None:
    b = list(boundaries)
    if len(b) < 2 or b[0] != 0:
        raise InvariantError(f"boundaries must start at 0 and cover >= 1 sample: {b}")
    if any(hi <= lo for lo, hi in zip(b[:-1], b[1:])):
        raise InvariantError(f"boundaries must be strictly increasing: {b}")
    if total_len is not None and b[-1] != total_len:
        raise InvariantError(f"boundaries end at {b[-1]} but stream has {total_len} tokens")


def boundaries_from_lengths(lengths) -> tuple:
    return tuple(int(x) for x in np.concatenate([[0], np.cumsum(lengths)]))


def segment_ids(boundaries) -> torch.Tensor:
    lengths = torch.tensor([hi - lo for lo, hi in zip(boundaries[:-1], boundaries[1:])])
    return torch.repeat_interleave(torch.arange(len(lengths)), lengths)


def pack(seqs) -> PackedBatch:
    if not seqs:
        raise InputError("cannot pack an empty batch")
    for i, s in enumerate(seqs):
        if len(s) == 0:
            raise InputError(f"sequence {i} is empty")
    tokens = torch.from_numpy(np.concatenate([s.patches for s in seqs], axis=0))
    coords = torch.from_numpy(np.concatenate([s.coords for s in seqs], axis=0)).long()
    return PackedBatch(tokens, boundaries_from_lengths([len(s) for s in seqs]), coords)


def unpack(p: PackedBatch) -> list:
    """Split a raw-patch PackedBatch back into PatchSeqs."""
    check_boundaries(p.boundaries, p.tokens.shape[0])
    out = []
    for lo, hi in p.segments():
        coords = p.coords[lo:hi].numpy().copy()
        n_freq = int(coords[:, 1].max()) + 1
        if (hi - lo) % n_freq:
            raise InvariantError(f"segment [{lo}, {hi}) is not a whole number of time rows")
        out.append(PatchSeq(p.tokens[lo:hi].numpy().copy(), coords, (hi - lo) // n_freq, n_freq))
    return out


def split_segments(x: torch.Tensor, boundaries) -> list:
    check_boundaries(boundaries, x.shape[0])
    return [x[lo:hi] for lo, hi in zip(boundaries[:-1], boundaries[1:])]


def mask_count(n: int, ratio: float) -> int:
    """round(ratio * n) with halves rounded up, and at least one token when ratio > 0."""
    if ratio <= 0 or n == 0:
        return 0
    return min(n, max(1, math.floor(ratio * n + 0.5)))


def plan_mask(p: PackedBatch, ratio: float, rng: np.random.Generator) -> MaskPlan:
    if not 0.0 <= ratio <= 1.0:
        raise InputError(f"mask ratio must lie in [0, 1], got {ratio}")
    masked = []
    for lo, hi in p.segments():
        k = mask_count(hi - lo, ratio)
        picks = rng.choice(hi - lo, size=k, replace=False) if k else np.zeros(0, dtype=np.int64)
        masked.append(np.sort(picks).astype(np.int64) + lo)
    return MaskPlan(masked, ratio)


def check_plan(p: PackedBatch, plan: MaskPlan) -> None:
    if len(plan.masked) != p.sample_count:
        raise InvariantError(f"plan covers {len(plan.masked)} samples, batch has {p.sample_count}")
    for i, ((lo, hi), idx) in enumerate(zip(p.segments(), plan.masked)):
        idx = np.asarray(idx)
        if idx.size and (idx.min() < lo or idx.max() >= hi):
            raise InvariantError(f"mask index outside segment {i} [{lo}, {hi})")


def apply_mask(p: PackedBatch, plan: MaskPlan, mask_embedding: torch.Tensor) -> PackedBatch:
    """Swap masked rows for the mask embedding; positions are left alone."""
    check_plan(p, plan)
    idx = torch.from_numpy(plan.flat_indices())
    if idx.numel() == 0:
        return p
    hit = torch.zeros(p.tokens.shape[0], 1, dtype=torch.bool)
    hit[idx] = True
    tokens = torch.where(hit, mask_embedding.to(p.tokens.dtype).expand_as(p.tokens), p.tokens)
    return p.with_tokens(tokens)
