"""Finite-difference gradient checks for every loss, and a packing benchmark."""

from __future__ import annotations

import time

import numpy as np
import torch

from slap.dsp import PatchSeq
from slap.encoders import AudioEncoderConfig, EncoderOutput, TextEncoderConfig, tokenize
from slap.heads import (
    CaptionDecoder,
    CaptionDecoderConfig,
    HeadConfig,
    clap_loss,
    l2_normalize,
    prototype_scores,
    ssl_loss_from_logits,
)
from slap.model import ModelConfig, SlapModel, build_teacher
from slap.nnet import grad_check
from slap.packing import pack, plan_mask

TOLERANCE = 1e-4


def random_patch_seq(n_time: int, rng: np.random.Generator, n_freq: int = 4) -> PatchSeq:
    t, f = np.divmod(np.arange(n_time * n_freq), n_freq)
    patches = rng.standard_normal((n_time * n_freq, 256)).astype(np.float32)
    return PatchSeq(patches, np.stack([t, f], axis=1).astype(np.int64), n_time, n_freq)


def small_model_config() -> ModelConfig:
    """Two-layer towers, small enough for entrywise finite differences."""
    return ModelConfig(
        audio=AudioEncoderConfig(n_layers=2, n_heads=2, hidden=16, ffn=32, window=3, pattern=["local", "global"]),
        text=TextEncoderConfig(n_layers=1, n_heads=2, hidden=16, ffn=32, max_len=32),
        decoder=CaptionDecoderConfig(n_layers=1, n_heads=2, hidden=16, ffn=32, max_len=32),
        heads=HeadConfig(embed_dim=8, map_heads=2, proto_hidden=16, proto_dim=8, n_prototypes=8),
    )


def check_clap(seed: int = 0) -> float:
    g = torch.Generator().manual_seed(seed)
    a = torch.randn(4, 8, dtype=torch.float64, generator=g).requires_grad_(True)
    t = torch.randn(4, 8, dtype=torch.float64, generator=g).requires_grad_(True)
    log_tau = torch.tensor(np.log(0.3), dtype=torch.float64, requires_grad=True)
    return grad_check(lambda: clap_loss(l2_normalize(a), l2_normalize(t), log_tau.exp()), [a, t, log_tau])


def check_ssl(seed: int = 0) -> float:
    g = torch.Generator().manual_seed(seed)
    s = torch.randn(6, 8, dtype=torch.float64, generator=g).mul_(0.3).requires_grad_(True)
    center = torch.randn(8, dtype=torch.float64, generator=g) * 0.1
    q_t = prototype_scores(torch.randn(6, 8, dtype=torch.float64, generator=g) * 0.3, 0.04, center)
    return grad_check(lambda: ssl_loss_from_logits(q_t, s, 0.1), [s])


def check_caption(seed: int = 0, max_entries: int = 6) -> float:
    torch.manual_seed(seed)
    dec = CaptionDecoder(CaptionDecoderConfig(n_layers=1, n_heads=2, hidden=16, ffn=32), 8).double()
    mem = torch.randn(7, 8, dtype=torch.float64, requires_grad=True)
    caps = [tokenize("ab"), tokenize("low")]
    fn = lambda: dec.loss(caps, EncoderOutput(mem, (0, 3, 7), None))  # noqa: E731
    return grad_check(fn, [mem, *dec.parameters()], max_entries=max_entries, seed=seed)


def check_end_to_end(seed: int = 0, max_entries: int = 4) -> float:
    """Total loss through a 2-layer student, text tower, heads and decoder."""
    from slap.state import TrainConfig
    from slap.trainer import forward_losses

    cfg = small_model_config()
    torch.manual_seed(seed)
    model = SlapModel(cfg).double()
    teacher = build_teacher(cfg).double()
    teacher.load_state_dict({k: v.detach() + 0.01 for k, v in model.ssl_view().state_dict().items()})
    rng = np.random.default_rng(seed)
    p = pack([random_patch_seq(2, rng), random_patch_seq(3, rng)])
    plan = plan_mask(p, 0.5, rng)
    caps = [tokenize("a low tone"), tokenize("high")]
    center = torch.zeros(cfg.heads.n_prototypes, dtype=torch.float64)
    train_cfg = TrainConfig()
    fn = lambda: forward_losses(model, teacher, center, cfg, train_cfg, p, plan, caps)["total"]  # noqa: E731
    return grad_check(fn, list(model.parameters()), max_entries=max_entries, seed=seed)


def run_grad_checks(seed: int = 0) -> dict:
    return {
        "clap_loss": check_clap(seed),
        "ssl_loss": check_ssl(seed),
        "caption_loss": check_caption(seed),
        "encoder_total_loss": check_end_to_end(seed),
    }


def pack_bench(model, n_clips: int = 8, seed: int = 0, repeats: int = 3) -> dict:
    """Time one packed forward and count the padding a (B, Lmax) layout would add."""
    rng = np.random.default_rng(seed)
    seqs = [random_patch_seq(int(rng.integers(6, 188)), rng) for _ in range(n_clips)]
    p = pack(seqs)
    lengths = p.lengths
    model.eval()
    with torch.no_grad():
        model.audio(p)
        t0 = time.perf_counter()
        for _ in range(repeats):
            model.audio(p)
        dt = (time.perf_counter() - t0) / repeats
    padded = len(lengths) * max(lengths)
    return {
        "clips": n_clips,
        "tokens": int(p.total_len),
        "padded_tokens": int(padded),
        "padding_saved": 1.0 - p.total_len / padded,
        "seconds_per_forward": dt,
        "tokens_per_second": p.total_len / dt,
    }
