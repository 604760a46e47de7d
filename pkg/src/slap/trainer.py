"""Single-stage training: contrastive + masked self-distillation + captioning."""

from __future__ import annotations

import json
import logging
import math
from contextlib import nullcontext
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from slap.dsp import MelSpec, mel_spectrogram, load_wav, patchify, spec_augment
from slap.ema import MomentumSchedule, ema_update, momentum_at
from slap.encoders import tokenize
from slap.errors import InputError, NumericError
from slap.heads import clap_loss, prototype_scores, ssl_loss_from_logits, total_loss
from slap.packing import pack, plan_mask
from slap.state import TrainConfig, TrainState, init_state

log = logging.getLogger(__name__)

LOG_KEYS = ("step", "l_clap", "l_ssl", "l_cap", "total", "lr", "m", "grad_norm", "tau")


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``lr_peak``; constant afterwards unless cosine decay is set."""
    if cfg.warmup_steps > 0 and step < cfg.warmup_steps:
        return cfg.lr_peak * step / cfg.warmup_steps
    if cfg.lr_decay == "cosine" and cfg.steps > cfg.warmup_steps:
        frac = min(1.0, (step - cfg.warmup_steps) / (cfg.steps - cfg.warmup_steps))
        lo = cfg.lr_peak * cfg.min_lr_ratio
        return lo + (cfg.lr_peak - lo) * 0.5 * (1.0 + math.cos(math.pi * frac))
    return cfg.lr_peak


def _grad_ctx(enabled: bool):
    return nullcontext() if enabled else torch.no_grad()


def forward_losses(model, teacher, center, model_cfg, cfg: TrainConfig, p, plan, captions) -> dict:
    """All three loss terms for one packed batch and a fixed mask plan.

    Terms whose weight is zero are evaluated without building a graph.
    """
    w = cfg.weights
    hcfg = model_cfg.heads
    idx = torch.from_numpy(plan.flat_indices())

    need_unmasked = w.alpha > 0 or w.gamma > 0
    with _grad_ctx(w.beta > 0 or (cfg.share_masked_pass and need_unmasked)):
        masked_out = model.audio(p, mask=plan)
        s_logits = model.proto.logits(masked_out.features[idx])
    if cfg.share_masked_pass:
        audio_out = masked_out
    else:
        with _grad_ctx(need_unmasked):
            audio_out = model.audio(p)

    with torch.no_grad():
        t_out = teacher["audio"](p)
        t_logits = teacher["proto"].logits(t_out.features[idx])
        q_t = prototype_scores(t_logits, hcfg.teacher_temp, center)

    with _grad_ctx(w.alpha > 0):
        e_a = model.audio_map(audio_out)
        e_t = model.text_map(model.text(captions))
        tau = model.tau()
        l_clap = clap_loss(e_a, e_t, tau)
    with _grad_ctx(w.beta > 0):
        l_ssl = ssl_loss_from_logits(q_t, s_logits, hcfg.student_temp)
    with _grad_ctx(w.gamma > 0):
        l_cap = model.decoder.loss(captions, audio_out)
    total = total_loss(l_clap, l_ssl, l_cap, w)
    return {"l_clap": l_clap, "l_ssl": l_ssl, "l_cap": l_cap, "total": total, "tau": tau, "t_logits": t_logits}


def train_step(state: TrainState, seqs, captions, rng: np.random.Generator) -> dict:
    """One optimizer step on a batch of patch sequences and caption token ids."""
    cfg = state.train_cfg
    w = cfg.weights
    model, teacher = state.model, state.teacher
    hcfg = state.model_cfg.heads

    p = pack(seqs)
    plan = plan_mask(p, cfg.mask_ratio, rng)
    try:
        out = forward_losses(model, teacher, state.center, state.model_cfg, cfg, p, plan, captions)
    except NumericError as e:
        raise NumericError(f"step {state.step}: {e}") from e
    l_clap, l_ssl, l_cap, total = out["l_clap"], out["l_ssl"], out["l_cap"], out["total"]
    tau, t_logits = out["tau"], out["t_logits"]

    lr = lr_at(state.step, cfg)
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    state.optimizer.zero_grad(set_to_none=True)
    grad_norm = 0.0
    if total.requires_grad:
        total.backward()
        params = [q for q in model.parameters() if q.grad is not None]
        grad_norm = float(torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip))
        if not math.isfinite(grad_norm):
            raise NumericError(f"step {state.step}: gradient norm is {grad_norm}")
        state.optimizer.step()
        model.proto.normalize_prototypes()

    m = momentum_at(state.step, MomentumSchedule(cfg.steps, cfg.m_start, cfg.m_end))
    ema_update(teacher, model.ssl_view(), m)
    if t_logits.shape[0]:
        cm = hcfg.center_momentum
        state.center.mul_(cm).add_(t_logits.mean(dim=0), alpha=1.0 - cm)

    record = {
        "step": state.step,
        "l_clap": float(l_clap.detach()),
        "l_ssl": float(l_ssl.detach()),
        "l_cap": float(l_cap.detach()),
        "total": float(total.detach()),
        "lr": lr,
        "m": m,
        "grad_norm": grad_norm,
        "tau": float(tau.detach()),
        "grad_free": [n for n, wt in (("l_clap", w.alpha), ("l_ssl", w.beta), ("l_cap", w.gamma)) if wt == 0],
    }
    state.step += 1
    return record


@dataclass
class ClipBank:
    """Cached log-mel features and caption ids for every manifest record."""

    ids: list
    mels: list
    captions: list
    texts: list

    @classmethod
    def from_manifest(cls, manifest, max_len: int = 128):
        missing = [r.audio_path for r in manifest if not Path(r.audio_path).exists()]
        if missing:
            raise FileNotFoundError(f"{len(missing)} audio files missing, first: {missing[0]}")
        mels = [mel_spectrogram(load_wav(r.audio_path)) for r in manifest]
        return cls(
            [r.id for r in manifest],
            mels,
            [tokenize(r.caption, max_len) for r in manifest],
            [r.caption for r in manifest],
        )

    def __len__(self):
        return len(self.ids)

    def patches(self, i: int, rng=None, augment: bool = False):
        m: MelSpec = self.mels[i]
        if augment:
            m = spec_augment(m, rng)
        return patchify(m)

    def token_count(self, i: int) -> int:
        return (self.mels[i].n_frames // 16) * 4


def steps_per_epoch(n: int, batch_size: int) -> int:
    return math.ceil(n / batch_size)


def epoch_batches(bank: ClipBank, cfg: TrainConfig, epoch: int) -> list:
    order = np.random.default_rng([cfg.seed, epoch, 1]).permutation(len(bank))
    window = max(1, cfg.sort_window) * cfg.batch_size
    batches = []
    for lo in range(0, len(order), window):
        chunk = sorted(order[lo : lo + window], key=bank.token_count)
        batches.extend(chunk[i : i + cfg.batch_size] for i in range(0, len(chunk), cfg.batch_size))
    return [[int(i) for i in b] for b in batches]


def batch_for_step(bank: ClipBank, cfg: TrainConfig, step: int) -> list:
    spe = steps_per_epoch(len(bank), cfg.batch_size)
    return epoch_batches(bank, cfg, step // spe)[step % spe]


def run_step(state: TrainState, bank: ClipBank) -> dict:
    cfg = state.train_cfg
    rng = np.random.default_rng([cfg.seed, state.step, 2])
    idx = batch_for_step(bank, cfg, state.step)
    seqs = [bank.patches(i, rng, cfg.spec_augment) for i in idx]
    return train_step(state, seqs, [bank.captions[i] for i in idx], rng)


def fit(cfg: TrainConfig, manifest, out_dir, model_cfg=None, resume=None, bank=None, on_step=None):
    """Train to ``cfg.steps`` total steps, writing metrics.jsonl and checkpoints to ``out_dir``."""
    from slap.checkpoint import load_checkpoint, save_checkpoint
    from slap.model import ModelConfig

    if len(manifest) == 0:
        raise InputError("manifest is empty")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model_cfg = model_cfg or ModelConfig()
    bank = bank or ClipBank.from_manifest(manifest, model_cfg.text.max_len)
    if resume is not None:
        state = load_checkpoint(resume, model_cfg=model_cfg)
        state.train_cfg = cfg
    else:
        state = init_state(model_cfg, cfg)
    grad_free = [n for n, wt in (("l_clap", cfg.alpha), ("l_ssl", cfg.beta), ("l_cap", cfg.gamma)) if wt == 0]
    if grad_free:
        log.info("gradient-free components (weight 0): %s", ", ".join(grad_free))
    with open(out / "metrics.jsonl", "a") as f:
        while state.step < cfg.steps:
            rec = run_step(state, bank)
            f.write(json.dumps({k: rec[k] for k in LOG_KEYS}) + "\n")
            if on_step is not None:
                on_step(rec)
            if cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
                save_checkpoint(state, out / f"step_{state.step:07d}.slap")
    save_checkpoint(state, out / "final.slap")
    return state
