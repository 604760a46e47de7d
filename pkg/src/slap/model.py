"""Full model: both towers, pooling heads, prototype head and caption decoder."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import torch
from torch import nn

from slap.encoders import AudioEncoder, AudioEncoderConfig, TextEncoder, TextEncoderConfig, tokenize
from slap.heads import (
    TAU_MAX,
    TAU_MIN,
    CaptionDecoder,
    CaptionDecoderConfig,
    HeadConfig,
    MAPHead,
    PrototypeHead,
)
from slap.packing import pack


@dataclass
class ModelConfig:
    audio: AudioEncoderConfig = field(default_factory=AudioEncoderConfig)
    text: TextEncoderConfig = field(default_factory=TextEncoderConfig)
    decoder: CaptionDecoderConfig = field(default_factory=CaptionDecoderConfig)
    heads: HeadConfig = field(default_factory=HeadConfig)
    tau_init: float = 0.07

    def to_dict(self):
        return {
            "audio": self.audio.to_dict(),
            "text": self.text.to_dict(),
            "decoder": self.decoder.to_dict(),
            "heads": self.heads.to_dict(),
            "tau_init": self.tau_init,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        return cls(
            audio=AudioEncoderConfig(**d.get("audio", {})),
            text=TextEncoderConfig(**d.get("text", {})),
            decoder=CaptionDecoderConfig(**d.get("decoder", {})),
            heads=HeadConfig(**d.get("heads", {})),
            tau_init=d.get("tau_init", 0.07),
        )

    def digest(self) -> bytes:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).digest()


class SlapModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        h = cfg.heads
        self.audio = AudioEncoder(cfg.audio)
        self.text = TextEncoder(cfg.text)
        self.audio_map = MAPHead(cfg.audio.hidden, h.embed_dim, h.map_heads)
        self.text_map = MAPHead(cfg.text.hidden, h.embed_dim, h.map_heads)
        self.proto = PrototypeHead(cfg.audio.hidden, h)
        self.decoder = CaptionDecoder(cfg.decoder, cfg.audio.hidden)
        self.log_tau = nn.Parameter(torch.tensor(math.log(cfg.tau_init)))

    def tau(self) -> torch.Tensor:
        return self.log_tau.exp().clamp(TAU_MIN, TAU_MAX)

    def ssl_view(self) -> nn.ModuleDict:
        """The parameters the EMA teacher mirrors (shares storage with self)."""
        return nn.ModuleDict({"audio": self.audio, "proto": self.proto})

    @torch.no_grad()
    def embed_audio(self, seqs, batch_size: int = 16) -> torch.Tensor:
        out = []
        for i in range(0, len(seqs), batch_size):
            out.append(self.audio_map(self.audio(pack(seqs[i : i + batch_size]))))
        return torch.cat(out)

    @torch.no_grad()
    def embed_text(self, texts, batch_size: int = 64) -> torch.Tensor:
        out = []
        for i in range(0, len(texts), batch_size):
            ids = [tokenize(t, self.cfg.text.max_len) for t in texts[i : i + batch_size]]
            out.append(self.text_map(self.text(ids)))
        return torch.cat(out)


def build_teacher(cfg: ModelConfig) -> nn.ModuleDict:
    h = cfg.heads
    return nn.ModuleDict({"audio": AudioEncoder(cfg.audio), "proto": PrototypeHead(cfg.audio.hidden, h)})
