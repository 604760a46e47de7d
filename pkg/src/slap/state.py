"""Training configuration and the mutable state a run carries between steps."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch
from torch import nn

from slap.ema import make_teacher
from slap.errors import ConfigError
from slap.heads import LossWeights
from slap.model import ModelConfig, SlapModel, build_teacher


@dataclass
class TrainConfig:
    batch_size: int = 32
    steps: int = 1000
    lr_peak: float = 1e-4
    warmup_steps: int = 100
    lr_decay: str = "constant"  # or "cosine"
    min_lr_ratio: float = 0.0
    mask_ratio: float = 0.5
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 0.5
    seed: int = 0
    betas: tuple = (0.9, 0.95)
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    spec_augment: bool = True
    sort_window: int = 1  # batches per length-sorted window
    share_masked_pass: bool = False
    checkpoint_every: int = 0
    m_start: float = 0.994
    m_end: float = 1.0

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.batch_size < 1 or self.steps < 0 or self.warmup_steps < 0:
            raise ConfigError("batch_size must be >= 1, steps and warmup_steps >= 0")
        if self.lr_peak <= 0 or self.grad_clip <= 0:
            raise ConfigError("lr_peak and grad_clip must be positive")
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ConfigError("mask_ratio must lie in [0, 1]")
        if self.lr_decay not in ("constant", "cosine"):
            raise ConfigError(f"unknown lr_decay {self.lr_decay!r}")
        LossWeights(self.alpha, self.beta, self.gamma)

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.alpha, self.beta, self.gamma)

    def to_dict(self):
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


@dataclass
class TrainState:
    model: SlapModel
    teacher: nn.ModuleDict
    optimizer: torch.optim.Optimizer
    center: torch.Tensor
    step: int = 0
    model_cfg: ModelConfig = field(default_factory=ModelConfig)
    train_cfg: TrainConfig = field(default_factory=TrainConfig)


def param_groups(model: nn.Module, weight_decay: float):
    """Matrices decay; gains, vectors and the temperature do not."""
    decay, keep = [], []
    for _, p in model.named_parameters():
        (decay if p.ndim >= 2 else keep).append(p)
    return [
        {"params": decay, "weight_decay": weight_decay},
        {"params": keep, "weight_decay": 0.0},
    ]


def build_optimizer(model: nn.Module, cfg: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.AdamW(
        param_groups(model, cfg.weight_decay), lr=0.0, betas=cfg.betas, eps=1e-8, foreach=False
    )


def init_state(model_cfg: ModelConfig, train_cfg: TrainConfig) -> TrainState:
    torch.manual_seed(train_cfg.seed)
    model = SlapModel(model_cfg)
    teacher = make_teacher(model.ssl_view(), lambda: build_teacher(model_cfg))
    center = torch.zeros(model_cfg.heads.n_prototypes)
    return TrainState(model, teacher, build_optimizer(model, train_cfg), center, 0, model_cfg, train_cfg)
