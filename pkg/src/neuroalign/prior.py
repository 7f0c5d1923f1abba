"""Lightweight diffusion prior translating unified neural embeddings toward
the image-embedding distribution.

Noise-prediction parameterization with a small residual MLP denoiser
conditioned on the pooled neural embedding.  The prior refines embeddings
ahead of generation-oriented tasks; retrieval always evaluates raw projector
outputs and never calls the sampler.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .errors import ConfigurationError, NotFittedError, ValidationError

SCHEDULES = ("linear", "cosine")


@dataclass
class PriorConfig:
    steps: int = 50
    width: int = 128
    schedule: str = "cosine"
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigurationError("steps must be >= 1")
        if self.width < 1:
            raise ConfigurationError("width must be >= 1")
        if self.schedule not in SCHEDULES:
            raise ConfigurationError(f"schedule must be one of {SCHEDULES}")

    def to_dict(self) -> dict:
        return {"steps": self.steps, "width": self.width,
                "schedule": self.schedule, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "PriorConfig":
        return cls(**d)


def linear_beta_schedule(steps: int) -> torch.Tensor:
    return torch.linspace(1e-4, 0.02, steps, dtype=torch.float64)


def cosine_beta_schedule(steps: int, s: float = 0.008) -> torch.Tensor:
    # Squared-cosine cumulative signal level; betas recovered from the
    # ratio of consecutive cumulative products, clipped away from 1.
    grid = torch.arange(steps + 1, dtype=torch.float64) / steps
    f = torch.cos((grid + s) / (1 + s) * math.pi / 2) ** 2
    acp = f / f[0]
    betas = 1 - acp[1:] / acp[:-1]
    return betas.clamp(1e-8, 0.999)


def make_beta_schedule(config: PriorConfig) -> torch.Tensor:
    if config.schedule == "linear":
        return linear_beta_schedule(config.steps)
    return cosine_beta_schedule(config.steps)


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of integer timesteps, shape (B,) -> (B, dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, emb.new_zeros(emb.shape[0], 1)], dim=-1)
    return emb


class ConditionalDenoiser(nn.Module):
    """Residual MLP predicting the injected noise from (x_t, t, condition)."""

    T_EMBED_DIM = 16

    def __init__(self, dim: int, cond_dim: int, width: int):
        super().__init__()
        self.dim = dim
        self.cond_dim = cond_dim
        self.inp = nn.Linear(dim + self.T_EMBED_DIM + cond_dim, width)
        self.block1 = nn.Sequential(nn.Linear(width, width), nn.GELU(),
                                    nn.Linear(width, width))
        self.block2 = nn.Sequential(nn.Linear(width, width), nn.GELU(),
                                    nn.Linear(width, width))
        self.out = nn.Linear(width, dim)
        self.act = nn.GELU()

    def forward(self, x_t: torch.Tensor, t: torch.Tensor,
                cond: torch.Tensor) -> torch.Tensor:
        t_emb = timestep_embedding(t, self.T_EMBED_DIM).to(x_t.dtype)
        h = self.act(self.inp(torch.cat([x_t, t_emb, cond], dim=-1)))
        h = h + self.block1(h)
        h = h + self.block2(h)
        return self.out(h)


class DiffusionPrior(nn.Module):
    """Conditional denoising model over F-dimensional embeddings.

    ``loss`` trains noise prediction on corrupted targets; ``sample`` runs
    ancestral denoising from Gaussian initialization.  Sampling before any
    training is refused; the fitted flag lives in a buffer so it survives
    checkpoint round-trips.
    """

    def __init__(self, dim: int, cond_dim: int, config: PriorConfig | None = None,
                 denoiser: nn.Module | None = None):
        super().__init__()
        self.config = config or PriorConfig()
        self.dim = dim
        self.cond_dim = cond_dim
        betas = make_beta_schedule(self.config)
        alphas = 1.0 - betas
        self.register_buffer("betas", betas)
        self.register_buffer("alphas", alphas)
        self.register_buffer("alphas_cumprod", torch.cumprod(alphas, dim=0))
        self.register_buffer("_fitted", torch.tensor(False))
        self.denoiser = denoiser if denoiser is not None else ConditionalDenoiser(
            dim, cond_dim, self.config.width)

    @property
    def fitted(self) -> bool:
        return bool(self._fitted)

    def mark_fitted(self) -> None:
        self._fitted.fill_(True)

    def _check_batch(self, cond: torch.Tensor, target: torch.Tensor | None = None):
        if cond.ndim != 2 or cond.shape[1] != self.cond_dim:
            raise ValidationError(
                f"condition must be (N, {self.cond_dim}), got {tuple(cond.shape)}"
            )
        if target is not None:
            if target.ndim != 2 or target.shape[1] != self.dim:
                raise ValidationError(
                    f"target must be (N, {self.dim}), got {tuple(target.shape)}"
                )
            if target.shape[0] != cond.shape[0]:
                raise ValidationError("condition and target batch sizes differ")

    def loss(self, cond: torch.Tensor, target: torch.Tensor,
             generator: torch.Generator | None = None,
             timesteps: torch.Tensor | None = None,
             noise: torch.Tensor | None = None) -> torch.Tensor:
        """Noise-prediction MSE on a corrupted batch.

        Timesteps and noise are drawn from ``generator`` unless passed
        explicitly (explicit values make oracle tests possible).
        """
        self._check_batch(cond, target)
        n = target.shape[0]
        if timesteps is None:
            timesteps = torch.randint(0, self.config.steps, (n,), generator=generator)
        if noise is None:
            noise = torch.randn(target.shape, generator=generator, dtype=target.dtype)
        acp = self.alphas_cumprod[timesteps].unsqueeze(-1).to(target.dtype)
        x_t = acp.sqrt() * target + (1 - acp).sqrt() * noise
        predicted = self.denoiser(x_t, timesteps, cond)
        return ((predicted - noise) ** 2).mean()

    @torch.no_grad()
    def sample(self, cond: torch.Tensor, seed: int = 0) -> torch.Tensor:
        """Ancestral denoising conditioned on ``cond``; deterministic per seed.

        The final step adds no noise, so the output is a pure function of
        (parameters, cond, seed).
        """
        if not self.fitted:
            raise NotFittedError("diffusion prior sampled before training")
        self._check_batch(cond)
        gen = torch.Generator().manual_seed(seed)
        n = cond.shape[0]
        x = torch.randn((n, self.dim), generator=gen)
        for t in reversed(range(self.config.steps)):
            t_batch = torch.full((n,), t, dtype=torch.long)
            predicted = self.denoiser(x, t_batch, cond)
            alpha = self.alphas[t].to(x.dtype)
            acp = self.alphas_cumprod[t].to(x.dtype)
            beta = self.betas[t].to(x.dtype)
            mean = (x - beta / (1 - acp).sqrt() * predicted) / alpha.sqrt()
            if t > 0:
                x = mean + beta.sqrt() * torch.randn(x.shape, generator=gen)
            else:
                x = mean
        return x


def prior_loss(prior: DiffusionPrior, cond: torch.Tensor, target: torch.Tensor,
               generator: torch.Generator | None = None) -> torch.Tensor:
    return prior.loss(cond, target, generator=generator)


def sample_prior(prior: DiffusionPrior, cond: torch.Tensor, seed: int = 0) -> torch.Tensor:
    return prior.sample(cond, seed=seed)
