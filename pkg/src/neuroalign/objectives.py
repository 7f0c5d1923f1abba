"""Training losses: soft-target contrastive, MSE, compound, and the
low-level reconstruction loss with pluggable decoder and perceptual metric.

All losses are pure functions of tensors and differentiable end to end.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import torch
from torch import nn

from .errors import NormalizationError, ValidationError

Decoder = Callable[[torch.Tensor], torch.Tensor]
Perceptual = Callable[[torch.Tensor], torch.Tensor]


@dataclass
class LossConfig:
    """Weights of the compound objective.

    total = contrastive + alpha * MSE + beta * prior, with the contrastive
    slot optionally disabled (caption-style regression-only training, which
    avoids the interference seen when mixing contrastive and MSE terms).
    """

    tau: float = 0.07
    alpha: float = 0.0
    beta: float = 0.0
    lambda_p: float = 0.0
    include_contrastive: bool = True

    def __post_init__(self):
        if not (self.tau > 0 and torch.isfinite(torch.tensor(self.tau))):
            raise ValidationError("tau must be positive and finite")
        for name in ("alpha", "beta", "lambda_p"):
            v = getattr(self, name)
            if not (v >= 0 and torch.isfinite(torch.tensor(float(v)))):
                raise ValidationError(f"{name} must be finite and >= 0")

    @classmethod
    def retrieval(cls, tau: float = 0.07) -> "LossConfig":
        """Contrastive-only preset used for retrieval training."""
        return cls(tau=tau, alpha=0.0, beta=0.0)

    @classmethod
    def captioning(cls, alpha: float = 1.0) -> "LossConfig":
        """Regression-only preset (no contrastive term)."""
        return cls(alpha=alpha, include_contrastive=False)

    def to_dict(self) -> dict:
        return {"tau": self.tau, "alpha": self.alpha, "beta": self.beta,
                "lambda_p": self.lambda_p,
                "include_contrastive": self.include_contrastive}

    @classmethod
    def from_dict(cls, d: dict) -> "LossConfig":
        return cls(**d)


def _normalize_rows(x: torch.Tensor, what: str) -> torch.Tensor:
    norms = x.norm(dim=-1, keepdim=True)
    if (norms <= 1e-12).any():
        raise NormalizationError(f"{what} contains a zero-norm row")
    return x / norms


def softclip_loss(pred: torch.Tensor, target: torch.Tensor, tau: float = 0.07,
                  reduction: str = "sum") -> torch.Tensor:
    """Soft-target contrastive loss.

    Rows are L2-normalized internally.  The target distribution for row i is
    softmax_j(t_i . t_j / tau) and the loss is the summed cross-entropy
    against softmax_j(p_i . t_j / tau); log-softmax stabilizes via
    max-subtraction.  ``reduction="mean"`` divides by the batch size.
    """
    if pred.shape != target.shape or pred.ndim != 2:
        raise ValidationError(
            f"pred and target must be matching (N, F) matrices, got "
            f"{tuple(pred.shape)} vs {tuple(target.shape)}"
        )
    if tau <= 0:
        raise ValidationError("tau must be positive")
    p = _normalize_rows(pred, "pred")
    t = _normalize_rows(target, "target")
    target_logits = t @ t.T / tau
    pred_logits = p @ t.T / tau
    target_dist = torch.softmax(target_logits, dim=1)
    loss = -(target_dist * torch.log_softmax(pred_logits, dim=1)).sum()
    if reduction == "mean":
        return loss / pred.shape[0]
    if reduction == "sum":
        return loss
    raise ValidationError(f"unknown reduction {reduction!r}")


def mse_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean of squared elementwise differences."""
    if pred.shape != target.shape:
        raise ValidationError(
            f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}"
        )
    return ((pred - target) ** 2).mean()


def compound_loss(pred: torch.Tensor, target: torch.Tensor,
                  prior_term: torch.Tensor | float, config: LossConfig,
                  reduction: str = "sum"):
    """Weighted sum contrastive + alpha * MSE + beta * prior.

    Returns (total, breakdown) where breakdown holds the detached per-term
    values for logging.
    """
    zero = pred.new_zeros(())
    contrastive = (softclip_loss(pred, target, config.tau, reduction)
                   if config.include_contrastive else zero)
    mse = mse_loss(pred, target) if config.alpha != 0 else zero
    prior = torch.as_tensor(prior_term, dtype=pred.dtype, device=pred.device)
    total = contrastive + config.alpha * mse + config.beta * prior
    breakdown = {
        "contrastive": float(contrastive.detach()),
        "mse": float(mse.detach()),
        "prior": float(prior.detach()),
        "total": float(total.detach()),
    }
    return total, breakdown


def _mae(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise ValidationError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a - b).abs().mean()


def lowlevel_loss(f_hat: torch.Tensor, f: torch.Tensor, decoder: Decoder,
                  perceptual: Perceptual, lambda_p: float = 0.0) -> torch.Tensor:
    """Compound reconstruction loss on feature maps f, f_hat of shape (h,w,c):

    |D(f) - D(f_hat)| + |f - f_hat| + lambda_p * P(D(f_hat))

    with mean-absolute-error norms, a pluggable decoder D mapping feature
    maps to images, and a nonnegative perceptual score P of the decoded
    estimate.
    """
    if f_hat.shape != f.shape:
        raise ValidationError(
            f"feature maps must match: {tuple(f_hat.shape)} vs {tuple(f.shape)}"
        )
    dec_f = decoder(f)
    dec_f_hat = decoder(f_hat)
    if dec_f.shape != dec_f_hat.shape:
        raise ValidationError("decoder output shape mismatch between f and f_hat")
    loss = _mae(dec_f, dec_f_hat) + _mae(f, f_hat)
    if lambda_p != 0:
        loss = loss + lambda_p * perceptual(dec_f_hat)
    return loss


class ToyLinearDecoder(nn.Module):
    """Fixed random per-pixel channel mixing, (h, w, c) -> (h, w, out_channels).

    A deterministic stand-in for a real feature-map decoder in tests.
    """

    def __init__(self, in_channels: int, out_channels: int = 3, seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.register_buffer("mix", torch.randn(in_channels, out_channels, generator=gen))

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        if f.shape[-1] != self.mix.shape[0]:
            raise ValidationError(
                f"decoder expects {self.mix.shape[0]} channels, got {f.shape[-1]}"
            )
        return f @ self.mix.to(f.dtype)


class BlurDifferencePerceptual(nn.Module):
    """No-reference perceptual stand-in: mean |img - gaussian_blur(img)|.

    Penalizes high-frequency content; zero for constant images.
    """

    def __init__(self, kernel_size: int = 5, sigma: float = 1.0):
        super().__init__()
        if kernel_size % 2 == 0:
            raise ValidationError("kernel_size must be odd")
        half = kernel_size // 2
        coords = torch.arange(kernel_size, dtype=torch.float64) - half
        k1 = torch.exp(-(coords ** 2) / (2 * sigma ** 2))
        k1 = k1 / k1.sum()
        self.register_buffer("kernel", (k1[:, None] * k1[None, :]))
        self.pad = half

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        if img.ndim == 3:
            img = img.unsqueeze(0)
        if img.ndim != 4:
            raise ValidationError("expected (h, w, c) or (batch, h, w, c) image")
        x = img.permute(0, 3, 1, 2)  # (B, c, h, w)
        c = x.shape[1]
        k = self.kernel.to(x.dtype).expand(c, 1, -1, -1)
        # replicate padding keeps the sum-1 kernel exact at borders, so a
        # constant image scores exactly zero
        padded = torch.nn.functional.pad(x, (self.pad,) * 4, mode="replicate")
        blurred = torch.nn.functional.conv2d(padded, k, groups=c)
        return (x - blurred).abs().mean()
