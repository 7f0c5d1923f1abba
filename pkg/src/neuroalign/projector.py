"""Soft mixture-of-experts projection into the shared embedding space.

Every expert is a two-layer MLP from the encoder token width to the target
embedding dimension; a small router network scores each token per expert and
the outputs are combined as a convex combination.  All experts are always
evaluated (no top-k sparsification).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .errors import ConfigurationError, NumericsError, ValidationError

ROUTING_MODES = ("softmax", "sigmoid_norm")


@dataclass
class MoEConfig:
    """Expert count, dimensions, and routing normalization.

    ``routing="softmax"`` applies one softmax to the raw router logits;
    ``"sigmoid_norm"`` is the alternative reading that squashes logits with a
    sigmoid and renormalizes to sum one.
    """

    n_experts: int = 4
    in_dim: int = 64
    out_dim: int = 32
    hidden: int | None = None
    router_hidden: int = 32
    routing: str = "softmax"

    def __post_init__(self):
        if self.n_experts < 1:
            raise ConfigurationError("n_experts must be >= 1")
        if self.out_dim < 2:
            raise ConfigurationError("out_dim must be >= 2")
        if self.in_dim < 1 or self.router_hidden < 1:
            raise ConfigurationError("in_dim and router_hidden must be >= 1")
        if self.hidden is None:
            self.hidden = 4 * self.out_dim
        if self.hidden < 1:
            raise ConfigurationError("hidden must be >= 1")
        if self.routing not in ROUTING_MODES:
            raise ConfigurationError(f"routing must be one of {ROUTING_MODES}")

    def to_dict(self) -> dict:
        return {
            "n_experts": self.n_experts,
            "in_dim": self.in_dim,
            "out_dim": self.out_dim,
            "hidden": self.hidden,
            "router_hidden": self.router_hidden,
            "routing": self.routing,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MoEConfig":
        return cls(**d)


@dataclass
class RoutingWeights:
    """Per-token expert weights; every row lies on the probability simplex."""

    weights: torch.Tensor  # (tokens, n_experts)

    def validate(self, tol: float = 1e-6):
        w = self.weights
        if (w < 0).any():
            raise ValidationError("routing weights must be nonnegative")
        sums = w.sum(dim=-1)
        if (sums - 1.0).abs().max().item() > tol:
            raise ValidationError("routing rows must sum to 1")


class MoEProjector(nn.Module):
    """Mixture of expert MLPs with a fully soft router."""

    def __init__(self, config: MoEConfig):
        super().__init__()
        self.config = config
        self.router_net = nn.Sequential(
            nn.Linear(config.in_dim, config.router_hidden),
            nn.GELU(),
            nn.Linear(config.router_hidden, config.n_experts),
        )
        self.experts = nn.ModuleList(
            nn.Sequential(
                nn.Linear(config.in_dim, config.hidden),
                nn.GELU(),
                nn.Linear(config.hidden, config.out_dim),
            )
            for _ in range(config.n_experts)
        )

    def _check_tokens(self, tokens: torch.Tensor) -> torch.Tensor:
        if tokens.ndim == 1:
            tokens = tokens.unsqueeze(0)
        if tokens.ndim != 2 or tokens.shape[-1] != self.config.in_dim:
            raise ConfigurationError(
                f"expected tokens of width {self.config.in_dim}, "
                f"got shape {tuple(tokens.shape)}"
            )
        return tokens

    def route(self, tokens: torch.Tensor) -> RoutingWeights:
        """Score each token per expert and normalize onto the simplex."""
        tokens = self._check_tokens(tokens)
        logits = self.router_net(tokens)
        if not torch.isfinite(logits).all():
            raise NumericsError("router produced non-finite scores")
        if self.config.routing == "softmax":
            weights = torch.softmax(logits, dim=-1)
        else:
            squashed = torch.sigmoid(logits)
            weights = squashed / squashed.sum(dim=-1, keepdim=True)
        return RoutingWeights(weights)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        """Project tokens: weighted sum of all experts' outputs, (N, out_dim)."""
        tokens = self._check_tokens(tokens)
        weights = self.route(tokens).weights                     # (N, K)
        expert_out = torch.stack([e(tokens) for e in self.experts], dim=1)  # (N, K, F)
        return (weights.unsqueeze(-1) * expert_out).sum(dim=1)

    project = forward
