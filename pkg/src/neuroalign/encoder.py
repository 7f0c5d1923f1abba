"""Multi-granularity signal encoder.

Pipeline per sample: channel harmonization -> multi-granularity time patching
(patch lengths 2^1 .. 2^n) -> per-granularity token embedding with a shared
positional table, granularity embeddings and one router token per scale ->
intra-granularity self-attention (no cross-scale mixing) -> inter-granularity
router attention (cross-scale exchange) -> temporal-spatial convolution ->
MLP head producing one model_dim-wide encoding per sample.

Static modalities (no time axis) enter through a learned adapter that lays
the feature vector out on a small pseudo-time grid, after which the shared
pipeline applies unchanged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import torch
from torch import nn

from .data import ModalityKind, NeuralSample
from .errors import ConfigurationError, ValidationError

INTER_MODES = ("cross_attention", "scalar_gate")


@dataclass
class EncoderConfig:
    """Shape and architecture knobs of one modality encoder.

    ``time_len`` is the temporal length the pipeline operates on: the native
    signal length for time-resolved modalities, the pseudo-time grid size for
    static ones.
    """

    n_granularities: int = 3
    model_dim: int = 64
    in_channels: int = 8
    time_len: int = 64
    n_heads: int = 4
    temporal_kernel: int = 5
    conv_tokens: int = 8
    mlp_hidden: int = 128
    subject_embedding: bool = False
    pad_value: float = 0.0
    inter_mode: str = "cross_attention"

    def __post_init__(self):
        if self.n_granularities < 1:
            raise ConfigurationError("n_granularities must be >= 1")
        if self.time_len < 2:
            raise ConfigurationError("time_len must be >= 2")
        if 2 ** self.n_granularities > self.time_len:
            raise ConfigurationError(
                f"2^n = {2 ** self.n_granularities} exceeds time_len {self.time_len}"
            )
        if self.model_dim % self.n_heads != 0:
            raise ConfigurationError("model_dim must be divisible by n_heads")
        if self.temporal_kernel < 1 or self.temporal_kernel % 2 == 0:
            raise ConfigurationError("temporal_kernel must be odd and >= 1")
        if self.in_channels < 1 or self.conv_tokens < 1 or self.mlp_hidden < 1:
            raise ConfigurationError("in_channels, conv_tokens, mlp_hidden must be >= 1")
        if self.inter_mode not in INTER_MODES:
            raise ConfigurationError(f"inter_mode must be one of {INTER_MODES}")

    def patch_len(self, i: int) -> int:
        """Patch length of granularity i (1-based)."""
        return 2 ** i

    def token_counts(self) -> list[int]:
        """N_i = ceil(time_len / 2^i) for i = 1..n."""
        return [math.ceil(self.time_len / 2 ** i)
                for i in range(1, self.n_granularities + 1)]

    @property
    def total_tokens(self) -> int:
        return sum(self.token_counts())

    @classmethod
    def for_modality(cls, modality: ModalityKind, static_time: int = 8,
                     **overrides) -> "EncoderConfig":
        """Derive a config whose time_len matches the modality."""
        time_len = modality.time_len if modality.temporal else static_time
        return cls(time_len=time_len, **overrides)

    def to_dict(self) -> dict:
        return {
            "n_granularities": self.n_granularities,
            "model_dim": self.model_dim,
            "in_channels": self.in_channels,
            "time_len": self.time_len,
            "n_heads": self.n_heads,
            "temporal_kernel": self.temporal_kernel,
            "conv_tokens": self.conv_tokens,
            "mlp_hidden": self.mlp_hidden,
            "subject_embedding": self.subject_embedding,
            "pad_value": self.pad_value,
            "inter_mode": self.inter_mode,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**d)


@dataclass
class GranularityTokens:
    """Per-scale token stacks plus (after embedding) one router per scale.

    ``tokens[i]`` has shape (batch, N_i, width); pre-projection patches have
    width 2^(i+1) * C, embedded tokens have width model_dim.  ``routers`` is
    None for raw patches and a list of (batch, model_dim) tensors afterwards.
    """

    tokens: list[torch.Tensor]
    routers: list[torch.Tensor] | None = None

    @property
    def n_granularities(self) -> int:
        return len(self.tokens)

    def token_counts(self) -> list[int]:
        return [t.shape[-2] for t in self.tokens]

    def validate(self):
        counts = self.token_counts()
        if any(b >= a for a, b in zip(counts, counts[1:])):
            raise ValidationError(f"token counts must strictly decrease, got {counts}")
        if self.routers is not None and len(self.routers) != len(self.tokens):
            raise ValidationError("router missing for some granularity")


@dataclass
class EncoderOutput:
    """Final encoding plus optional intermediates for inspection and tests."""

    encoding: torch.Tensor                 # (batch, model_dim)
    intermediates: dict = field(default_factory=dict)


def patch_multi_granularity(signal: torch.Tensor, config: EncoderConfig) -> GranularityTokens:
    """Cut a (batch, C, T) signal into patches at every granularity.

    Granularity i uses patch length 2^i; the tail patch is padded with
    ``config.pad_value`` up to N_i * 2^i.  Each patch is flattened
    channel-major: (C, 2^i) -> C * 2^i values.
    """
    if signal.ndim == 2:
        signal = signal.unsqueeze(0)
    if signal.ndim != 3:
        raise ValidationError(f"expected (batch, C, T) signal, got shape {tuple(signal.shape)}")
    B, C, T = signal.shape
    if T < 2:
        raise ValidationError("time-resolved input needs T >= 2")
    if T != config.time_len or C != config.in_channels:
        raise ConfigurationError(
            f"signal shape (C={C}, T={T}) does not match config "
            f"(C={config.in_channels}, T={config.time_len})"
        )
    out = []
    for i in range(1, config.n_granularities + 1):
        plen = config.patch_len(i)
        n_i = math.ceil(T / plen)
        pad = n_i * plen - T
        x = signal
        if pad:
            x = torch.nn.functional.pad(x, (0, pad), value=config.pad_value)
        # (B, C, n_i, plen) -> (B, n_i, C, plen) -> (B, n_i, C * plen)
        x = x.reshape(B, C, n_i, plen).permute(0, 2, 1, 3).reshape(B, n_i, C * plen)
        out.append(x)
    tokens = GranularityTokens(out)
    tokens.validate()
    return tokens


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention with learned q/k/v/out projections.

    Returns both the output tokens and the (batch, heads, Lq, Lk) attention
    weights; every weight row is a probability distribution over keys.
    """

    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        if dim % n_heads != 0:
            raise ConfigurationError("dim must be divisible by n_heads")
        self.dim = dim
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def forward(self, query: torch.Tensor, keys: torch.Tensor):
        B, Lq, _ = query.shape
        Lk = keys.shape[1]
        h, hd = self.n_heads, self.head_dim
        q = self.q_proj(query).view(B, Lq, h, hd).transpose(1, 2)
        k = self.k_proj(keys).view(B, Lk, h, hd).transpose(1, 2)
        v = self.v_proj(keys).view(B, Lk, h, hd).transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / math.sqrt(hd)
        weights = torch.softmax(scores, dim=-1)
        out = (weights @ v).transpose(1, 2).reshape(B, Lq, self.dim)
        return self.out_proj(out), weights


class SelfAttentionBlock(nn.Module):
    """Pre-norm multi-head self-attention with a residual connection."""

    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, n_heads)

    def forward(self, x: torch.Tensor):
        normed = self.norm(x)
        out, weights = self.attn(normed, normed)
        return x + out, weights


class SignalEncoder(nn.Module):
    """Encoder for one modality; inference is pure given frozen parameters."""

    def __init__(self, modality: ModalityKind, config: EncoderConfig,
                 subject_ids: Sequence[str] = ()):
        super().__init__()
        if modality.temporal and modality.time_len != config.time_len:
            raise ConfigurationError(
                f"modality {modality.name!r} has T={modality.time_len} but "
                f"config.time_len={config.time_len}"
            )
        self.modality = modality
        self.config = config
        D = config.model_dim
        C = config.in_channels
        T = config.time_len

        if modality.temporal:
            self.input_adapter = nn.Linear(modality.channels, C)
        else:
            self.input_adapter = nn.Linear(modality.channels, C * T)

        self.patch_proj = nn.ModuleList(
            nn.Linear(config.patch_len(i) * C, D)
            for i in range(1, config.n_granularities + 1)
        )
        n_pos = config.token_counts()[0] + 1  # largest N_i plus one router row
        self.pos_table = nn.Parameter(torch.empty(n_pos, D))
        self.gran_embed = nn.Parameter(torch.empty(config.n_granularities, D))
        nn.init.trunc_normal_(self.pos_table, std=0.02)
        nn.init.trunc_normal_(self.gran_embed, std=0.02)

        self.subject_index = {sid: k for k, sid in enumerate(subject_ids)}
        if config.subject_embedding:
            if not self.subject_index:
                raise ConfigurationError(
                    "subject_embedding enabled but no subject_ids registered"
                )
            self.subject_embed = nn.Embedding(len(self.subject_index), D)
            nn.init.trunc_normal_(self.subject_embed.weight, std=0.02)
        else:
            self.subject_embed = None

        self.intra_block = SelfAttentionBlock(D, config.n_heads)

        S = config.total_tokens
        self.temporal_conv = nn.Conv1d(D, D, config.temporal_kernel,
                                       padding=config.temporal_kernel // 2)
        self.spatial_conv = nn.Conv1d(S, config.conv_tokens, kernel_size=1)
        self.act = nn.GELU()
        self.head = nn.Sequential(
            nn.Linear(config.conv_tokens * D, config.mlp_hidden),
            nn.GELU(),
            nn.Linear(config.mlp_hidden, D),
        )

    # -- pipeline stages ----------------------------------------------------

    def adapt_input(self, signal: torch.Tensor) -> torch.Tensor:
        """Map native channels onto the harmonized (C_in, time_len) grid."""
        if self.modality.temporal:
            if signal.ndim == 2:
                signal = signal.unsqueeze(0)
            if signal.shape[1:] != (self.modality.channels, self.modality.time_len):
                raise ConfigurationError(
                    f"signal shape {tuple(signal.shape[1:])} does not match "
                    f"modality {self.modality.name!r}"
                )
            return self.input_adapter(signal.transpose(1, 2)).transpose(1, 2)
        if signal.ndim == 1:
            signal = signal.unsqueeze(0)
        if signal.shape[1:] != (self.modality.channels,):
            raise ConfigurationError(
                f"signal shape {tuple(signal.shape[1:])} does not match "
                f"static modality {self.modality.name!r}"
            )
        grid = self.input_adapter(signal)
        return grid.view(-1, self.config.in_channels, self.config.time_len)

    def embed_tokens(self, patches: GranularityTokens) -> GranularityTokens:
        """Project patches to model_dim, add positions, granularity and router
        embeddings: tokens_i = proj_i(patch_i) + pos[:N_i] + gr_i, and the
        router of scale i is pos[N_i] + gr_i."""
        counts = patches.token_counts()
        if max(counts) + 1 > self.pos_table.shape[0]:
            raise ConfigurationError(
                f"positional table has {self.pos_table.shape[0]} rows; "
                f"needs {max(counts) + 1}"
            )
        tokens, routers = [], []
        for i, (patch, n_i) in enumerate(zip(patches.tokens, counts)):
            B = patch.shape[0]
            x = self.patch_proj[i](patch) + self.pos_table[:n_i] + self.gran_embed[i]
            u = (self.pos_table[n_i] + self.gran_embed[i]).expand(B, -1)
            tokens.append(x)
            routers.append(u)
        out = GranularityTokens(tokens, routers)
        out.validate()
        return out

    def intra_attention(self, tokens: GranularityTokens):
        """Self-attention within each scale over [tokens_i ; router_i].

        Scales never mix here: the shared block is applied to each scale's
        own sequence independently.
        """
        if tokens.routers is None:
            raise ValidationError("intra attention needs embedded tokens with routers")
        new_tokens, new_routers, weights = [], [], []
        for x, u in zip(tokens.tokens, tokens.routers):
            z = torch.cat([x, u.unsqueeze(1)], dim=1)
            z, w = self.intra_block(z)
            new_tokens.append(z[:, :-1])
            new_routers.append(z[:, -1])
            weights.append(w)
        return GranularityTokens(new_tokens, new_routers), weights

    def inter_attention(self, tokens: GranularityTokens):
        """Cross-scale exchange driven by the routers.

        cross_attention mode: routers are queries over each scale's tokens;
        the mean attention a router stack places on token j (rescaled by N_i
        so uniform attention is the identity) reweights that token.
        scalar_gate mode: each token is gated by a sigmoid of its dot product
        with the summed routers.
        """
        if tokens.routers is None:
            raise ValidationError("inter attention needs embedded tokens with routers")
        D = self.config.model_dim
        U = torch.stack(tokens.routers, dim=1)  # (B, n, D)
        new_tokens, weights = [], []
        for x in tokens.tokens:
            n_i = x.shape[1]
            if self.config.inter_mode == "cross_attention":
                scores = U @ x.transpose(1, 2) / math.sqrt(D)   # (B, n, N_i)
                attn = torch.softmax(scores, dim=-1)
                gate = n_i * attn.mean(dim=1)                   # (B, N_i)
            else:
                u_sum = U.sum(dim=1)                            # (B, D)
                scores = (x @ u_sum.unsqueeze(-1)).squeeze(-1) / math.sqrt(D)
                attn = torch.sigmoid(scores).unsqueeze(1)       # (B, 1, N_i)
                gate = attn.squeeze(1)
            new_tokens.append(gate.unsqueeze(-1) * x)
            weights.append(attn)
        h_attn = torch.cat(new_tokens, dim=1)  # (B, sum N_i, D)
        return h_attn, weights

    def temporal_spatial_conv(self, h_attn: torch.Tensor) -> torch.Tensor:
        """1-D convolution along the token axis, then across tokens."""
        h = self.act(self.temporal_conv(h_attn.transpose(1, 2))).transpose(1, 2)
        return self.act(self.spatial_conv(h))

    # -- full pipeline ------------------------------------------------------

    def forward(self, signal: torch.Tensor, subjects: Sequence[str] | None = None,
                return_intermediates: bool = False) -> EncoderOutput:
        grid = self.adapt_input(signal)
        patches = patch_multi_granularity(grid, self.config)
        tokens = self.embed_tokens(patches)

        if self.subject_embed is not None:
            if subjects is None:
                raise ConfigurationError("subject_embedding enabled: subjects required")
            try:
                idx = torch.tensor([self.subject_index[s] for s in subjects],
                                   device=grid.device)
            except KeyError as exc:
                raise ConfigurationError(f"unknown subject {exc.args[0]!r}") from exc
            vec = self.subject_embed(idx).to(grid.dtype)  # (B, D)
            tokens = GranularityTokens(
                [x + vec.unsqueeze(1) for x in tokens.tokens], tokens.routers
            )

        tokens, intra_w = self.intra_attention(tokens)
        h_attn, inter_w = self.inter_attention(tokens)
        h_conv = self.temporal_spatial_conv(h_attn)
        encoding = self.head(h_conv.flatten(1))

        intermediates = {}
        if return_intermediates:
            intermediates = {
                "patches": patches,
                "tokens": tokens,
                "intra_attention": intra_w,
                "inter_attention": inter_w,
                "h_attn": h_attn,
                "h_conv": h_conv,
            }
        return EncoderOutput(encoding, intermediates)

    @torch.no_grad()
    def encode_sample(self, sample: NeuralSample) -> EncoderOutput:
        """Encode one NeuralSample in inference mode."""
        if sample.modality.name != self.modality.name:
            raise ConfigurationError(
                f"encoder built for {self.modality.name!r}, got sample of "
                f"{sample.modality.name!r}"
            )
        was_training = self.training
        self.eval()
        try:
            p = next(self.parameters())
            signal = torch.as_tensor(sample.signal, dtype=p.dtype, device=p.device)
            out = self.forward(signal, subjects=[sample.subject_id]
                               if self.subject_embed is not None else None)
        finally:
            self.train(was_training)
        return EncoderOutput(out.encoding.squeeze(0), out.intermediates)
