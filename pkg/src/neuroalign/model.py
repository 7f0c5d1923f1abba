"""Full alignment model: one encoder per modality feeding a shared
soft-routed mixture-of-experts projection into the image-embedding space,
plus a diffusion prior over the projected embeddings.

Retrieval-style evaluation consumes ``embed`` outputs directly; the prior is
reserved for generation-oriented refinement.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .data import ModalityKind, PairedDataset
from .encoder import EncoderConfig, EncoderOutput, SignalEncoder
from .errors import ConfigurationError, ValidationError
from .prior import DiffusionPrior, PriorConfig
from .projector import MoEConfig, MoEProjector


@dataclass
class EmbeddedSplit:
    """Projected embeddings for one modality slice of a dataset, row-aligned
    with the paired image embeddings and stimulus ids."""

    z: np.ndarray            # (n, F) unified embeddings
    targets: np.ndarray      # (n, F) paired image embeddings
    stimulus_ids: list[str]
    subjects: list[str]


class AlignmentModel(nn.Module):
    """Per-modality encoders + shared projector + diffusion prior."""

    def __init__(self, encoders: dict[str, SignalEncoder], projector: MoEProjector,
                 prior: DiffusionPrior):
        super().__init__()
        if not encoders:
            raise ConfigurationError("at least one modality encoder required")
        in_dim = projector.config.in_dim
        for name, enc in encoders.items():
            if enc.config.model_dim != in_dim:
                raise ConfigurationError(
                    f"encoder {name!r} emits dim {enc.config.model_dim}, "
                    f"projector expects {in_dim}"
                )
        out_dim = projector.config.out_dim
        if prior.dim != out_dim or prior.cond_dim != out_dim:
            raise ConfigurationError(
                f"prior dims ({prior.dim}, cond {prior.cond_dim}) must equal "
                f"projector out_dim {out_dim}"
            )
        self.encoders = nn.ModuleDict(encoders)
        self.projector = projector
        self.prior = prior

    @property
    def modality_names(self) -> list[str]:
        return list(self.encoders.keys())

    @property
    def embedding_dim(self) -> int:
        return self.projector.config.out_dim

    def encoder_for(self, modality: str) -> SignalEncoder:
        if modality not in self.encoders:
            raise ConfigurationError(f"no encoder for modality {modality!r}")
        return self.encoders[modality]

    def encode(self, signal: torch.Tensor, modality: str,
               subjects=None) -> EncoderOutput:
        return self.encoder_for(modality)(signal, subjects)

    def embed(self, signal: torch.Tensor, modality: str,
              subjects=None) -> torch.Tensor:
        """Unified embedding Z of shape (batch, F)."""
        return self.projector(self.encode(signal, modality, subjects).encoding)

    @torch.no_grad()
    def embed_samples(self, dataset: PairedDataset, modality: str,
                      split: str | None = None, batch_size: int = 256) -> EmbeddedSplit:
        """Embed every sample of one modality (optionally one split) in eval
        mode, returning numpy arrays row-aligned with the paired targets."""
        samples = dataset.samples_for(modality, split)
        if not samples:
            raise ValidationError(
                f"no samples for modality {modality!r}"
                + (f" in split {split!r}" if split else "")
            )
        encoder = self.encoder_for(modality)
        was_training = self.training
        self.eval()
        try:
            rows = []
            for start in range(0, len(samples), batch_size):
                chunk = samples[start:start + batch_size]
                signal = torch.from_numpy(
                    np.stack([s.signal for s in chunk]).astype(np.float32))
                subjects = ([s.subject_id for s in chunk]
                            if encoder.subject_embed is not None else None)
                rows.append(self.embed(signal, modality, subjects).numpy())
            z = np.concatenate(rows, axis=0)
        finally:
            self.train(was_training)
        targets = np.stack([dataset.embeddings[s.stimulus_id].vector for s in samples])
        return EmbeddedSplit(
            z=z.astype(np.float64),
            targets=targets.astype(np.float64),
            stimulus_ids=[s.stimulus_id for s in samples],
            subjects=[s.subject_id for s in samples],
        )

    # -- construction and serializable description ---------------------------

    @classmethod
    def from_dataset(cls, dataset: PairedDataset, model_dim: int = 64,
                     n_experts: int = 4, static_time: int = 8, seed: int = 0,
                     encoder_overrides: dict | None = None,
                     moe_overrides: dict | None = None,
                     prior_config: PriorConfig | None = None) -> "AlignmentModel":
        """Build a model matching the dataset's modalities and embedding dim,
        with parameter initialization deterministic in ``seed``."""
        f_dim = dataset.embedding_dim
        encoder_overrides = dict(encoder_overrides or {})
        encoder_overrides.setdefault("model_dim", model_dim)
        moe_kwargs = dict(moe_overrides or {})
        moe_kwargs.setdefault("n_experts", n_experts)
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            encoders = {}
            for kind in dataset.modalities:
                config = EncoderConfig.for_modality(kind, static_time=static_time,
                                                    **encoder_overrides)
                subject_ids = dataset.subjects_for(kind.name)
                encoders[kind.name] = SignalEncoder(kind, config, subject_ids)
            projector = MoEProjector(MoEConfig(
                in_dim=encoder_overrides["model_dim"], out_dim=f_dim, **moe_kwargs))
            prior = DiffusionPrior(f_dim, f_dim, prior_config or PriorConfig())
        return cls(encoders, projector, prior)

    def build_spec(self) -> dict:
        """JSON-serializable description sufficient to rebuild the module tree
        (architecture only; parameters travel separately)."""
        return {
            "modalities": {
                name: {
                    "kind": enc.modality.to_dict(),
                    "encoder": enc.config.to_dict(),
                    "subject_ids": list(enc.subject_index),
                }
                for name, enc in self.encoders.items()
            },
            "projector": self.projector.config.to_dict(),
            "prior": self.prior.config.to_dict(),
        }

    @classmethod
    def from_spec(cls, spec: dict, seed: int = 0) -> "AlignmentModel":
        try:
            with torch.random.fork_rng():
                torch.manual_seed(seed)
                encoders = {
                    name: SignalEncoder(
                        ModalityKind.from_dict(m["kind"]),
                        EncoderConfig.from_dict(m["encoder"]),
                        m["subject_ids"],
                    )
                    for name, m in spec["modalities"].items()
                }
                moe = MoEConfig.from_dict(spec["projector"])
                projector = MoEProjector(moe)
                prior = DiffusionPrior(moe.out_dim, moe.out_dim,
                                       PriorConfig.from_dict(spec["prior"]))
        except (KeyError, TypeError) as exc:
            raise ConfigurationError(f"malformed model spec: {exc}") from exc
        return cls(encoders, projector, prior)
