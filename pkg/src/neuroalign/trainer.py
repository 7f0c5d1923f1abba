"""Joint multi-modality training: round-robin batching across modalities,
joint or staged optimization, checkpointing, and line-delimited metric logs.

Determinism contract: given (model init seed, TrainConfig.seed), two runs
produce bitwise-identical metric logs and parameters on CPU.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import STAGES, Checkpoint, save_checkpoint
from .data import PairedDataset, concept_of
from .errors import ConfigurationError, NumericsError, StageOrderError, ValidationError
from .evalsuite import kway_retrieval
from .model import AlignmentModel
from .objectives import LossConfig, compound_loss, softclip_loss

METRICS_FILENAME = "metrics.jsonl"
CHECKPOINT_DIRNAME = "checkpoint"
NAN_DUMP_DIRNAME = "nan-dump"


@dataclass
class TrainConfig:
    """Optimization settings shared by joint and staged training.

    In staged mode ``epochs`` applies per stage.  ``modalities`` limits
    training to a subset (None trains every modality in the dataset).
    ``val_interval`` controls how often held-out 2-way retrieval is logged
    (0 disables); ``checkpoint_interval`` likewise for snapshots.
    """

    epochs: int = 50
    batch_size: int = 64
    learning_rate: float = 3e-4
    weight_decay: float = 0.01
    stage: str = "joint"
    modalities: list[str] | None = None
    seed: int = 0
    checkpoint_interval: int = 0
    val_interval: int = 1
    loss: LossConfig = field(default_factory=LossConfig.retrieval)

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ConfigurationError("batch_size must be >= 2 for contrastive batches")
        if not (self.learning_rate > 0):
            raise ConfigurationError("learning_rate must be positive")
        if self.weight_decay < 0:
            raise ConfigurationError("weight_decay must be >= 0")
        if self.stage not in ("joint", "staged"):
            raise ConfigurationError("stage must be 'joint' or 'staged'")
        if self.checkpoint_interval < 0 or self.val_interval < 0:
            raise ConfigurationError("intervals must be >= 0")
        if isinstance(self.loss, dict):
            self.loss = LossConfig.from_dict(self.loss)

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "weight_decay": self.weight_decay,
            "stage": self.stage,
            "modalities": self.modalities,
            "seed": self.seed,
            "checkpoint_interval": self.checkpoint_interval,
            "val_interval": self.val_interval,
            "loss": self.loss.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    metrics: list[dict]


class _BatchCycler:
    """Endless deterministic batch stream over one modality's samples.

    Each pass reshuffles with the shared generator; a tail batch of size 1
    is dropped (contrastive batches need at least two rows) and reappears
    after the next reshuffle.
    """

    def __init__(self, samples, batch_size: int, generator: torch.Generator):
        self.samples = samples
        self.batch_size = batch_size
        self.generator = generator
        self._queue: list[list[int]] = []

    @property
    def batches_per_pass(self) -> int:
        return max(1, -(-len(self.samples) // self.batch_size))

    def next_batch(self):
        if not self._queue:
            order = torch.randperm(len(self.samples), generator=self.generator).tolist()
            self._queue = [order[i:i + self.batch_size]
                           for i in range(0, len(order), self.batch_size)]
            if len(self._queue[-1]) < 2:
                self._queue.pop()
        idx = self._queue.pop(0)
        return [self.samples[i] for i in idx]


def _check_zero_shot(dataset: PairedDataset):
    train_concepts = {concept_of(s) for s in dataset.stimuli("train")}
    test_concepts = {concept_of(s) for s in dataset.stimuli("test")}
    overlap = train_concepts & test_concepts
    if overlap:
        raise ValidationError(
            f"split is not zero-shot: concepts {sorted(overlap)[:4]} appear in "
            f"both train and test"
        )


def _active_modalities(dataset: PairedDataset, config: TrainConfig) -> list[str]:
    names = config.modalities or dataset.modality_names()
    for name in names:
        if name not in dataset.modality_names():
            raise ConfigurationError(f"unknown modality {name!r}")
        if not dataset.samples_for(name, "train"):
            raise ConfigurationError(f"modality {name!r} has no training samples")
    return list(names)


def _batch_tensors(batch, dataset: PairedDataset, encoder):
    signal = torch.from_numpy(np.stack([s.signal for s in batch]).astype(np.float32))
    targets = torch.from_numpy(np.stack(
        [dataset.embeddings[s.stimulus_id].vector for s in batch]).astype(np.float32))
    subjects = ([s.subject_id for s in batch]
                if encoder.subject_embed is not None else None)
    return signal, targets, subjects


def _val_metrics(model: AlignmentModel, dataset: PairedDataset, modality: str,
                 seed: int) -> dict | None:
    if not dataset.samples_for(modality, "test"):
        return None
    emb = model.embed_samples(dataset, modality, split="test")
    stimuli = sorted(set(emb.stimulus_ids))
    index = {stim: k for k, stim in enumerate(stimuli)}
    candidates = np.stack([dataset.embeddings[s].vector for s in stimuli])
    true_idx = np.array([index[s] for s in emb.stimulus_ids])
    acc = kway_retrieval(emb.z, candidates, true_idx, ways=2, top=1,
                         trials=10, seed=seed)
    return {"two_way_top1": acc}


def _dump_diagnostics(model, out_dir, record) -> str:
    if out_dir is None:
        return "no output directory; diagnostics not persisted"
    dump = Path(out_dir) / NAN_DUMP_DIRNAME
    save_checkpoint(model, dump)
    (dump / "failure.json").write_text(json.dumps(record, indent=1, sort_keys=True) + "\n")
    return str(dump)


def _run_phase(dataset: PairedDataset, model: AlignmentModel, config: TrainConfig,
               *, stage_name: str, parameters, loss_fn, generator: torch.Generator,
               out_dir: Path | None, metrics: list[dict], start_epoch: int = 0,
               stages_completed=()) -> int:
    """Shared epoch loop.  ``loss_fn(modality, batch)`` returns a scalar loss
    and its logging breakdown; only ``parameters`` are optimized."""
    modalities = _active_modalities(dataset, config)
    optimizer = torch.optim.AdamW(parameters, lr=config.learning_rate,
                                  weight_decay=config.weight_decay)
    cyclers = {m: _BatchCycler(dataset.samples_for(m, "train"), config.batch_size,
                               generator) for m in modalities}
    cycles = max(c.batches_per_pass for c in cyclers.values())
    log_path = Path(out_dir) / METRICS_FILENAME if out_dir is not None else None

    epoch = start_epoch
    for epoch in range(start_epoch + 1, config.epochs + 1):
        sums = {m: {} for m in modalities}
        for _ in range(cycles):
            for name in modalities:
                batch = cyclers[name].next_batch()
                total, breakdown = loss_fn(name, batch)
                if not torch.isfinite(total):
                    record = {"epoch": epoch, "modality": name, "stage": stage_name,
                              "loss": breakdown,
                              "stimuli": [s.stimulus_id for s in batch]}
                    where = _dump_diagnostics(model, out_dir, record)
                    raise NumericsError(
                        f"non-finite loss at epoch {epoch}, modality {name!r} "
                        f"({stage_name}); diagnostics: {where}"
                    )
                optimizer.zero_grad()
                total.backward()
                optimizer.step()
                for key, value in breakdown.items():
                    sums[name][key] = sums[name].get(key, 0.0) + value
        for name in modalities:
            record = {
                "epoch": epoch,
                "stage": stage_name,
                "modality": name,
                "batches": cycles,
                "loss": {k: v / cycles for k, v in sums[name].items()},
                "val": (_val_metrics(model, dataset, name, seed=config.seed)
                        if config.val_interval and epoch % config.val_interval == 0
                        else None),
            }
            metrics.append(record)
            if log_path is not None:
                with log_path.open("a") as fh:
                    fh.write(json.dumps(record, sort_keys=True) + "\n")
        if (out_dir is not None and config.checkpoint_interval
                and epoch % config.checkpoint_interval == 0):
            save_checkpoint(model, Path(out_dir) / CHECKPOINT_DIRNAME, epoch=epoch,
                            stages_completed=stages_completed,
                            train_config=config.to_dict(),
                            rng_state=generator.get_state())
    return epoch


def train(dataset: PairedDataset, model: AlignmentModel, config: TrainConfig,
          out_dir: str | Path | None = None, start_epoch: int = 0,
          rng_state: torch.Tensor | None = None) -> TrainResult:
    """Train per config; dispatches to staged_train when stage == 'staged'.

    Joint mode optimizes the full compound objective on every batch of every
    modality, one batch per modality per cycle.  Resuming continues the epoch
    counter and, when ``rng_state`` is given, the batch-order stream.
    """
    if config.stage == "staged":
        return staged_train(dataset, model, config, out_dir=out_dir)
    _check_zero_shot(dataset)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    generator = torch.Generator()
    generator.manual_seed(config.seed)
    if rng_state is not None:
        generator.set_state(rng_state)

    use_prior = config.loss.beta > 0

    def loss_fn(name: str, batch):
        encoder = model.encoder_for(name)
        signal, targets, subjects = _batch_tensors(batch, dataset, encoder)
        z = model.embed(signal, name, subjects)
        prior_term = (model.prior.loss(z, targets, generator=generator)
                      if use_prior else 0.0)
        return compound_loss(z, targets, prior_term, config.loss, reduction="mean")

    metrics: list[dict] = []
    out = Path(out_dir) if out_dir is not None else None
    final_epoch = _run_phase(dataset, model, config, stage_name="joint",
                             parameters=list(model.parameters()), loss_fn=loss_fn,
                             generator=generator, out_dir=out, metrics=metrics,
                             start_epoch=start_epoch)
    if use_prior:
        model.prior.mark_fitted()
    ckpt = Checkpoint(model=model, epoch=final_epoch, stages_completed=[],
                      train_config=config.to_dict(), rng_state=generator.get_state())
    if out is not None:
        save_checkpoint(model, out / CHECKPOINT_DIRNAME, epoch=final_epoch,
                        stages_completed=[], train_config=config.to_dict(),
                        rng_state=generator.get_state())
    return TrainResult(ckpt, metrics)


def staged_train(dataset: PairedDataset, model: AlignmentModel, config: TrainConfig,
                 out_dir: str | Path | None = None, stages=STAGES,
                 already_completed=()) -> TrainResult:
    """Progressive training: (1) encoders, contrastive against image
    embeddings; (2) encoders frozen, projector trained; (3) backbones frozen,
    prior trained.  Stages must run in order; ``already_completed`` lets a
    resumed checkpoint continue mid-sequence.

    Stage 1 contrasts raw encoder outputs with the F-dimensional image
    embeddings, so it requires model_dim == embedding_dim.
    """
    _check_zero_shot(dataset)
    completed = list(already_completed)
    for name in completed:
        if name not in STAGES:
            raise StageOrderError(f"unknown stage {name!r}")
    stages = list(stages)
    for name in stages:
        if name not in STAGES:
            raise StageOrderError(f"unknown stage {name!r}")
    expected = list(STAGES[len(completed):len(completed) + len(stages)])
    if stages != expected:
        raise StageOrderError(
            f"stages {stages} cannot follow completed {completed}; expected {expected}"
        )
    if "encoders" in stages:
        in_dim = model.projector.config.in_dim
        if in_dim != model.embedding_dim:
            raise ConfigurationError(
                f"stage 1 contrasts encoder outputs (dim {in_dim}) with image "
                f"embeddings (dim {model.embedding_dim}); dims must match"
            )
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    out = Path(out_dir) if out_dir is not None else None
    generator = torch.Generator()
    generator.manual_seed(config.seed)
    metrics: list[dict] = []
    final_epoch = 0

    def encoder_loss(name: str, batch):
        encoder = model.encoder_for(name)
        signal, targets, subjects = _batch_tensors(batch, dataset, encoder)
        y = encoder(signal, subjects).encoding
        loss = softclip_loss(y, targets, config.loss.tau, reduction="mean")
        return loss, {"contrastive": float(loss.detach()), "total": float(loss.detach())}

    def projector_loss(name: str, batch):
        encoder = model.encoder_for(name)
        signal, targets, subjects = _batch_tensors(batch, dataset, encoder)
        with torch.no_grad():
            y = encoder(signal, subjects).encoding
        z = model.projector(y)
        return compound_loss(z, targets, 0.0, config.loss, reduction="mean")

    def head_loss(name: str, batch):
        encoder = model.encoder_for(name)
        signal, targets, subjects = _batch_tensors(batch, dataset, encoder)
        with torch.no_grad():
            z = model.embed(signal, name, subjects)
        loss = model.prior.loss(z, targets, generator=generator)
        return loss, {"prior": float(loss.detach()), "total": float(loss.detach())}

    phases = {
        "encoders": (encoder_loss, lambda: list(model.encoders.parameters())),
        "projector": (projector_loss, lambda: list(model.projector.parameters())),
        "heads": (head_loss, lambda: list(model.prior.parameters())),
    }
    for stage_name in stages:
        loss_fn, param_fn = phases[stage_name]
        for p in model.parameters():
            p.requires_grad_(False)
        params = param_fn()
        for p in params:
            p.requires_grad_(True)
        final_epoch = _run_phase(dataset, model, config, stage_name=stage_name,
                                 parameters=params, loss_fn=loss_fn,
                                 generator=generator, out_dir=out, metrics=metrics,
                                 stages_completed=completed)
        completed.append(stage_name)
        if stage_name == "heads":
            model.prior.mark_fitted()
    for p in model.parameters():
        p.requires_grad_(True)

    ckpt = Checkpoint(model=model, epoch=final_epoch, stages_completed=completed,
                      train_config=config.to_dict(), rng_state=generator.get_state())
    if out is not None:
        save_checkpoint(model, out / CHECKPOINT_DIRNAME, epoch=final_epoch,
                        stages_completed=completed, train_config=config.to_dict(),
                        rng_state=generator.get_state())
    return TrainResult(ckpt, metrics)


def fit_prior(prior, cond: torch.Tensor, target: torch.Tensor, epochs: int = 100,
              batch_size: int = 64, learning_rate: float = 1e-3,
              seed: int = 0) -> list[float]:
    """Train a diffusion prior on fixed (condition, target) pairs.

    Standalone helper for head-only fitting on precomputed embeddings;
    marks the prior fitted and returns the per-epoch mean loss history.
    """
    if cond.shape[0] != target.shape[0]:
        raise ValidationError("condition and target batch sizes differ")
    generator = torch.Generator().manual_seed(seed)
    optimizer = torch.optim.AdamW(prior.parameters(), lr=learning_rate)
    history = []
    n = cond.shape[0]
    for _ in range(epochs):
        order = torch.randperm(n, generator=generator)
        total, batches = 0.0, 0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            loss = prior.loss(cond[idx], target[idx], generator=generator)
            if not torch.isfinite(loss):
                raise NumericsError("non-finite prior loss")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += float(loss.detach())
            batches += 1
        history.append(total / batches)
    prior.mark_fitted()
    return history
