"""Checkpoint persistence: parameters in an npz archive next to a JSON
sidecar holding the architecture description, training progress, and RNG
state, so a load reproduces evaluation metrics exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import FormatError, IntegrityError
from .model import AlignmentModel

CHECKPOINT_VERSION = 1
PARAMS_FILENAME = "params.npz"
SIDECAR_FILENAME = "checkpoint.json"
RNG_KEY = "__rng_torch__"

STAGES = ("encoders", "projector", "heads")


@dataclass
class Checkpoint:
    """A rebuilt model plus the training progress stored beside it."""

    model: AlignmentModel
    epoch: int = 0
    stages_completed: list[str] = field(default_factory=list)
    train_config: dict | None = None
    rng_state: torch.Tensor | None = None


def save_checkpoint(model: AlignmentModel, out_dir: str | Path, epoch: int = 0,
                    stages_completed=(), train_config: dict | None = None,
                    rng_state: torch.Tensor | None = None) -> Path:
    """Write params.npz + checkpoint.json into ``out_dir`` and return it."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    arrays = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    if rng_state is not None:
        arrays[RNG_KEY] = rng_state.cpu().numpy().astype(np.uint8)
    np.savez(out / PARAMS_FILENAME, **arrays)
    sidecar = {
        "version": CHECKPOINT_VERSION,
        "model": model.build_spec(),
        "epoch": int(epoch),
        "stages_completed": list(stages_completed),
        "train_config": train_config,
    }
    (out / SIDECAR_FILENAME).write_text(
        json.dumps(sidecar, indent=1, sort_keys=True) + "\n")
    return out


def load_checkpoint(path: str | Path) -> Checkpoint:
    """Rebuild the model tree from the sidecar and restore exact parameters.

    Missing/extra/misshapen arrays raise an integrity error rather than
    silently partial-loading.
    """
    root = Path(path)
    sidecar_path = root / SIDECAR_FILENAME
    params_path = root / PARAMS_FILENAME
    if not sidecar_path.is_file() or not params_path.is_file():
        raise FormatError(f"{root} is not a checkpoint directory")
    try:
        sidecar = json.loads(sidecar_path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"unreadable checkpoint sidecar: {exc}") from exc
    if sidecar.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {sidecar.get('version')!r}")
    for key in ("model", "epoch", "stages_completed"):
        if key not in sidecar:
            raise FormatError(f"checkpoint sidecar missing {key!r}")

    model = AlignmentModel.from_spec(sidecar["model"])
    with np.load(params_path) as archive:
        arrays = {k: archive[k] for k in archive.files}
    rng_state = None
    if RNG_KEY in arrays:
        rng_state = torch.from_numpy(arrays.pop(RNG_KEY).copy())

    expected = model.state_dict()
    missing = sorted(set(expected) - set(arrays))
    extra = sorted(set(arrays) - set(expected))
    if missing or extra:
        raise IntegrityError(
            f"parameter set mismatch: missing {missing[:4]}, extra {extra[:4]}"
        )
    tensors = {}
    for key, ref in expected.items():
        arr = arrays[key]
        if tuple(arr.shape) != tuple(ref.shape):
            raise IntegrityError(
                f"shape mismatch for {key!r}: checkpoint {tuple(arr.shape)}, "
                f"model {tuple(ref.shape)}"
            )
        tensors[key] = torch.from_numpy(arr.copy()).to(ref.dtype)
    model.load_state_dict(tensors, strict=True)
    return Checkpoint(
        model=model,
        epoch=int(sidecar["epoch"]),
        stages_completed=list(sidecar["stages_completed"]),
        train_config=sidecar.get("train_config"),
        rng_state=rng_state,
    )
