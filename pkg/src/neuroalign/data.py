"""Paired neural/image datasets: domain types, synthesis, on-disk format, splits.

A dataset couples neural recordings (EEG/MEG-like channel-by-time arrays, or
fMRI-like static feature vectors) with precomputed image embeddings of the
stimuli that elicited them.  Stimulus ids follow the convention
``"<concept>__<image>"``; the prefix before the first ``"__"`` is the concept
label used for zero-shot splitting and concept-level analyses.

On disk a dataset is a JSON manifest plus a sibling ``arrays.npz`` container
of little-endian float32 arrays keyed by the manifest's ``array_key`` fields.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import FormatError, IntegrityError, ValidationError

MANIFEST_VERSION = 1
ARRAY_FILENAME = "arrays.npz"
ARRAY_DTYPE = np.dtype("<f4")

TIME_RESOLVED = "time-resolved"
STATIC = "static"


def concept_of(stimulus_id: str) -> str:
    """Concept label of a stimulus: the prefix before the first ``"__"``.

    Stimuli without the separator are their own singleton concept.
    """
    return stimulus_id.split("__", 1)[0]


@dataclass(frozen=True)
class ModalityKind:
    """Structural description of one neural modality.

    ``time_len`` is None for static modalities (single activation vector per
    sample, no time axis); otherwise samples are channels x time arrays.
    """

    name: str
    channels: int
    time_len: int | None = None

    def __post_init__(self):
        if not self.name:
            raise ValidationError("modality name must be non-empty")
        if self.channels < 1:
            raise ValidationError(f"modality {self.name!r}: channels must be >= 1")
        if self.time_len is not None and self.time_len < 2:
            raise ValidationError(
                f"modality {self.name!r}: time-resolved signals need time_len >= 2"
            )

    @property
    def temporal(self) -> bool:
        return self.time_len is not None

    @property
    def kind(self) -> str:
        return TIME_RESOLVED if self.temporal else STATIC

    @property
    def signal_shape(self) -> tuple[int, ...]:
        if self.temporal:
            return (self.channels, self.time_len)
        return (self.channels,)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "kind": self.kind,
            "channels": self.channels,
            "time_len": self.time_len,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModalityKind":
        kind = d.get("kind", TIME_RESOLVED)
        time_len = d.get("time_len")
        if kind == STATIC:
            time_len = None
        return cls(name=d["name"], channels=int(d["channels"]),
                   time_len=None if time_len is None else int(time_len))


@dataclass
class NeuralSample:
    """One neural recording paired (by stimulus_id) with an image embedding."""

    subject_id: str
    modality: ModalityKind
    stimulus_id: str
    signal: np.ndarray

    def __post_init__(self):
        self.signal = np.asarray(self.signal, dtype=np.float32)
        if self.signal.shape != self.modality.signal_shape:
            raise ValidationError(
                f"sample {self.stimulus_id!r}/{self.subject_id!r}: signal shape "
                f"{self.signal.shape} does not match modality "
                f"{self.modality.name!r} shape {self.modality.signal_shape}"
            )
        if not np.isfinite(self.signal).all():
            raise ValidationError(
                f"sample {self.stimulus_id!r}/{self.subject_id!r}: non-finite signal"
            )


@dataclass
class ImageEmbedding:
    """Target embedding of a stimulus image."""

    stimulus_id: str
    vector: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float32)
        if self.vector.ndim != 1:
            raise ValidationError(
                f"embedding {self.stimulus_id!r}: vector must be 1-D"
            )
        if not np.isfinite(self.vector).all():
            raise ValidationError(f"embedding {self.stimulus_id!r}: non-finite values")
        if self.normalized:
            norm = float(np.linalg.norm(self.vector.astype(np.float64)))
            if abs(norm - 1.0) > 1e-6:
                raise ValidationError(
                    f"embedding {self.stimulus_id!r}: flagged normalized but "
                    f"||v|| = {norm:.8f}"
                )


@dataclass
class PairedDataset:
    """Immutable collection of neural samples, their image embeddings, and a
    per-stimulus train/test split.

    The split maps each stimulus id to exactly one tag, so the train and test
    stimulus sets are disjoint by construction (zero-shot condition).
    """

    samples: list[NeuralSample]
    embeddings: dict[str, ImageEmbedding]
    split: dict[str, str]
    modalities: list[ModalityKind] = field(default_factory=list)

    def __post_init__(self):
        if not self.modalities:
            seen: dict[str, ModalityKind] = {}
            for s in self.samples:
                seen.setdefault(s.modality.name, s.modality)
            self.modalities = list(seen.values())
        by_name = {m.name: m for m in self.modalities}
        dims = {e.vector.shape[0] for e in self.embeddings.values()}
        if len(dims) > 1:
            raise ValidationError(f"inconsistent embedding dims: {sorted(dims)}")
        for s in self.samples:
            if s.stimulus_id not in self.embeddings:
                raise IntegrityError(
                    f"sample references stimulus {s.stimulus_id!r} with no embedding"
                )
            if s.modality.name not in by_name:
                raise IntegrityError(
                    f"sample uses unregistered modality {s.modality.name!r}"
                )
        for stim, tag in self.split.items():
            if tag not in ("train", "test"):
                raise ValidationError(f"split tag {tag!r} for {stim!r} invalid")
            if stim not in self.embeddings:
                raise IntegrityError(f"split references unknown stimulus {stim!r}")
        for stim in self.embeddings:
            self.split.setdefault(stim, "train")

    @property
    def embedding_dim(self) -> int:
        if not self.embeddings:
            raise ValidationError("dataset has no embeddings")
        return next(iter(self.embeddings.values())).vector.shape[0]

    def modality(self, name: str) -> ModalityKind:
        for m in self.modalities:
            if m.name == name:
                return m
        raise KeyError(name)

    def modality_names(self) -> list[str]:
        return [m.name for m in self.modalities]

    def stimuli(self, split: str | None = None) -> list[str]:
        ids = sorted(self.embeddings)
        if split is None:
            return ids
        return [s for s in ids if self.split[s] == split]

    def concepts(self, split: str | None = None) -> list[str]:
        return sorted({concept_of(s) for s in self.stimuli(split)})

    def samples_for(self, modality: str, split: str | None = None) -> list[NeuralSample]:
        out = [s for s in self.samples if s.modality.name == modality]
        if split is not None:
            out = [s for s in out if self.split[s.stimulus_id] == split]
        return out

    def subjects_for(self, modality: str) -> list[str]:
        return sorted({s.subject_id for s in self.samples if s.modality.name == modality})


@dataclass
class SyntheticSpec:
    """Parameters of the synthetic paired-dataset generator.

    Image embeddings are unit vectors with concept structure: each concept
    has a mean direction drawn uniformly on the sphere and its images scatter
    around it with ``concept_spread`` dispersion.  Per modality a fixed random
    linear map sends the embedding to signal space; per-subject heterogeneity
    is a scalar gain; ``noise_sigma`` is additive Gaussian noise.
    """

    n_concepts: int
    images_per_concept: int
    subjects_per_modality: int
    modalities: Sequence[ModalityKind]
    noise_sigma: float = 0.1
    seed: int = 0
    embedding_dim: int = 32
    concept_spread: float = 0.35

    def __post_init__(self):
        if self.n_concepts < 1 or self.images_per_concept < 1:
            raise ValidationError("n_concepts and images_per_concept must be >= 1")
        if self.subjects_per_modality < 1:
            raise ValidationError("subjects_per_modality must be >= 1")
        if not self.modalities:
            raise ValidationError("at least one modality required")
        if self.embedding_dim < 2:
            raise ValidationError("embedding_dim must be >= 2")
        if not (np.isfinite(self.noise_sigma) and self.noise_sigma >= 0):
            raise ValidationError("noise_sigma must be finite and >= 0")
        if self.concept_spread < 0:
            raise ValidationError("concept_spread must be >= 0")
        names = [m.name for m in self.modalities]
        if len(set(names)) != len(names):
            raise ValidationError("modality names must be unique")

    def to_dict(self) -> dict:
        return {
            "n_concepts": self.n_concepts,
            "images_per_concept": self.images_per_concept,
            "subjects_per_modality": self.subjects_per_modality,
            "modalities": [m.to_dict() for m in self.modalities],
            "noise_sigma": self.noise_sigma,
            "seed": self.seed,
            "embedding_dim": self.embedding_dim,
            "concept_spread": self.concept_spread,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        try:
            return cls(
                n_concepts=int(d["n_concepts"]),
                images_per_concept=int(d["images_per_concept"]),
                subjects_per_modality=int(d["subjects_per_modality"]),
                modalities=[ModalityKind.from_dict(m) for m in d["modalities"]],
                noise_sigma=float(d.get("noise_sigma", 0.1)),
                seed=int(d.get("seed", 0)),
                embedding_dim=int(d.get("embedding_dim", 32)),
                concept_spread=float(d.get("concept_spread", 0.35)),
            )
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed synthetic spec: {exc}") from exc


def _unit_rows(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def generate_synthetic(spec: SyntheticSpec) -> PairedDataset:
    """Generate a fully synthetic paired dataset, deterministic under seed.

    Draw order is fixed: concept means, image embeddings, then per modality
    the linear map, subject gains, and per-sample noise.
    """
    rng = np.random.default_rng(spec.seed)
    F = spec.embedding_dim

    concept_means = _unit_rows(rng.standard_normal((spec.n_concepts, F)))
    stimulus_ids: list[str] = []
    vectors = np.empty((spec.n_concepts * spec.images_per_concept, F), dtype=np.float64)
    row = 0
    for c in range(spec.n_concepts):
        for i in range(spec.images_per_concept):
            stimulus_ids.append(f"c{c:04d}__i{i:02d}")
            v = concept_means[c] + spec.concept_spread * rng.standard_normal(F)
            vectors[row] = v / np.linalg.norm(v)
            row += 1

    embeddings = {
        sid: ImageEmbedding(sid, vectors[k].astype(np.float32), normalized=True)
        for k, sid in enumerate(stimulus_ids)
    }

    samples: list[NeuralSample] = []
    for m in spec.modalities:
        size = int(np.prod(m.signal_shape))
        mixing = rng.standard_normal((size, F))
        gains = rng.uniform(0.5, 1.5, size=spec.subjects_per_modality)
        clean = vectors @ mixing.T  # (n_stimuli, size)
        for s in range(spec.subjects_per_modality):
            subject_id = f"{m.name}-sub{s:02d}"
            for k, sid in enumerate(stimulus_ids):
                sig = gains[s] * clean[k]
                if spec.noise_sigma > 0:
                    sig = sig + spec.noise_sigma * rng.standard_normal(size)
                samples.append(
                    NeuralSample(subject_id, m, sid,
                                 sig.reshape(m.signal_shape).astype(np.float32))
                )

    split = {sid: "train" for sid in stimulus_ids}
    return PairedDataset(samples, embeddings, split, list(spec.modalities))


def split_zero_shot(dataset: PairedDataset, test_fraction: float, seed: int) -> PairedDataset:
    """Assign the train/test split at the concept level.

    Every image of a test concept lands in the test split, so no test concept
    is ever seen during training.  Deterministic under seed.
    """
    if not (0.0 < test_fraction < 1.0):
        raise ValidationError("test_fraction must lie strictly between 0 and 1")
    concepts = dataset.concepts()
    n_test = int(round(len(concepts) * test_fraction))
    if n_test < 1 or n_test >= len(concepts):
        raise ValidationError(
            f"cannot split {len(concepts)} concepts at fraction {test_fraction}: "
            f"would leave {n_test} test concepts"
        )
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(concepts))
    test_concepts = {concepts[i] for i in order[:n_test]}
    split = {
        sid: ("test" if concept_of(sid) in test_concepts else "train")
        for sid in dataset.embeddings
    }
    return replace(dataset, split=split)


# ---------------------------------------------------------------------------
# On-disk format
# ---------------------------------------------------------------------------

def _manifest_path(path: Path) -> Path:
    path = Path(path)
    if path.is_dir() or path.suffix != ".json":
        return path / "manifest.json"
    return path


def save_dataset(dataset: PairedDataset, out_dir: str | Path) -> Path:
    """Write ``manifest.json`` + ``arrays.npz`` under ``out_dir``.

    Returns the manifest path.  Arrays are stored as little-endian float32.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    arrays: dict[str, np.ndarray] = {}
    sample_rows = []
    for i, s in enumerate(dataset.samples):
        key = f"sig_{i:06d}"
        arrays[key] = np.ascontiguousarray(s.signal, dtype=ARRAY_DTYPE)
        sample_rows.append({
            "subject_id": s.subject_id,
            "modality": s.modality.name,
            "stimulus_id": s.stimulus_id,
            "array_key": key,
            "split": dataset.split[s.stimulus_id],
        })
    embedding_rows = []
    for j, sid in enumerate(sorted(dataset.embeddings)):
        e = dataset.embeddings[sid]
        key = f"emb_{j:06d}"
        arrays[key] = np.ascontiguousarray(e.vector, dtype=ARRAY_DTYPE)
        embedding_rows.append({
            "stimulus_id": sid,
            "array_key": key,
            "normalized": e.normalized,
        })

    manifest = {
        "version": MANIFEST_VERSION,
        "modalities": [m.to_dict() for m in dataset.modalities],
        "F": dataset.embedding_dim,
        "samples": sample_rows,
        "embeddings": embedding_rows,
    }
    np.savez(out_dir / ARRAY_FILENAME, **arrays)
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest_path


def _require(cond: bool, msg: str):
    if not cond:
        raise FormatError(msg)


def load_dataset(path: str | Path) -> PairedDataset:
    """Load a dataset from a manifest path (or its directory).

    Enforces manifest schema, dtype, shape-vs-modality and referential
    integrity; a lossless inverse of :func:`save_dataset`.
    """
    manifest_path = _manifest_path(Path(path))
    if not manifest_path.exists():
        raise FormatError(f"manifest not found: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest is not valid JSON: {exc}") from exc

    _require(isinstance(manifest, dict), "manifest must be a JSON object")
    for key in ("version", "modalities", "F", "samples", "embeddings"):
        _require(key in manifest, f"manifest missing field {key!r}")
    _require(manifest["version"] == MANIFEST_VERSION,
             f"unsupported manifest version {manifest['version']!r}")

    array_path = manifest_path.parent / ARRAY_FILENAME
    _require(array_path.exists(), f"array container not found: {array_path}")
    with np.load(array_path) as zf:
        arrays = {k: zf[k] for k in zf.files}
    for key, arr in arrays.items():
        if arr.dtype != ARRAY_DTYPE:
            raise FormatError(f"array {key!r} has dtype {arr.dtype}, expected <f4")

    modalities = {}
    for m in manifest["modalities"]:
        mk = ModalityKind.from_dict(m)
        modalities[mk.name] = mk

    F = int(manifest["F"])
    embeddings: dict[str, ImageEmbedding] = {}
    for row in manifest["embeddings"]:
        key = row["array_key"]
        _require(key in arrays, f"embedding array {key!r} missing from container")
        vec = arrays[key]
        if vec.shape != (F,):
            raise FormatError(
                f"embedding {row['stimulus_id']!r}: shape {vec.shape} != ({F},)"
            )
        embeddings[row["stimulus_id"]] = ImageEmbedding(
            row["stimulus_id"], vec, normalized=bool(row.get("normalized", False))
        )

    samples: list[NeuralSample] = []
    split: dict[str, str] = {}
    for row in manifest["samples"]:
        sid = row["stimulus_id"]
        if sid not in embeddings:
            raise IntegrityError(
                f"sample references stimulus {sid!r} with no embedding entry"
            )
        mod_name = row["modality"]
        _require(mod_name in modalities,
                 f"sample references undeclared modality {mod_name!r}")
        mk = modalities[mod_name]
        key = row["array_key"]
        _require(key in arrays, f"sample array {key!r} missing from container")
        sig = arrays[key]
        if sig.shape != mk.signal_shape:
            raise FormatError(
                f"sample {sid!r}/{row['subject_id']!r}: array shape {sig.shape} "
                f"does not match modality {mod_name!r} shape {mk.signal_shape}"
            )
        tag = row.get("split", "train")
        prev = split.setdefault(sid, tag)
        if prev != tag:
            raise FormatError(f"stimulus {sid!r} carries conflicting split tags")
        samples.append(NeuralSample(row["subject_id"], mk, sid, sig))

    return PairedDataset(samples, embeddings, split, list(modalities.values()))


def datasets_equal(a: PairedDataset, b: PairedDataset) -> bool:
    """Byte-level equality of arrays plus metadata equality."""
    if len(a.samples) != len(b.samples) or a.split != b.split:
        return False
    if sorted(a.embeddings) != sorted(b.embeddings):
        return False
    for sid in a.embeddings:
        ea, eb = a.embeddings[sid], b.embeddings[sid]
        if ea.normalized != eb.normalized:
            return False
        if ea.vector.tobytes() != eb.vector.tobytes():
            return False
    for sa, sb in zip(a.samples, b.samples):
        if (sa.subject_id, sa.modality, sa.stimulus_id) != (sb.subject_id, sb.modality, sb.stimulus_id):
            return False
        if sa.signal.tobytes() != sb.signal.tobytes():
            return False
    return True
