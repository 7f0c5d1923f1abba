"""Command-line operator surface.

Commands: synth, split, train, eval-retrieval, rsa, concept-retrieval,
export-map, inspect.  Every artifact-producing run writes a run manifest
(resolved config, seed, sha256 of each artifact) sufficient to re-run it;
nothing here mutates an input dataset.  Exit codes: 0 success, 2 usage or
config errors, 3 numeric failures.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import STAGES, load_checkpoint
from .data import (SyntheticSpec, concept_of, generate_synthetic, load_dataset,
                   save_dataset, split_zero_shot)
from .errors import (ConfigurationError, FormatError, IntegrityError,
                     NeuroalignError, NotFittedError, NumericsError,
                     StageOrderError, ValidationError)
from .evalsuite import (ConceptSpace, collapse_by_stimulus, export_embedding_map,
                        forward_backward_retrieval, render_retrieval_table,
                        retrieval_report, rsa)
from .model import AlignmentModel
from .objectives import LossConfig
from .trainer import TrainConfig, staged_train, train

ENV_OUT = "NEUROALIGN_OUT"
RUN_MANIFEST_NAME = "run_manifest.json"
TRAIN_LEAK_WARNING = ("WARNING: evaluation on the training split; "
                      "metrics overstate zero-shot generalization.")

USAGE_ERRORS = (ValidationError, ConfigurationError, FormatError,
                IntegrityError, NotFittedError, StageOrderError)


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _resolve_out(arg_out: str | None, command: str) -> Path:
    if arg_out:
        return Path(arg_out)
    root = os.environ.get(ENV_OUT)
    if root:
        return Path(root) / command
    raise ConfigurationError(
        f"--out is required (or set {ENV_OUT} as the default output root)"
    )


def _write_run_manifest(out: Path, command: str, config: dict, seed: int | None,
                        config_path: str | None = None) -> Path:
    artifacts = sorted(p for p in out.rglob("*")
                       if p.is_file() and p.name != RUN_MANIFEST_NAME)
    manifest = {
        "command": command,
        "config_path": config_path,
        "config": config,
        "seed": seed,
        "output_dir": str(out),
        "artifacts": {str(p.relative_to(out)): _sha256(p) for p in artifacts},
    }
    path = out / RUN_MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def _load_json(path: str) -> dict:
    try:
        loaded = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(loaded, dict):
        raise FormatError(f"{path}: expected a JSON object")
    return loaded


# -- synth / split / inspect --------------------------------------------------

def cmd_synth(args) -> int:
    spec_dict = _load_json(args.spec)
    if args.seed is not None:
        spec_dict["seed"] = args.seed
    spec = SyntheticSpec.from_dict(spec_dict)
    dataset = generate_synthetic(spec)
    out = _resolve_out(args.out, "synth")
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(dataset, out)
    _write_run_manifest(out, "synth", spec.to_dict(), spec.seed,
                        config_path=args.spec)
    print(f"wrote dataset ({len(dataset.samples)} samples, "
          f"{len(dataset.embeddings)} stimuli) to {out}")
    return 0


def cmd_split(args) -> int:
    dataset = load_dataset(args.dataset)
    split = split_zero_shot(dataset, args.test_fraction, args.seed)
    out = _resolve_out(args.out, "split")
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(split, out)
    config = {"dataset": str(args.dataset), "test_fraction": args.test_fraction}
    _write_run_manifest(out, "split", config, args.seed)
    n_test = len(split.stimuli("test"))
    print(f"wrote split dataset to {out} "
          f"({len(split.stimuli('train'))} train / {n_test} test stimuli)")
    return 0


def _dataset_summary(dataset, path: str) -> dict:
    per_modality = {}
    for kind in dataset.modalities:
        samples = dataset.samples_for(kind.name)
        per_modality[kind.name] = {
            "kind": kind.kind,
            "channels": kind.channels,
            "time_len": kind.time_len,
            "samples": len(samples),
            "train_samples": len(dataset.samples_for(kind.name, "train")),
            "test_samples": len(dataset.samples_for(kind.name, "test")),
            "subjects": dataset.subjects_for(kind.name),
        }
    return {
        "path": str(path),
        "embedding_dim": dataset.embedding_dim,
        "stimuli": {
            "total": len(dataset.stimuli()),
            "train": len(dataset.stimuli("train")),
            "test": len(dataset.stimuli("test")),
        },
        "concepts": {
            "total": len(dataset.concepts()),
            "train": len(dataset.concepts("train")),
            "test": len(dataset.concepts("test")),
        },
        "modalities": per_modality,
    }


def cmd_inspect(args) -> int:
    dataset = load_dataset(args.dataset)
    summary = _dataset_summary(dataset, args.dataset)
    if args.json:
        print(json.dumps(summary, indent=1, sort_keys=True))
        return 0
    stim, con = summary["stimuli"], summary["concepts"]
    print(f"dataset: {summary['path']}")
    print(f"embedding dim: {summary['embedding_dim']}")
    print(f"stimuli: {stim['total']} (train {stim['train']}, test {stim['test']})")
    print(f"concepts: {con['total']} (train {con['train']}, test {con['test']})")
    print("modalities:")
    for name, m in summary["modalities"].items():
        shape = (f"{m['channels']} ch x {m['time_len']} steps"
                 if m["time_len"] else f"{m['channels']} features")
        print(f"  {name}: {m['kind']}, {shape}, {m['samples']} samples "
              f"(train {m['train_samples']}, test {m['test_samples']}), "
              f"{len(m['subjects'])} subjects")
    return 0


# -- train --------------------------------------------------------------------

MODEL_KEYS = ("model_dim", "n_experts", "static_time", "seed",
              "subject_embedding", "n_granularities", "in_channels")


def _resolve_train_config(args) -> tuple[TrainConfig, dict]:
    file_cfg = _load_json(args.config) if args.config else {}
    model_cfg = file_cfg.pop("model", {})
    loss_cfg = file_cfg.pop("loss", {})
    known = set(TrainConfig().to_dict())
    unknown = set(file_cfg) - known
    if unknown:
        raise ConfigurationError(f"unknown train config keys: {sorted(unknown)}")
    unknown_model = set(model_cfg) - set(MODEL_KEYS)
    if unknown_model:
        raise ConfigurationError(f"unknown model config keys: {sorted(unknown_model)}")

    if args.preset == "retrieval":
        loss_cfg = LossConfig.retrieval().to_dict()
    elif args.preset == "captioning":
        loss_cfg = LossConfig.captioning().to_dict()
    for key, flag in (("tau", args.tau), ("alpha", args.alpha), ("beta", args.beta)):
        if flag is not None:
            loss_cfg[key] = flag

    overrides = {
        "epochs": args.epochs,
        "batch_size": args.batch_size,
        "learning_rate": args.learning_rate,
        "weight_decay": args.weight_decay,
        "stage": args.stage,
        "seed": args.seed,
        "checkpoint_interval": args.checkpoint_interval,
        "val_interval": args.val_interval,
        "modalities": args.modalities.split(",") if args.modalities else None,
    }
    merged = TrainConfig().to_dict()
    merged.update(file_cfg)
    if loss_cfg:
        merged["loss"] = {**merged["loss"], **loss_cfg}
    merged.update({k: v for k, v in overrides.items() if v is not None})

    model_flags = {
        "model_dim": args.model_dim,
        "n_experts": args.n_experts,
        "static_time": args.static_time,
        "seed": args.model_seed,
        "subject_embedding": args.subject_embedding or None,
    }
    model_resolved = {"model_dim": 64, "n_experts": 4, "static_time": 8,
                      "seed": 0, "subject_embedding": False}
    model_resolved.update(model_cfg)
    model_resolved.update({k: v for k, v in model_flags.items() if v is not None})
    return TrainConfig.from_dict(merged), model_resolved


def _build_model(dataset, model_cfg: dict) -> AlignmentModel:
    overrides = {}
    if model_cfg.get("subject_embedding"):
        overrides["subject_embedding"] = True
    for key in ("n_granularities", "in_channels"):
        if key in model_cfg:
            overrides[key] = model_cfg[key]
    return AlignmentModel.from_dataset(
        dataset,
        model_dim=model_cfg["model_dim"],
        n_experts=model_cfg["n_experts"],
        static_time=model_cfg["static_time"],
        seed=model_cfg["seed"],
        encoder_overrides=overrides or None,
    )


def cmd_train(args) -> int:
    config, model_cfg = _resolve_train_config(args)
    dataset = load_dataset(args.dataset)
    out = _resolve_out(args.out, "train")
    out.mkdir(parents=True, exist_ok=True)

    if args.resume:
        ckpt = load_checkpoint(args.resume)
        model = ckpt.model
        if config.stage == "staged":
            remaining = STAGES[len(ckpt.stages_completed):]
            if not remaining:
                print("all stages already completed; nothing to train")
                result = None
            else:
                result = staged_train(dataset, model, config, out_dir=out,
                                      stages=remaining,
                                      already_completed=ckpt.stages_completed)
        else:
            if ckpt.epoch >= config.epochs:
                print(f"checkpoint already at epoch {ckpt.epoch} >= "
                      f"target {config.epochs}; nothing to train")
            result = train(dataset, model, config, out_dir=out,
                           start_epoch=ckpt.epoch, rng_state=ckpt.rng_state)
    else:
        model = _build_model(dataset, model_cfg)
        result = train(dataset, model, config, out_dir=out)

    snapshot = {"train": config.to_dict(), "model": model_cfg,
                "dataset": str(args.dataset),
                "resume": str(args.resume) if args.resume else None}
    _write_run_manifest(out, "train", snapshot, config.seed,
                        config_path=args.config)
    if result is not None:
        print(f"trained to epoch {result.checkpoint.epoch}; "
              f"checkpoint at {out / 'checkpoint'}")
    return 0


# -- evaluation commands -------------------------------------------------------

def _load_model_for(dataset, checkpoint_path) -> AlignmentModel:
    ckpt = load_checkpoint(checkpoint_path)
    model = ckpt.model
    if model.embedding_dim != dataset.embedding_dim:
        raise ConfigurationError(
            f"checkpoint embeds into dim {model.embedding_dim} but dataset "
            f"uses dim {dataset.embedding_dim}"
        )
    return model


def _eval_modalities(model, dataset, arg: str | None) -> list[str]:
    names = arg.split(",") if arg else [
        m for m in dataset.modality_names() if m in model.modality_names]
    for name in names:
        if name not in model.modality_names:
            raise ConfigurationError(f"checkpoint has no encoder for {name!r}")
        if name not in dataset.modality_names():
            raise ConfigurationError(f"dataset has no modality {name!r}")
    if not names:
        raise ConfigurationError("no overlapping modalities to evaluate")
    return names


def cmd_eval_retrieval(args) -> int:
    dataset = load_dataset(args.dataset)
    model = _load_model_for(dataset, args.checkpoint)
    modalities = _eval_modalities(model, dataset, args.modalities)
    out = _resolve_out(args.out, "eval-retrieval")
    out.mkdir(parents=True, exist_ok=True)

    stimuli = dataset.stimuli(args.split)
    if not stimuli:
        raise ValidationError(f"split {args.split!r} has no stimuli")
    index = {stim: k for k, stim in enumerate(stimuli)}
    candidates = np.stack([dataset.embeddings[s].vector for s in stimuli])

    reports = {}
    for name in modalities:
        emb = model.embed_samples(dataset, name, split=args.split)
        true_idx = np.array([index[s] for s in emb.stimulus_ids])
        reports[name] = retrieval_report(emb.z, candidates, true_idx,
                                         trials=args.trials, seed=args.seed)

    banner = [TRAIN_LEAK_WARNING] if args.split == "train" else []
    table = render_retrieval_table(reports)
    header = (f"retrieval on split {args.split!r}: {len(stimuli)} candidate "
              f"stimuli, {args.trials} trials per sub-maximal way count, "
              f"seed {args.seed}")
    report_text = "\n".join(banner + [header, "", table]) + "\n"
    (out / "report.txt").write_text(report_text)
    payload = {
        "split": args.split,
        "warning": TRAIN_LEAK_WARNING if args.split == "train" else None,
        "modalities": {name: r.to_dict() for name, r in reports.items()},
    }
    (out / "report.json").write_text(
        json.dumps(payload, indent=1, sort_keys=True) + "\n")
    config = {"checkpoint": str(args.checkpoint), "dataset": str(args.dataset),
              "split": args.split, "trials": args.trials,
              "modalities": modalities}
    _write_run_manifest(out, "eval-retrieval", config, args.seed)
    print(report_text, end="")
    return 0


def _stimulus_matrix(model, dataset, modality: str, split: str) -> dict[str, np.ndarray]:
    """Per-stimulus embeddings: model outputs averaged over repeats, or the
    stored image embeddings for the pseudo-modality 'image'."""
    if modality == "image":
        return {s: dataset.embeddings[s].vector.astype(np.float64)
                for s in dataset.stimuli(split)}
    if modality not in model.modality_names:
        raise ConfigurationError(f"checkpoint has no encoder for {modality!r}")
    emb = model.embed_samples(dataset, modality, split=split)
    ids, means = collapse_by_stimulus(emb.z, emb.stimulus_ids)
    return dict(zip(ids, means))


def _common_matrices(model, dataset, modality_a: str, modality_b: str,
                     split: str):
    a = _stimulus_matrix(model, dataset, modality_a, split)
    b = _stimulus_matrix(model, dataset, modality_b, split)
    common = sorted(set(a) & set(b))
    if len(common) < 3:
        raise ValidationError(
            f"modalities share only {len(common)} stimuli in split {split!r}"
        )
    return common, np.stack([a[s] for s in common]), np.stack([b[s] for s in common])


def cmd_rsa(args) -> int:
    dataset = load_dataset(args.dataset)
    model = _load_model_for(dataset, args.checkpoint)
    out = _resolve_out(args.out, "rsa")
    out.mkdir(parents=True, exist_ok=True)
    common, mat_a, mat_b = _common_matrices(model, dataset, args.modality_a,
                                            args.modality_b, args.split)
    report = rsa(mat_a, mat_b, n_permutations=args.permutations, seed=args.seed)
    payload = {
        "modality_a": args.modality_a,
        "modality_b": args.modality_b,
        "split": args.split,
        "warning": TRAIN_LEAK_WARNING if args.split == "train" else None,
        **report.summary(),
    }
    (out / "rsa.json").write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")
    np.savez(out / "rsms.npz", rsm_pred=report.rsm_pred,
             rsm_measured=report.rsm_measured,
             objects=np.array(common))
    config = {"checkpoint": str(args.checkpoint), "dataset": str(args.dataset),
              "modality_a": args.modality_a, "modality_b": args.modality_b,
              "split": args.split, "permutations": args.permutations}
    _write_run_manifest(out, "rsa", config, args.seed)
    print(f"rsa {args.modality_a} vs {args.modality_b}: "
          f"r = {report.pearson_r:.4f}, p = {report.permutation_p:.4g} "
          f"({len(common)} objects)")
    return 0


def cmd_concept_retrieval(args) -> int:
    dataset = load_dataset(args.dataset)
    model = _load_model_for(dataset, args.checkpoint)
    out = _resolve_out(args.out, "concept-retrieval")
    out.mkdir(parents=True, exist_ok=True)
    common, mat_a, mat_b = _common_matrices(model, dataset, args.modality_a,
                                            args.modality_b, args.split)
    if args.projection:
        space = ConceptSpace(np.load(args.projection))
    else:
        space = ConceptSpace.identity(mat_a.shape[1])
    forward, backward = forward_backward_retrieval(space.transform(mat_a),
                                                   space.transform(mat_b))
    payload = {
        "modality_a": args.modality_a,
        "modality_b": args.modality_b,
        "split": args.split,
        "n_objects": len(common),
        "concept_dim": space.projection.shape[1],
        "projection": str(args.projection) if args.projection else "identity",
        "forward_top1": forward,
        "backward_top1": backward,
        "chance": 1.0 / len(common),
    }
    (out / "concept_retrieval.json").write_text(
        json.dumps(payload, indent=1, sort_keys=True) + "\n")
    config = {k: payload[k] for k in ("modality_a", "modality_b", "split",
                                      "projection")}
    config.update({"checkpoint": str(args.checkpoint),
                   "dataset": str(args.dataset)})
    _write_run_manifest(out, "concept-retrieval", config, None)
    print(f"concept retrieval {args.modality_a} <-> {args.modality_b}: "
          f"forward {forward:.4f}, backward {backward:.4f} "
          f"(chance {1.0 / len(common):.4f})")
    return 0


def cmd_export_map(args) -> int:
    dataset = load_dataset(args.dataset)
    model = _load_model_for(dataset, args.checkpoint)
    out = _resolve_out(args.out, "export-map")
    out.mkdir(parents=True, exist_ok=True)
    matrix = _stimulus_matrix(model, dataset, args.modality, args.split)
    ids = sorted(matrix)
    embeddings = np.stack([matrix[s] for s in ids])
    concepts = [concept_of(s) for s in ids]
    export_embedding_map(embeddings, ids, concepts, method=args.method,
                         seed=args.seed, out_path=out / "map.tsv")
    config = {"checkpoint": str(args.checkpoint), "dataset": str(args.dataset),
              "modality": args.modality, "split": args.split,
              "method": args.method}
    _write_run_manifest(out, "export-map", config, args.seed)
    print(f"wrote 2-D map of {len(ids)} objects to {out / 'map.tsv'}")
    return 0


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="neuroalign",
        description="Multi-modal neural-to-image alignment toolkit.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic paired dataset")
    p.add_argument("--spec", required=True, help="synthetic spec JSON file")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int,
                   help="override the seed in the spec file")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("split", help="apply a concept-level zero-shot split")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", help="output directory")
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train the alignment model")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", help="output directory")
    p.add_argument("--config", help="train config JSON file")
    p.add_argument("--resume", help="checkpoint directory to continue from")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--stage", choices=["joint", "staged"])
    p.add_argument("--modalities", help="comma-separated subset")
    p.add_argument("--seed", type=int)
    p.add_argument("--checkpoint-interval", type=int)
    p.add_argument("--val-interval", type=int)
    p.add_argument("--preset", choices=["retrieval", "captioning"])
    p.add_argument("--tau", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--model-dim", type=int)
    p.add_argument("--n-experts", type=int)
    p.add_argument("--static-time", type=int)
    p.add_argument("--model-seed", type=int)
    p.add_argument("--subject-embedding", action="store_true", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval-retrieval", help="k-way top-m retrieval report")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", help="output directory")
    p.add_argument("--split", default="test", choices=["train", "test"])
    p.add_argument("--modalities", help="comma-separated subset")
    p.add_argument("--trials", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval_retrieval)

    p = sub.add_parser("rsa", help="representational similarity analysis")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", help="output directory")
    p.add_argument("--modality-a", required=True)
    p.add_argument("--modality-b", default="image",
                   help="second modality, or 'image' for stored embeddings")
    p.add_argument("--split", default="test", choices=["train", "test"])
    p.add_argument("--permutations", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_rsa)

    p = sub.add_parser("concept-retrieval",
                       help="forward/backward retrieval in a concept space")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", help="output directory")
    p.add_argument("--modality-a", required=True)
    p.add_argument("--modality-b", required=True)
    p.add_argument("--projection",
                   help=".npy linear map F->M; identity when omitted")
    p.add_argument("--split", default="test", choices=["train", "test"])
    p.set_defaults(func=cmd_concept_retrieval)

    p = sub.add_parser("export-map", help="2-D embedding map for cluster plots")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", help="output directory")
    p.add_argument("--modality", required=True)
    p.add_argument("--split", default="test", choices=["train", "test"])
    p.add_argument("--method", default="mds-init-tsne",
                   choices=["mds-init-tsne", "mds"])
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_export_map)

    p = sub.add_parser("inspect", help="summarize a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_inspect)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NumericsError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NeuroalignError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
