"""Command line entry points: generate, inject-noise, augment, train, eval, heatmap."""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from .augmentation import AugmentConfig, co_augment_dataset
from .config import ConfigError, DatasetManifest, TrainConfig, config_hash, parse_flat_file, unflatten_config
from .data import (
    LABELS_FILE,
    TEST_FILE,
    ValidationError,
    find_manifest,
    generate_dataset,
    inject_label_noise,
    load_triplets,
)
from .encoder import SHORT_MODALITY, ModalityComposition
from .evaluation import RETRIEVAL_TASKS, evaluate_checkpoint, export_heatmap, write_report
from .training import load_model, train


def _cmd_generate(args: argparse.Namespace) -> int:
    manifest = DatasetManifest.load(args.manifest) if args.manifest else DatasetManifest()
    if args.seed is not None:
        manifest = dataclasses.replace(manifest, seed=args.seed)
    out = generate_dataset(manifest, args.out)
    print(f"wrote dataset to {out} (manifest hash {config_hash(manifest)})")
    return 0


def _cmd_inject_noise(args: argparse.Namespace) -> int:
    sidecar = inject_label_noise(args.input, args.output, args.flip_rate, args.seed)
    print(f"wrote {args.output}; flipped ids in {sidecar}")
    return 0


def _cmd_augment(args: argparse.Namespace) -> int:
    if args.config:
        cfg = unflatten_config(AugmentConfig, parse_flat_file(args.config))
    else:
        cfg = AugmentConfig()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    out = co_augment_dataset(args.input, args.output, cfg)
    print(f"wrote augmented dataset to {out} and report to {out}.report.jsonl")
    return 0


def _cmd_train(args: argparse.Namespace) -> int:
    cfg = TrainConfig.load(args.config)
    overrides = {}
    if args.mode:
        overrides["mode"] = args.mode
    if args.seed is not None:
        overrides["seed"] = args.seed
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
        cfg.validate()
    result = train(cfg)
    print(f"trained {cfg.mode} run {result.config_hash}")
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"metrics:    {result.metrics_path}")
    print(f"total loss: {result.initial_total:.4f} -> {result.final_total:.4f}")
    return 0


def _cmd_eval(args: argparse.Namespace) -> int:
    model, meta = load_model(args.checkpoint)
    dataset = Path(args.dataset)
    if dataset.is_dir():
        dataset = dataset / TEST_FILE
    manifest = find_manifest(dataset)
    triplets = load_triplets(dataset, manifest)
    tasks = tuple(args.tasks.split(","))
    ks = tuple(int(k) for k in args.k.split(","))
    labels_path = dataset.parent / LABELS_FILE
    label_names = json.loads(labels_path.read_text()) if labels_path.exists() else None
    results = evaluate_checkpoint(
        model,
        triplets,
        tasks,
        ks,
        label_names=label_names,
        config_hash=meta.get("config_hash", "-"),
        seed=meta.get("seed", "-"),
    )
    txt, csv_path = write_report(results, args.out)
    print(Path(txt).read_text())
    print(f"report: {txt}, {csv_path}")
    return 0


def _cmd_heatmap(args: argparse.Namespace) -> int:
    model, _ = load_model(args.checkpoint)
    dataset = Path(args.dataset)
    if dataset.is_dir():
        dataset = dataset / TEST_FILE
    triplets = load_triplets(dataset)
    wanted = args.triplet_id or triplets[0].triplet_id
    match = [t for t in triplets if t.triplet_id == wanted]
    if not match:
        print(f"triplet {wanted!r} not found in {dataset}", file=sys.stderr)
        return 2
    modality = SHORT_MODALITY[args.modality]
    csv_path, pgm_path = export_heatmap(model, match[0].positive, modality, Path(args.out))
    print(f"wrote {csv_path} and {pgm_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="modalmoe", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic triplet dataset directory")
    p.add_argument("--manifest", help="manifest.cfg to generate from (defaults to built-in settings)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("inject-noise", help="flip positives and negatives on a fraction of triplets")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", dest="output", required=True)
    p.add_argument("--flip-rate", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_inject_noise)

    p = sub.add_parser("augment", help="co-augment a triplet file (enrichment plus image variants)")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", dest="output", required=True)
    p.add_argument("--config", help="flat key=value AugmentConfig file")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=_cmd_augment)

    p = sub.add_parser("train", help="train from a flat key=value config file")
    p.add_argument("--config", required=True)
    p.add_argument("--mode", choices=["joint", "mixed"])
    p.add_argument("--seed", type=int)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="retrieval and zero-shot metrics for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--tasks", default=",".join(RETRIEVAL_TASKS))
    p.add_argument("--k", default="1,5,10")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("heatmap", help="export one item's last-layer attention as CSV and PGM")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--triplet-id")
    p.add_argument("--modality", choices=sorted(SHORT_MODALITY), default="mm")
    p.add_argument("--out", required=True, help="output path prefix")
    p.set_defaults(func=_cmd_heatmap)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValidationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
