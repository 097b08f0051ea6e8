"""Command-line entry points.

Exit codes: 0 success, 2 configuration error, 3 training divergence, 4 I/O error.
Set ``MAMLSEG_NUM_THREADS`` to control the number of torch worker threads.
"""

from __future__ import annotations

import argparse
import logging
import os
import shutil
import sys
from pathlib import Path

import numpy as np
import torch

from .backbone import ConfigError
from .config import load_config
from .data import generate_synthetic, load_dataset, manifest_rows, write_dataset
from .engine import TrainingDiverged, evaluate, load_checkpoint, parse_mode, predict_multimodal, train
from .fusion import export_attention

log = logging.getLogger("mamlseg")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4


def _config(args):
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.train.seed = args.seed
        if cfg.synth is not None:
            cfg.synth.seed = args.seed
    if getattr(args, "deterministic", False):
        cfg.train.deterministic = True
    return cfg


def cmd_synth(args):
    cfg = _config(args)
    if cfg.synth is None:
        raise ConfigError("config has no 'synth' section")
    out = cfg.data_dir
    if out.exists() and any(out.iterdir()):
        if not args.force:
            print(f"refusing to overwrite non-empty {out} (use --force)", file=sys.stderr)
            return EXIT_IO
        shutil.rmtree(out)
    cases = generate_synthetic(cfg.synth)
    manifest = write_dataset(cases, out, cfg.data_format)
    lesions = [c.meta["num_lesions"] for c in cases]
    sizes = [int(c.mask.data.sum()) for c in cases]
    print(f"wrote {len(cases)} cases to {out}")
    print(f"lesions: {sum(lesions)} total, {np.mean(lesions):.2f} per case; "
          f"mean lesion voxels per case {np.mean(sizes):.1f}")
    print(f"manifest: {manifest}")
    return EXIT_OK


def cmd_train(args):
    cfg = _config(args)
    cases = load_dataset(cfg.train_manifest)
    out = cfg.output_dir
    (out / "logs").mkdir(parents=True, exist_ok=True)
    cfg.dump(out / "config.yaml")
    try:
        result = train(
            cases, cfg.train, cfg.backbone, cfg.fusion, modalities=cfg.modalities,
            log_path=out / "logs" / "train.jsonl",
            checkpoint_dir=out / "checkpoints", extra_config={"experiment": cfg.to_dict()},
        )
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}; diagnostic checkpoint: {exc.checkpoint_path}", file=sys.stderr)
        return EXIT_DIVERGED
    path = result.checkpoint.save(out / "checkpoints" / "final.pt")
    print(f"trained {result.epochs_run} epochs ({len(result.log)} steps); checkpoint: {path}")
    return EXIT_OK


def _checked_checkpoint(cfg, path):
    ckpt = load_checkpoint(path)
    if set(ckpt.modalities) != set(cfg.modalities):
        raise ConfigError(f"checkpoint modalities {list(ckpt.modalities)} != config {cfg.modalities}")
    return ckpt


def cmd_eval(args):
    cfg = _config(args)
    parse_mode(args.mode)
    ckpt = _checked_checkpoint(cfg, args.checkpoint)
    cases = load_dataset(cfg.test_manifest)
    report = evaluate(cases, ckpt, args.mode, patch_size=cfg.train.patch.size)
    tag = args.mode.replace(":", "_")
    reports = cfg.output_dir / "reports"
    report.write_csv(reports / f"eval_{tag}.csv")
    (reports / f"eval_{tag}.txt").write_text(report.table() + "\n")
    print(report.table())
    return EXIT_OK


def cmd_export_attention(args):
    cfg = _config(args)
    ckpt = _checked_checkpoint(cfg, args.checkpoint)
    ids = [r["case_id"] for r in manifest_rows(cfg.test_manifest)]
    if args.case_id not in ids:
        raise ConfigError(f"unknown case_id {args.case_id!r}")
    case = next(c for c in load_dataset(cfg.test_manifest) if c.case_id == args.case_id)
    _, attention = predict_multimodal(case, ckpt, patch_size=cfg.train.patch.size)
    out = cfg.output_dir / "attention"
    for m, att in sorted(attention.items()):
        path = export_attention(att, case, out / f"{case.case_id}_{m}{cfg.data_format}")
        print(f"{m}: {path}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="mamlseg", description="Modality-aware mutual learning segmentation")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, type=Path)
        p.add_argument("--seed", type=int)
        p.add_argument("--deterministic", action="store_true")
        return p

    p = common(sub.add_parser("synth", help="generate a synthetic dataset"))
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = common(sub.add_parser("train", help="train a MAML model"))
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("eval", help="evaluate a checkpoint"))
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--mode", default="multimodal", help="multimodal or single:<MODALITY>")
    p.set_defaults(func=cmd_eval)

    p = common(sub.add_parser("export-attention", help="write attention maps for one case"))
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--case-id", required=True)
    p.set_defaults(func=cmd_export_attention)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    threads = os.environ.get("MAMLSEG_NUM_THREADS")
    if threads:
        torch.set_num_threads(int(threads))
    try:
        return args.func(args)
    except (ConfigError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
