"""Command-line interface.

Subcommands: gen-data, train, eval, ablate, export-masks.  Every run writes
a manifest (command, resolved config, seed, timestamps, artifact paths)
sufficient to replay it.  Exit codes: 0 success, 1 usage error, 2 config
error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .config import (PRESETS, TrainConfig, config_from_dict, config_to_dict,
                     load_config)
from .errors import ConfigError, InputError
from .data import export_dataset, make_sample
from .model import MMNet


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _write_manifest(out_dir, command, cfg_doc, seed, started, artifacts):
    """Atomic write (tmp file + rename) of the run manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config": cfg_doc,
        "seed": seed,
        "started": started,
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "artifacts": {k: str(v) for k, v in artifacts.items()},
    }
    fd, tmp = tempfile.mkstemp(dir=out_dir, suffix=".manifest")
    with os.fdopen(fd, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    os.replace(tmp, out_dir / "manifest.json")


def _resolve_config(args) -> TrainConfig:
    """Config file (or preset) first, then flag overrides."""
    if getattr(args, "config", None):
        cfg = load_config(args.config)
    else:
        cfg = PRESETS[getattr(args, "preset", "desk") or "desk"]()
    doc = config_to_dict(cfg)
    for flag, section, key in [
        ("seed", "train", "seed"), ("epochs", "train", "epochs"),
        ("batch_size", "train", "batch_size"), ("lr", "train", "lr"),
        ("train_size", "train", "train_size"),
        ("val_size", "train", "val_size"),
        ("steps", "train", "steps_per_epoch"),
        ("nq", "model", "num_queries"),
        ("image_size", "model", "image_size"),
    ]:
        v = getattr(args, flag, None)
        if v is not None:
            doc[section][key] = v
    for flag, key in [("no_mmp", "use_mmp"), ("no_mqe", "use_mqe"),
                      ("no_fvg", "use_fvg")]:
        if getattr(args, flag, False):
            doc["model"][key] = False
    return config_from_dict(doc)


def _add_common(p):
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--preset", choices=sorted(PRESETS),
                   help="named config preset (default: desk)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="output directory")


def _add_model_flags(p):
    p.add_argument("--nq", type=int, help="number of queries")
    p.add_argument("--image-size", dest="image_size", type=int)
    p.add_argument("--no-mmp", dest="no_mmp", action="store_true",
                   help="disable the multi-mask projector (single mask)")
    p.add_argument("--no-mqe", dest="no_mqe", action="store_true",
                   help="disable query scoring (uniform mask average)")
    p.add_argument("--no-fvg", dest="no_fvg", action="store_true",
                   help="disable the global-visual gate on text features")


def build_parser() -> _Parser:
    p = _Parser(prog="mmnet", description=__doc__)
    sub = p.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("gen-data", help="export a synthetic dataset split")
    _add_common(g)
    g.add_argument("--split", default="train",
                   choices=["train", "val", "test"])
    g.add_argument("--count", type=int, default=100)
    g.add_argument("--image-size", dest="image_size", type=int)

    t = sub.add_parser("train", help="train a model")
    _add_common(t)
    _add_model_flags(t)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--train-size", dest="train_size", type=int)
    t.add_argument("--val-size", dest="val_size", type=int)
    t.add_argument("--steps", type=int, help="steps per epoch override")

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split", default="val", choices=["train", "val", "test"])
    e.add_argument("--count", type=int,
                   help="number of samples (default: split size from config)")
    e.add_argument("--out", help="directory for report + manifest")

    a = sub.add_parser("ablate", help="run an ablation study")
    _add_common(a)
    a.add_argument("--study", required=True,
                   choices=["nq", "mmp", "components"])
    a.add_argument("--seeds", type=int, nargs="+", default=[0])
    a.add_argument("--jobs", type=int, default=1)
    a.add_argument("--epochs", type=int)
    a.add_argument("--train-size", dest="train_size", type=int)
    a.add_argument("--val-size", dest="val_size", type=int)
    a.add_argument("--steps", type=int)

    x = sub.add_parser("export-masks",
                       help="write per-query masks and predictions as PNGs")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--out", required=True)
    x.add_argument("--split", default="val", choices=["train", "val", "test"])
    x.add_argument("--count", type=int, default=4)
    x.add_argument("--no-mmp", dest="no_mmp", action="store_true",
                   help="re-run the checkpoint in the single-mask condition")
    return p


def _load_model(path, no_mmp=False):
    doc, params = ckpt.load(path)
    cfg = config_from_dict(doc)
    if no_mmp:
        cfg.model.use_mmp = False
    model = MMNet(cfg.model, seed=cfg.seed)
    model.store.load_state(params)
    return model, cfg


def _cmd_gen_data(args):
    started = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    cfg = _resolve_config(args)
    out = export_dataset(args.out, cfg.seed, args.count, args.split,
                         cfg.model.image_size, cfg.model.max_len,
                         cfg.max_distractors)
    _write_manifest(args.out, "gen-data", config_to_dict(cfg), cfg.seed,
                    started, {"dataset": out})
    print(f"wrote {args.count} {args.split} samples to {out}")
    return 0


def _cmd_train(args):
    from .reports import plot_training_curves
    from .train import train

    started = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    cfg = _resolve_config(args)
    out = Path(args.out)
    _, log = train(cfg, out, log_cb=lambda e: print(
        f"epoch {e['epoch']}: loss {e['loss']:.4f} "
        f"iou {e['iou'] * 100:.2f} lr {e['lr']:.2e}"))
    plot_training_curves(out / "training.png", log)
    _write_manifest(out, "train", config_to_dict(cfg), cfg.seed, started, {
        "checkpoint": out / "checkpoint.bin",
        "metrics": out / "metrics.jsonl",
        "figure": out / "training.png",
    })
    return 0


def _cmd_eval(args):
    from .train import _split_samples, evaluate_model

    started = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    model, cfg = _load_model(args.checkpoint)
    count = args.count or (cfg.train_size if args.split == "train"
                           else cfg.val_size)
    samples = _split_samples(cfg, args.split, count)
    report = evaluate_model(model, samples, cfg.iou_agg)
    doc = report.to_dict()
    print(json.dumps(doc, indent=2, sort_keys=True))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / f"eval-{args.split}.json", "w") as f:
            json.dump({**doc, "per_sample": report.per_sample}, f,
                      indent=2, sort_keys=True)
        _write_manifest(out, "eval", config_to_dict(cfg), cfg.seed, started,
                        {"report": out / f"eval-{args.split}.json"})
    return 0


def _cmd_ablate(args):
    from .ablation import run_study

    started = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    cfg = _resolve_config(args)
    results, paths = run_study(args.study, cfg, args.out, tuple(args.seeds),
                               args.jobs)
    _write_manifest(args.out, "ablate", config_to_dict(cfg), cfg.seed,
                    started, paths)
    print((Path(args.out) / f"{args.study}.txt").read_text())
    failed = [r for r in results if not r["ok"]]
    if failed:
        print(f"{len(failed)} cells failed", file=sys.stderr)
    return 0


def _cmd_export_masks(args):
    from PIL import Image

    from . import autodiff as ad

    started = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    model, cfg = _load_model(args.checkpoint, no_mmp=args.no_mmp)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def save_gray(path, arr):
        Image.fromarray((np.clip(arr, 0, 1) * 255).round().astype(
            np.uint8)).save(path)

    for i in range(args.count):
        s = make_sample(cfg.seed, args.split, i, cfg.model.image_size,
                        cfg.model.max_len, cfg.max_distractors)
        res = model.forward(s.image, s.tokens)
        stem = out / f"{args.split}-{i:06d}"
        stem.mkdir(exist_ok=True)
        Image.fromarray((s.image * 255).round().astype(np.uint8)).save(
            stem / "image.png")
        save_gray(stem / "gt.png", s.gt_mask.astype(float))
        masks = res.bundle.masks.data
        for n in range(masks.shape[0]):
            save_gray(stem / f"mask_{n:02d}.png", ad._sigmoid(masks[n]))
        prob = model.prediction_prob(res)
        save_gray(stem / "pred.png", prob)
        save_gray(stem / "pred_binary.png", (prob >= 0.5).astype(float))
        with open(stem / "sample.json", "w") as f:
            json.dump({
                "text": s.text,
                "scores": [float(v) for v in res.bundle.scores.data],
                "use_mmp": cfg.model.use_mmp,
                "use_mqe": cfg.model.use_mqe,
            }, f, indent=2, sort_keys=True)
    _write_manifest(out, "export-masks", config_to_dict(cfg), cfg.seed,
                    started, {"directory": out})
    print(f"exported {args.count} samples to {out}")
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
    "export-masks": _cmd_export_masks,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    try:
        return _COMMANDS[args.cmd](args)
    except (ConfigError,) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (InputError,) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
