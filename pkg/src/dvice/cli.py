"""Command-line interface: ``dvice <command> [flags]``.

Every command accepts ``--config FILE`` holding ``key = value`` lines whose
keys are flag names (``beta-proto`` or ``beta_proto``); explicit flags win.
Each successful run writes a JSON run manifest with the fully resolved
configuration, the artifacts it produced and the wall-clock duration.

Exit codes: 0 success, 2 configuration or validation error, 3 I/O error
(including unreadable datasets and checkpoints), 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import metrics, synthdata, trainer
from .episodes import (Dataset, DatasetError, EpisodeConfig, EpisodeError, load_dataset, load_image,
                       split_annotated, split_classes)
from .model import binarize, segment_episode
from .numerics import NonFiniteError

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
IMAGE_SUFFIXES = {".ppm", ".pgm", ".pnm", ".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}


class ConfigError(ValueError):
    pass


# ------------------------------------------------------------------ parser

def _episode_flags(p, k=8, n=6, m=4):
    p.add_argument("--k", type=int, default=k, help="guide set size")
    p.add_argument("--n", type=int, default=n, help="positives in the guide set")
    p.add_argument("--m", type=int, default=m, help="co-seg set size")


def _split_flags(p, default_split):
    p.add_argument("--split", choices=("all", "base", "target"), default=default_split,
                   help="which side of the class split to draw episodes from")
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--target-fraction", type=float, default=1 / 3)
    p.add_argument("--annotated-fraction", type=float, default=None,
                   help="per-class annotated share of the chosen side; finetune uses the annotated "
                        "part, eval the held-out part")


def _train_flags(p, default_split):
    p.add_argument("--data", help="dataset directory (manifest.tsv)")
    p.add_argument("--iters", type=int, default=2000)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--momentum", type=float, default=0.9)
    _episode_flags(p)
    p.add_argument("--beta-proto", type=float, default=1.0)
    p.add_argument("--beta-latent", type=float, default=1.0)
    p.add_argument("--no-cham", action="store_true")
    p.add_argument("--no-spam", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ckpt-out", help="final checkpoint path")
    p.add_argument("--ckpt-in", help="checkpoint to resume (train) or start from (finetune)")
    p.add_argument("--loss-log", help="loss log path (default: <ckpt-out>.loss.tsv)")
    p.add_argument("--checkpoint-interval", type=int, default=0,
                   help="also write checkpoint_<iter>.bin next to --ckpt-out every N iterations")
    p.add_argument("--prefetch", type=int, default=0,
                   help="prepare up to N episodes ahead in a worker thread (0: strictly sequential)")
    _split_flags(p, default_split)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dvice", description="Few-shot co-segmentation with a "
                                     "directed variational cross-encoder.")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="key = value configuration file")
        p.add_argument("--manifest", help="run manifest path (default derived from the main output)")
        return p

    g = command("generate", "render a synthetic corpus")
    g.add_argument("--out", help="output directory")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--samples-per-class", type=int, default=40)
    g.add_argument("--shapes", default=",".join(synthdata.SHAPES))
    g.add_argument("--textures", default="solid,stripes")
    g.add_argument("--classes", help="comma-separated subset of classes to write")
    g.add_argument("--dual-object", action="store_true", help="two objects of different classes per image")

    _train_flags(command("train", "train on episodes"), "base")
    _train_flags(command("finetune", "fine-tune a checkpoint"), "target")

    e = command("eval", "score sampled episodes")
    e.add_argument("--data")
    e.add_argument("--ckpt")
    e.add_argument("--episodes", type=int, default=200)
    _episode_flags(e, 8, 8, 4)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--report", help="CSV report path")
    e.add_argument("--tau-b", type=float, default=0.5)
    e.add_argument("--tau-nf", type=float, default=0.1)
    _split_flags(e, "target")

    s = command("segment", "segment a folder of images guided by another folder")
    s.add_argument("--ckpt")
    s.add_argument("--guide", help="directory of guide images")
    s.add_argument("--coseg", help="directory of images to segment")
    s.add_argument("--out", help="output directory for masks")
    s.add_argument("--tau-b", type=float, default=0.5)
    s.add_argument("--tau-nf", type=float, default=0.1)

    x = command("export-embeddings", "write pooled latent means as CSV")
    x.add_argument("--ckpt")
    x.add_argument("--data")
    x.add_argument("--out", help="CSV path")
    return parser


REQUIRED = {
    "generate": ("out",),
    "train": ("data", "ckpt_out"),
    "finetune": ("data", "ckpt_in", "ckpt_out"),
    "eval": ("data", "ckpt", "report"),
    "segment": ("ckpt", "guide", "coseg", "out"),
    "export-embeddings": ("ckpt", "data", "out"),
}


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def read_config_file(path) -> Dict[str, str]:
    values = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key.replace("-", "_")] = value
    return values


def _subparser(parser: argparse.ArgumentParser, name: str) -> argparse.ArgumentParser:
    for action in parser._subparsers._group_actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


def parse_args(argv: Sequence[str]):
    """Parse flags, folding in the optional config file underneath them."""
    parser = build_parser()
    args = parser.parse_args(argv)
    sub = _subparser(parser, args.command)
    if args.config:
        file_values = read_config_file(args.config)
        actions = {a.dest: a for a in sub._actions}
        defaults = {}
        for key, text in file_values.items():
            action = actions.get(key)
            if action is None or key in ("config", "help"):
                raise ConfigError(f"unknown key {key!r} in {args.config}")
            if isinstance(action, argparse._StoreTrueAction):
                defaults[key] = _parse_bool(text)
            else:
                try:
                    defaults[key] = action.type(text) if action.type else text
                except ValueError:
                    raise ConfigError(f"bad value for {key}: {text!r}") from None
                if action.choices and defaults[key] not in action.choices:
                    raise ConfigError(f"{key} must be one of {sorted(action.choices)}")
        sub.set_defaults(**defaults)
        args = parser.parse_args(argv)
    missing = [k for k in REQUIRED[args.command] if getattr(args, k) in (None, "")]
    if missing:
        raise ConfigError("missing required option(s): " + ", ".join("--" + k.replace("_", "-") for k in missing),
                          sub.format_usage())
    return args


# ---------------------------------------------------------------- helpers

def _episode_cfg(args) -> EpisodeConfig:
    try:
        return EpisodeConfig(args.k, args.n, args.m, args.seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _select(dataset: Dataset, args, portion: str) -> Dataset:
    """Restrict ``dataset`` to the chosen split side and annotated/held-out portion."""
    if args.split != "all":
        split = split_classes(dataset.classes, args.target_fraction, args.split_seed)
        dataset = dataset.subset(split.base_classes if args.split == "base" else split.target_classes)
    if args.annotated_fraction is not None:
        annotated, held = split_annotated(dataset, args.annotated_fraction, args.split_seed)
        dataset = annotated if portion == "annotated" else held
    if not len(dataset):
        raise ConfigError("the selected split holds no samples")
    return dataset


def _write_manifest(path, command: str, args, artifacts: List[str], started: float, **extra) -> str:
    config = {k: v for k, v in sorted(vars(args).items()) if k not in ("manifest",)}
    record = {"command": command, "config": config, "seed": getattr(args, "seed", None),
              "artifacts": artifacts, "duration_seconds": round(time.time() - started, 3)}
    record.update(extra)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(record, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return str(path)


def _list_images(directory) -> List[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"not a directory: {d}")
    files = sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise ConfigError(f"no images in {d}")
    return files


def _load_stack(files: Sequence[Path], size: int) -> np.ndarray:
    images = [load_image(f) for f in files]
    for f, im in zip(files, images):
        if im.shape[1:] != (size, size):
            raise ConfigError(f"{f}: image is {im.shape[2]}x{im.shape[1]}, model expects {size}x{size}")
    return np.stack(images)


# ---------------------------------------------------------------- commands

def cmd_generate(args, started) -> None:
    try:
        cfg = synthdata.CorpusConfig(shapes=tuple(args.shapes.split(",")), textures=tuple(args.textures.split(",")),
                                     samples_per_class=args.samples_per_class, dual_object=args.dual_object,
                                     seed=args.seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    classes = args.classes.split(",") if args.classes else None
    try:
        rows = synthdata.generate_corpus(cfg, args.out, classes)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    out = Path(args.out)
    _write_manifest(args.manifest or out / "run_manifest.json", "generate", args,
                    [str(out / synthdata.MANIFEST)], started, samples=len(rows))


def _train_config(args) -> trainer.TrainConfig:
    ckpt_out = Path(args.ckpt_out)
    try:
        return trainer.TrainConfig(
            iterations=args.iters, learning_rate=args.lr, momentum=args.momentum, episode=_episode_cfg(args),
            beta_proto=args.beta_proto, beta_latent=args.beta_latent, no_cham=args.no_cham, no_spam=args.no_spam,
            seed=args.seed, checkpoint_interval=args.checkpoint_interval,
            output_dir=str(ckpt_out.parent) if args.checkpoint_interval else None,
            strict_deterministic=args.prefetch == 0, prefetch=max(1, args.prefetch))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def cmd_train(args, started, finetune: bool = False) -> None:
    cfg = _train_config(args)
    data = _select(load_dataset(args.data), args, "annotated")
    ckpt_out = Path(args.ckpt_out)
    ckpt_out.parent.mkdir(parents=True, exist_ok=True)
    log_path = Path(args.loss_log) if args.loss_log else ckpt_out.with_name(ckpt_out.name + ".loss.tsv")
    log_path.write_text("", encoding="utf-8")
    if finetune:
        start = trainer.load_checkpoint(args.ckpt_in)
        result = trainer.fine_tune(start, data, cfg, log_path=log_path)
    else:
        resume = trainer.load_checkpoint(args.ckpt_in) if args.ckpt_in else None
        if resume is not None and resume.params.config != cfg.model_config:
            raise ConfigError("--ckpt-in architecture does not match the requested attention flags")
        result = trainer.train(data, cfg, resume=resume, log_path=log_path)
    trainer.save_checkpoint(result.checkpoint, ckpt_out)
    losses = [v for _, v in result.losses]
    _write_manifest(args.manifest or ckpt_out.with_name(ckpt_out.name + ".manifest.json"),
                    "finetune" if finetune else "train", args, [str(ckpt_out), str(log_path)], started,
                    final_iteration=result.checkpoint.iteration,
                    final_loss=losses[-1] if losses else None)


def cmd_eval(args, started) -> None:
    ecfg = _episode_cfg(args)
    if args.episodes < 1:
        raise ConfigError("--episodes must be >= 1")
    ckpt = trainer.load_checkpoint(args.ckpt)
    data = _select(load_dataset(args.data), args, "held")
    report = metrics.evaluate(ckpt.params, data, None, ecfg, args.episodes,
                              np.random.default_rng(args.seed), args.tau_b, args.tau_nf)
    out = Path(args.report)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["episode_id", "precision", "jaccard"])
        for i, (p, j) in enumerate(zip(report.precisions, report.jaccards)):
            w.writerow([i, repr(p), repr(j)])
        w.writerow(["mean", repr(report.mean_precision), repr(report.mean_jaccard)])
    _write_manifest(args.manifest or out.with_name(out.name + ".manifest.json"), "eval", args, [str(out)],
                    started, mean_precision=report.mean_precision, mean_jaccard=report.mean_jaccard)


def cmd_segment(args, started) -> None:
    ckpt = trainer.load_checkpoint(args.ckpt)
    size = ckpt.params.config.input_size
    guide_files, coseg_files = _list_images(args.guide), _list_images(args.coseg)
    probs = segment_episode(_load_stack(guide_files, size), _load_stack(coseg_files, size), ckpt.params)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written, blank = [], []
    for f, prob in zip(coseg_files, probs):
        b = binarize(prob, args.tau_b, args.tau_nf)
        path = out / (f.stem + ".pgm")
        synthdata.save_mask(path, b.mask)
        written.append(str(path))
        if b.no_foreground:
            blank.append(str(path))
    _write_manifest(args.manifest or out / "run_manifest.json", "segment", args, written, started, blank=blank)


def cmd_export_embeddings(args, started) -> None:
    ckpt = trainer.load_checkpoint(args.ckpt)
    data = load_dataset(args.data)
    if data.samples[0].image.shape[1] != ckpt.params.config.input_size:
        raise ConfigError("dataset image size does not match the checkpoint")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    metrics.export_embeddings(ckpt.params, data, out)
    _write_manifest(args.manifest or out.with_name(out.name + ".manifest.json"), "export-embeddings", args,
                    [str(out)], started, rows=len(data))


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "finetune": lambda a, t: cmd_train(a, t, finetune=True),
    "eval": cmd_eval,
    "segment": cmd_segment,
    "export-embeddings": cmd_export_embeddings,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    started = time.time()
    try:
        args = parse_args(argv)
        COMMANDS[args.command](args, started)
    except SystemExit as exc:  # argparse usage errors
        return int(exc.code or 0) and EXIT_CONFIG
    except ConfigError as exc:
        msg, *usage = exc.args
        if usage:
            sys.stderr.write(usage[0])
        print(f"dvice: error: {msg}", file=sys.stderr)
        return EXIT_CONFIG
    except (trainer.TrainingDiverged, NonFiniteError) as exc:
        print(f"dvice: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, DatasetError, trainer.CheckpointError) as exc:
        print(f"dvice: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (EpisodeError, ValueError) as exc:
        print(f"dvice: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
