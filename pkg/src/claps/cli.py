"""Command-line entry point.

    claps <synth|train|eval|segment|gradcheck|ablate> --config <path>
          [--seed N] [--checkpoint <path>] [--out <dir>]
    claps --write-default-config <path>

Every failure exits nonzero with a single-line diagnostic on stderr.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import checkpoint as ckpt
from . import data
from .config import RunConfig
from .modality import ModalityRegistry

log = logging.getLogger("claps")

LOSS_COLUMNS = ("step", "modality", "cls", "bbox_l1", "bbox_giou", "dice", "bce", "contrastive", "total")


class CliError(Exception):
    pass


def write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter=",", lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def _out_dir(args, default: str = ".") -> Path:
    out = Path(args.out or default)
    if out.exists() and not out.is_dir():
        raise CliError(f"output path {out} exists and is not a directory")
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create output directory {out}: {exc.strerror}") from None
    return out


def _load_config(args) -> RunConfig:
    if not args.config:
        return RunConfig() if args.seed is None else RunConfig(seed=args.seed)
    path = Path(args.config)
    try:
        cfg = RunConfig.load(path)
    except FileNotFoundError:
        raise CliError(f"config file {path} not found") from None
    except (ValueError, TypeError) as exc:
        raise CliError(f"invalid config {path}: {exc}") from None
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _load_dataset(cfg: RunConfig, args) -> data.Dataset:
    path = Path(args.data or cfg.dataset_path)
    if not (path / "manifest.json").exists():
        raise CliError(f"no dataset at {path} (missing manifest.json); run 'claps synth' first")
    return data.load(path)


def _checkpoint_path(cfg: RunConfig, args) -> Path:
    return Path(args.checkpoint or cfg.checkpoint_path)


def _load_model(cfg: RunConfig, registry: ModalityRegistry, path: Path):
    from .model import ClapsModel

    model = ClapsModel(cfg, registry)
    records = ckpt.load(path)
    ckpt.restore_params(records, model.params.named_parameters(), str(path))
    return model, records


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(cfg: RunConfig, args) -> int:
    out = _out_dir(args, cfg.dataset_path)
    ds = data.generate(cfg.synth, cfg.seed)
    data.save(ds, out)
    print(f"wrote {len(ds)} samples to {out} ({json.dumps(ds.frequencies('train'))} train)")
    return 0


def cmd_train(cfg: RunConfig, args) -> int:
    from .model import ClapsModel
    from .train import Trainer, TrainingAborted

    ds = _load_dataset(cfg, args)
    out = _out_dir(args)
    model = ClapsModel(cfg, ds.registry)
    trainer = Trainer(model, ds)
    if args.resume:
        records = ckpt.load(args.resume)
        ckpt.restore_params(records, model.params.named_parameters(), str(args.resume))
        trainer.load_state(ckpt.extra_records(records))
    rows: list[list] = []

    def on_step(t, bd):
        rows.append([t] + bd.as_row())
        if t % 50 == 0:
            log.info("step %d %s total %.6f", t, bd.modality, bd.total)

    path = _checkpoint_path(cfg, args)
    try:
        trainer.run(args.steps, callback=on_step)
    except TrainingAborted as exc:
        write_csv(out / "loss.csv", LOSS_COLUMNS, rows)
        raise CliError(f"training aborted at step {exc.step}: {exc}") from None
    write_csv(out / "loss.csv", LOSS_COLUMNS, rows)
    ckpt.save(path, model.params.named_parameters(), trainer.state())
    print(f"trained to step {trainer.step}; checkpoint {path}; losses {out / 'loss.csv'}")
    return 0


def cmd_eval(cfg: RunConfig, args) -> int:
    from .pipeline import EVAL_COLUMNS, evaluate, model_predictor

    ds = _load_dataset(cfg, args)
    out = _out_dir(args)
    model, _ = _load_model(cfg, ds.registry, _checkpoint_path(cfg, args))
    samples = ds.split(args.split)
    if not samples:
        raise CliError(f"dataset split {args.split!r} is empty")
    rows = evaluate(samples, model_predictor(model))
    write_csv(out / "dice.csv", EVAL_COLUMNS, [r.as_row() for r in rows])
    for r in rows:
        print(f"{r.category:>10} {r.modality:>5}  dice {r.dice:.4f}  (present {r.dice_present:.4f}, "
              f"empty {r.dice_empty:.4f}, fp rate {r.fp_rate_empty:.5f})")
    return 0


def cmd_segment(cfg: RunConfig, args) -> int:
    from .pipeline import end_to_end

    if not (args.image and args.prompt and args.modality):
        raise CliError("segment needs --image, --prompt and --modality")
    registry = ModalityRegistry(cfg.synth.counts.keys())
    if args.modality not in registry:
        raise CliError(f"unregistered modality {args.modality!r}; registry has {registry.names}")
    try:
        image = data.read_pgm(args.image)
    except (OSError, ValueError) as exc:
        raise CliError(f"cannot read image {args.image}: {exc}") from None
    out = _out_dir(args)
    model, _ = _load_model(cfg, registry, _checkpoint_path(cfg, args))
    res = end_to_end(model, image, args.prompt, args.modality)
    data.write_pgm(out / "merged.pgm", np.where(res.merged, 255, 0).astype(np.uint8))
    boxes = []
    for k, (sb, m) in enumerate(res.per_box):
        data.write_pgm(out / f"mask_{k}.pgm", np.where(m, 255, 0).astype(np.uint8))
        b = sb.box
        boxes.append({"box": [b.x_min, b.y_min, b.x_max, b.y_max], "confidence": sb.confidence,
                      "phrase": sb.phrase, "mask": f"mask_{k}.pgm"})
    (out / "boxes.json").write_text(json.dumps({"boxes": boxes}, indent=2) + "\n")
    print(f"{len(boxes)} boxes; merged mask covers {int(res.merged.sum())} pixels; wrote {out}")
    return 0


def cmd_gradcheck(cfg: RunConfig, args) -> int:
    from . import gradcheck as gc

    reports = gc.run(gc.reduced_config(seed=cfg.seed), seed=cfg.seed, max_coords=args.max_coords)
    out = _out_dir(args) if args.out else None
    for r in reports:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status} {r.group:<6} params={r.n_params:<5} max_rel_error={r.max_error:.3e} {r.detail}".rstrip())
    if out:
        write_csv(out / "gradcheck.csv", ["group", "n_params", "max_rel_error", "passed"],
                  [[r.group, r.n_params, r.max_error, int(r.passed)] for r in reports])
    failed = [r.group for r in reports if not r.passed]
    if failed:
        raise CliError(f"gradient check failed for group(s): {', '.join(failed)}")
    return 0


def cmd_ablate(cfg: RunConfig, args) -> int:
    from .ablation import ablate, summarize

    out = _out_dir(args)
    seeds = [cfg.seed + i for i in range(args.n_seeds)]
    results = ablate(cfg, seeds, progress=log.info)
    header, rows = summarize(results, seeds)
    write_csv(out / "ablation.csv", header, rows)
    for r in rows:
        print(f"{r[0]:>8}  median dice {r[1]:.4f}")
    return 0


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "segment": cmd_segment,
            "gradcheck": cmd_gradcheck, "ablate": cmd_ablate}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="claps", description=__doc__.splitlines()[0])
    p.add_argument("--write-default-config", metavar="PATH",
                   help="write a config file with every default filled in, then exit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command")
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="JSON run config (defaults if omitted)")
        s.add_argument("--seed", type=int)
        s.add_argument("--checkpoint")
        s.add_argument("--out")
        s.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
        if name in ("train", "eval"):
            s.add_argument("--data", help="dataset directory (overrides dataset_path)")
        if name == "train":
            s.add_argument("--steps", type=int, help="stop after this many more steps")
            s.add_argument("--resume", help="checkpoint with optimizer state to continue from")
        if name == "eval":
            s.add_argument("--split", default="test")
        if name == "segment":
            s.add_argument("--image", help="input PGM")
            s.add_argument("--prompt")
            s.add_argument("--modality")
        if name == "gradcheck":
            s.add_argument("--max-coords", type=int, default=None,
                           help="check a random subset of coordinates per group")
        if name == "ablate":
            s.add_argument("--n-seeds", type=int, default=3)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)
    try:
        if args.write_default_config:
            path = Path(args.write_default_config)
            try:
                RunConfig().save(path)
            except OSError as exc:
                raise CliError(f"cannot write config {path}: {exc.strerror}") from None
            print(f"wrote default config to {path}")
            if not args.command:
                return 0
        if not args.command:
            parser.print_usage(sys.stderr)
            return 2
        cfg = _load_config(args)
        return COMMANDS[args.command](cfg, args)
    except CliError as exc:
        print(f"claps {args.command or ''}: error: {exc}".replace("  ", " "), file=sys.stderr)
        return 1
    except (OSError, ValueError, KeyError, ArithmeticError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"claps {args.command or ''}: error: {msg}".replace("  ", " "), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
