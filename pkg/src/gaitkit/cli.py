"""``gaitkit`` command line: gen, train, eval, ablate, export-masks, info.

Exit status: 0 on success, 2 on usage or input errors, 3 when training
aborts on a non-finite loss. Logs go to stderr; results go to files (and a
short summary to stdout).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from collections import Counter
from pathlib import Path

import numpy as np
import yaml

from .errors import GaitkitError, TrainingAborted

log = logging.getLogger("gaitkit")

EXIT_USAGE = 2
EXIT_ABORTED = 3


class UsageError(Exception):
    pass


def _threads(value) -> int:
    if value is not None:
        return value
    env = os.environ.get("GAITKIT_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise UsageError(f"GAITKIT_THREADS must be an integer, got {env!r}") from None
        if n < 1:
            raise UsageError("GAITKIT_THREADS must be >= 1")
        return n
    return os.cpu_count() or 1


def _positive(text: str) -> int:
    n = int(text)
    if n < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return n


def _read_yaml(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    try:
        doc = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise UsageError(f"{path}: not valid YAML: {exc}") from None
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise UsageError(f"{path}: top level must be a mapping")
    return doc


def _data_dir(path) -> Path:
    path = Path(path)
    if not (path / "index.json").is_file():
        raise UsageError(f"not a dataset directory (no index.json): {path}")
    return path


# ------------------------------------------------------------------ commands

def cmd_gen(args) -> int:
    from .data.synth import generate_synthetic, load_synth_config

    doc = _read_yaml(args.config)
    if "synth" in doc and len(doc) > 1:
        doc = doc["synth"] or {}
    cfg = load_synth_config(doc)
    if args.seed is not None:
        cfg.seed = args.seed
    index = generate_synthetic(cfg, args.out, threads=_threads(args.threads))
    print(f"subjects: {len(index.subjects())} (train {len(index.split['train'])}, test {len(index.split['test'])})")
    print(f"sequences: {len(index.entries)}")
    print(f"index: {Path(args.out) / 'index.json'}")
    return 0


def _experiment(path):
    from .training import ExperimentConfig

    return ExperimentConfig.from_dict(_read_yaml(path))


def cmd_train(args) -> int:
    from .training import FINAL_NAME, train

    cfg = _experiment(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.iters is not None:
        cfg.total_iters = args.iters
        cfg.validate()
    data = _data_dir(args.data)
    if args.resume is not None and not Path(args.resume).is_file():
        raise UsageError(f"checkpoint not found: {args.resume}")
    state = train(cfg, data, out_dir=args.out, resume=args.resume, threads=_threads(args.threads))
    last = state.history[-1] if state.history else {}
    print(f"iterations: {state.iteration}")
    if last:
        print(f"final loss: {last['loss']:.6f} (triplet {last['triplet']:.6f}, ce {last['ce']:.6f})")
    print(f"checkpoint: {Path(args.out) / FINAL_NAME}")
    return 0


def cmd_eval(args) -> int:
    from .data import DatasetIndex, SequenceStore
    from .errors import CheckpointMismatchError
    from .evaluation import evaluate
    from .training import load_model

    model, cfg, _ = load_model(args.ckpt)
    if args.config is not None:
        other = _experiment(args.config)
        if other.backbone.to_dict() != cfg.backbone.to_dict():
            raise CheckpointMismatchError(f"{args.ckpt} was trained with a different backbone than {args.config}")
        cfg.eval = other.eval
    protocol = cfg.eval
    if args.split is not None:
        protocol.split = args.split
    index = DatasetIndex.load(_data_dir(args.data))
    store = SequenceStore.from_index(index, protocol.split, threads=_threads(args.threads))
    report = evaluate(model, store, protocol)
    target = Path(args.report) if args.report else Path(args.ckpt).with_name("report")
    target.parent.mkdir(parents=True, exist_ok=True)
    for path in report.write(target, heat_strip=args.heat_strip):
        log.info("wrote %s", path)
    sys.stdout.write(report.to_text())
    return 0


def cmd_ablate(args) -> int:
    from .ablation import ablation_run

    cfg = _experiment(args.config)
    if args.iters is not None:
        cfg.total_iters = args.iters
        cfg.optimizer.decay_at = min(cfg.optimizer.decay_at, args.iters)
        cfg.validate()
    data = _data_dir(args.data)

    def progress(name, seed, rep):
        log.info("variant %s seed %s: mean rank-1 %.2f", name, seed, rep.mean)

    result = ablation_run(cfg, data, seeds=args.seeds, out_dir=args.out,
                          threads=_threads(args.threads), progress=progress)
    result.write(Path(args.out) / "ablation")
    sys.stdout.write(result.to_text())
    return 0


def cmd_export_masks(args) -> int:
    from .data import DatasetIndex, normalize
    from .evaluation import pgm_bytes
    from .simo import SimoConfig, build_motion_sequence

    index = DatasetIndex.load(_data_dir(args.data))
    matches = [e for e in index.entries
               if e.subject == args.subject and e.seq_no == args.seq and e.condition == args.condition
               and (args.view is None or e.view == args.view)]
    if not matches:
        raise UsageError(f"no sequence {args.subject}/{args.condition}-{args.seq:02d}"
                         + (f" at view {args.view}" if args.view is not None else ""))
    entry = sorted(matches, key=lambda e: e.view)[0]
    seq = index.load_entry(entry)
    if not args.raw:
        seq = normalize(seq)
    motion = build_motion_sequence(seq, SimoConfig(clip_len=args.clip_len, aggregation=args.aggregation))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(motion.num_clips):
        (out / f"mask_{i:03d}.pgm").write_bytes(pgm_bytes(to_gray(motion.masks[i])))
        (out / f"aggregate_{i:03d}.pgm").write_bytes(pgm_bytes(to_gray(motion.aggregated[i])))
    print(f"sequence: {entry.path}")
    print(f"clips: {motion.num_clips} (files: {2 * motion.num_clips})")
    return 0


def to_gray(img: np.ndarray) -> np.ndarray:
    """Values in [0, 1] to 8-bit gray, ``round(value * 255)``."""
    return np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def cmd_info(args) -> int:
    if args.ckpt is not None:
        return _info_ckpt(Path(args.ckpt))
    return _info_data(Path(args.data))


def _info_ckpt(path: Path) -> int:
    from .backbone import analytic_parameter_count
    from .checkpoint import load_checkpoint
    from .training import ExperimentConfig

    if not path.is_file():
        raise UsageError(f"no such file: {path}")
    manifest, tensors = load_checkpoint(path)
    cfg = ExperimentConfig.from_dict(manifest["config"])
    params = sum(a.size for n, a in tensors.items() if n.startswith("param/"))
    print(f"checkpoint: {path.name}")
    print(f"iteration: {manifest.get('iteration')}")
    print(f"config digest: {cfg.digest()}")
    print(f"parameters: {params}")
    print(f"parameters (analytic): {analytic_parameter_count(cfg.backbone)}")
    print(f"stages: {cfg.backbone.stage_channels}  femo: {cfg.backbone.femo_enabled}  "
          f"simo: {'on' if cfg.backbone.simo is not None else 'off'}")
    print(f"tensors: {len(tensors)}")
    return 0


def _info_data(path: Path) -> int:
    from .data import DatasetIndex

    if path.is_file() and path.name == "index.json":
        path = path.parent
    index = DatasetIndex.load(_data_dir(path))
    frames = [e.num_frames for e in index.entries]
    digest = hashlib.sha256((path / "index.json").read_bytes()).hexdigest()[:16]
    print(f"dataset: {path}")
    print(f"index digest: {digest}")
    print(f"subjects: {len(index.subjects())} (train {len(index.split.get('train', []))}, "
          f"test {len(index.split.get('test', []))})")
    print(f"sequences: {len(index.entries)}")
    cond = Counter(e.condition for e in index.entries)
    print("conditions: " + ", ".join(f"{c}={cond[c]}" for c in sorted(cond)))
    views = sorted({e.view for e in index.entries})
    print("views: " + ", ".join(str(v) for v in views))
    if frames:
        print(f"frames per sequence: min {min(frames)} max {max(frames)} mean {np.mean(frames):.1f}")
    return 0


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gaitkit", description="Gait recognition with silhouette- and "
                                     "feature-level motion modeling.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    def common(p):
        p.add_argument("--threads", type=_positive, default=None,
                       help="worker threads (default: $GAITKIT_THREADS or all cores)")
        return p

    p = common(sub.add_parser("gen", help="render a synthetic dataset"))
    p.add_argument("--config", required=True, help="YAML synth config (bare or under 'synth:')")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.set_defaults(func=cmd_gen)

    p = common(sub.add_parser("train", help="train a model"))
    p.add_argument("--config", required=True, help="YAML experiment config")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="run directory (checkpoints, metrics)")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--iters", type=_positive, default=None, help="override total_iters")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("eval", help="cross-view rank-1 evaluation"))
    p.add_argument("--ckpt", required=True, help="checkpoint file")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--report", default=None, help="report path stem (writes .txt and .json)")
    p.add_argument("--config", default=None, help="experiment config; must match the checkpoint")
    p.add_argument("--split", default=None, help="override the protocol split (train/test/all)")
    p.add_argument("--heat-strip", action="store_true", help="also write a PGM heat strip")
    p.set_defaults(func=cmd_eval)

    p = common(sub.add_parser("ablate", help="train and compare SiMo/FeMo variants"))
    p.add_argument("--config", required=True, help="YAML experiment config (the base)")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2], help="training seeds")
    p.add_argument("--iters", type=_positive, default=None, help="override total_iters")
    p.set_defaults(func=cmd_ablate)

    p = common(sub.add_parser("export-masks", help="write SiMo masks and clip aggregates as PGM"))
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--subject", required=True, help="subject id, e.g. 001")
    p.add_argument("--seq", type=_positive, required=True, help="walk number within the condition")
    p.add_argument("--condition", default="NM", choices=["NM", "BG", "CL"])
    p.add_argument("--view", type=int, default=None, help="view in degrees (default: lowest)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--clip-len", type=int, default=4, help="clip length L")
    p.add_argument("--aggregation", default="mean", choices=["mean", "max"])
    p.add_argument("--raw", action="store_true", help="skip 64x44 normalization")
    p.set_defaults(func=cmd_export_masks)

    p = common(sub.add_parser("info", help="summarize a checkpoint or dataset"))
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--ckpt", default=None, help="checkpoint file")
    g.add_argument("--data", default=None, help="dataset directory")
    p.set_defaults(func=cmd_info)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command is None:
        parser.print_usage(sys.stderr)
        print("gaitkit: error: a command is required", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except TrainingAborted as exc:
        print(f"gaitkit: training aborted: {exc}", file=sys.stderr)
        return EXIT_ABORTED
    except (UsageError, GaitkitError, FileNotFoundError, ValueError, KeyError) as exc:
        print(f"gaitkit {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
