"""``fovealseg`` command line.

Exit codes: 0 success, 1 runtime failure (one ``error:`` line on stderr),
2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig

log = logging.getLogger("fovealseg")

COMMANDS = ("preprocess", "train", "evaluate", "schedule", "analyze-trace", "flops", "synth", "ablate-kernel")


class UsageError(Exception):
    """Bad arguments or unreadable inputs; exit code 2."""


# --------------------------------------------------------------------------- helpers

def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _load_samples(path):
    from .data import SampleSet
    p = Path(path)
    if p.is_dir():
        for name in ("val.npz", "samples.npz"):
            if (p / name).exists():
                p = p / name
                break
        else:
            raise UsageError(f"no val.npz or samples.npz in {path}")
    if not p.exists():
        raise UsageError(f"data file {p} not found")
    return SampleSet.load(p)


def _train_val(cfg: RunConfig):
    from .data import SampleSet
    from .experiments import toy_data
    if not cfg.data:
        return toy_data(cfg.toy())
    root = Path(cfg.data)
    tr, va = root / "train.npz", root / "val.npz"
    if not (tr.exists() and va.exists()):
        raise UsageError(f"{root} must contain train.npz and val.npz (see `fovealseg synth`)")
    return SampleSet.load(tr), SampleSet.load(va)


def _load_model(cfg: RunConfig):
    from .model import load_checkpoint
    if not cfg.checkpoint:
        raise UsageError("this command needs --checkpoint")
    p = Path(cfg.checkpoint)
    if not (p / "manifest.txt").exists():
        raise UsageError(f"{p} is not a checkpoint directory")
    return load_checkpoint(p)


# --------------------------------------------------------------------------- commands

def cmd_synth(cfg: RunConfig, out: Path, args) -> int:
    from .data import SampleSet, build_corpus, generate_synthetic_scene, generate_synthetic_sequence, save_scene
    from .seeding import int_seed
    from .trace_analysis import write_sequence
    spec = cfg.scene()
    if args.kind == "corpus":
        for split, n in (("train", cfg.n_train), ("val", cfg.n_val)):
            SampleSet.from_samples(build_corpus(spec, n, int_seed(cfg.seed, split))).save(out / f"{split}.npz")
        _write_json(out / "corpus.json", {"seed": cfg.seed, "train": {"n": cfg.n_train, "seed": int_seed(cfg.seed, "train")},
                                          "val": {"n": cfg.n_val, "seed": int_seed(cfg.seed, "val")}})
        print(f"wrote {cfg.n_train} train / {cfg.n_val} val samples to {out}")
    elif args.kind == "scenes":
        n = args.count or cfg.n_train
        for k in range(n):
            save_scene(generate_synthetic_scene(spec, int_seed(cfg.seed, "scene", k)), out, f"scene{k:04d}")
        print(f"wrote {n} annotated scenes to {out}")
    else:
        seq = generate_synthetic_sequence(spec, cfg.seed, cfg.frames, cfg.fps, cfg.saccade_rate,
                                          cfg.still_fraction, cfg.frame_noise)
        truth = write_sequence(seq, out, "sequence")
        print(f"wrote {cfg.frames} frames in {len(truth['boundaries'])} segments to {out}")
    return 0


def cmd_preprocess(cfg: RunConfig, out: Path, args) -> int:
    from .data import load_trace, preprocess_dataset
    trace = load_trace(cfg.trace) if cfg.trace else None
    try:
        m = preprocess_dataset(args.dataset_dir, out, cfg.seed, cfg.n_classes, cfg.balance, trace)
    except FileNotFoundError as e:
        raise UsageError(str(e)) from None
    for c, n in enumerate(m["class_counts"]):
        print(f"class {c}: {n}")
    print(f"{m['n_samples']} samples from {m['n_scenes']} scenes -> {out / 'manifest.json'}")
    return 0


def cmd_train(cfg: RunConfig, out: Path, args) -> int:
    from .experiments import finetune, pretrain_backbone
    from .model import save_checkpoint
    from .trainer import LogFile
    train, val = _train_val(cfg)
    toy = cfg.toy()
    backbone, pre = pretrain_backbone(train, val, toy, LogFile(out / "pretrain.log"))
    model, res = finetune(backbone, cfg.model(), train, val, toy, out / "checkpoints", LogFile(out / "train.log"))
    save_checkpoint(model, out / "final", {"seed": cfg.seed})
    result = res.to_dict()
    if pre is not None:
        result["pretrained_fullres"] = pre.to_dict()
    _write_json(out / "eval.json", result)
    print(f"IoU {res.iou:.4f}  IoU' {res.iou_prime:.4f}  checkpoint {out / 'final'}")
    return 0


def cmd_evaluate(cfg: RunConfig, out: Path, args) -> int:
    from .trainer import GroundTruthModel, evaluate
    if not cfg.data:
        raise UsageError("evaluate needs --data")
    data = _load_samples(cfg.data)
    model = GroundTruthModel(data, cfg.n_classes) if args.oracle else _load_model(cfg)
    res = evaluate(model, data)
    _write_json(out / "eval.json", res.to_dict())
    print(f"IoU {res.iou:.4f}  IoU' {res.iou_prime:.4f}  n={res.n}")
    return 0


def cmd_schedule(cfg: RunConfig, out: Path, args) -> int:
    from .data import generate_synthetic_sequence, load_trace
    from .scheduler import OracleSegmenter, fixture, run_trace
    scfg = cfg.scheduler()
    if args.fixture:
        fx = fixture(args.fixture, T=args.fixture_frames, size=cfg.height, seed=cfg.seed)
        frames, trace, seg = fx.frames, fx.trace, fx.segmenter
    elif cfg.sequence:
        root = Path(cfg.sequence)
        try:
            with np.load(root / "sequence_frames.npz") as z:
                frames = z["frames"].astype(np.float64) / 255.0
        except FileNotFoundError:
            raise UsageError(f"{root / 'sequence_frames.npz'} not found") from None
        trace = load_trace(cfg.trace or root / "sequence_trace.csv")
        seg = None
    else:
        seq = generate_synthetic_sequence(cfg.scene(), cfg.seed, cfg.frames, cfg.fps, cfg.saccade_rate,
                                          cfg.still_fraction, cfg.frame_noise)
        frames, trace, seg = seq.frames, seq.trace, OracleSegmenter.for_sequence(seq)
    if cfg.checkpoint:
        seg = _load_model(cfg).segment
    if seg is None:
        raise UsageError("a stored sequence needs --checkpoint to supply masks")
    report = run_trace(frames, trace, seg, scfg)
    (out / "schedule.json").write_text(report.to_json() + "\n")
    print(report.table())
    return 0


def cmd_analyze_trace(cfg: RunConfig, out: Path, args) -> int:
    from .data import load_trace
    from .trace_analysis import SegmentPartition, analyze, gaze_stats, load_sequence, plot_histogram
    if cfg.trace and not cfg.sequence:
        trace = load_trace(cfg.trace)  # no frames: the whole trace is one segment
        part = SegmentPartition((0,), len(trace))
        stats = gaze_stats(trace, part, cfg.gaze_threshold, beta=cfg.beta)
    else:
        root, name = (Path(cfg.sequence), "sequence") if cfg.sequence else (None, "bundled")
        try:
            frames, trace, truth = load_sequence(root, name)
        except FileNotFoundError as e:
            raise UsageError(str(e)) from None
        if cfg.trace:
            trace = load_trace(cfg.trace)
        part, stats = analyze(frames, trace, cfg.beta, cfg.gaze_threshold)
    result = stats.to_dict()
    result["boundaries"] = list(part.boundaries)
    _write_json(out / "trace_stats.json", result)
    if args.plot:
        plot_histogram(stats, out / "gaze_histogram.png")
    print(f"{'segments':<28}{len(part):>10d}")
    print(stats.table())
    return 0


def cmd_flops(cfg: RunConfig, out: Path, args) -> int:
    from .flops import count_flops, fsnet_flops, kernel_table
    mcfg = cfg.cost_model_config()
    parts = fsnet_flops(mcfg)
    costs = cfg.scheduler().cost
    rows = [(k, v) for k, v in parts.items()]
    rows += [("reuse", costs.reuse), ("displacement", costs.displacement),
             ("fullres", count_flops("fullres", cfg=mcfg))]
    with (out / "flops.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["component", "flops"])
        w.writerows(rows)
        for size, f in kernel_table().items():
            w.writerow([f"grid_size{size}_64x128", f])
    for k, v in rows:
        print(f"{k:<14}{v:>16,d}")
    print(f"{'ND/NS':<14}{rows[-1][1] / parts['total']:>16.2f}")
    return 0


def cmd_ablate_kernel(cfg: RunConfig, out: Path, args) -> int:
    from .experiments import kernel_ablation
    rows = kernel_ablation(cfg.toy(), cfg.sigma_list(), out)
    with (out / "ablation.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["sigma", "size", "iou", "iou_prime", "grid_flops"])
        w.writeheader()
        w.writerows(rows)
    for r in rows:
        print(f"sigma {r['sigma']:>3}  size {r['size']:>3}  IoU {r['iou']:.4f}  IoU' {r['iou_prime']:.4f}  "
              f"grid FLOPs {r['grid_flops']:,d}")
    return 0


HANDLERS = {
    "preprocess": cmd_preprocess, "train": cmd_train, "evaluate": cmd_evaluate, "schedule": cmd_schedule,
    "analyze-trace": cmd_analyze_trace, "flops": cmd_flops, "synth": cmd_synth, "ablate-kernel": cmd_ablate_kernel,
}


# --------------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="flat key=value config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", type=Path, default=Path("out"), help="output directory (default: out)")
    common.add_argument("-v", "--verbose", action="store_true")
    keys = common.add_argument_group("config overrides")
    for f in fields(RunConfig):
        if f.name != "seed":
            keys.add_argument("--" + f.name.replace("_", "-"), dest="cfg_" + f.name, metavar="V")

    ap = argparse.ArgumentParser(prog="fovealseg", description="Gaze-conditioned foveated segmentation tools")
    sub = ap.add_subparsers(dest="command", required=True)
    p = sub.add_parser("preprocess", parents=[common], help="annotated scenes -> balanced gaze samples")
    p.add_argument("dataset_dir", type=Path)
    sub.add_parser("train", parents=[common], help="pretrain + one alternating round")
    p = sub.add_parser("evaluate", parents=[common], help="IoU / IoU' of a checkpoint")
    p.add_argument("--oracle", action="store_true", help="score a perfect ground-truth stub instead")
    p = sub.add_parser("schedule", parents=[common], help="simulate per-frame scheduling on a trace")
    p.add_argument("--fixture", choices=("all_reuse", "all_saccade", "segment_change"))
    p.add_argument("--fixture-frames", type=int, default=10)
    p = sub.add_parser("analyze-trace", parents=[common], help="segment and gaze statistics of a trace")
    p.add_argument("--plot", action="store_true", help="also write gaze_histogram.png")
    sub.add_parser("flops", parents=[common], help="per-component FLOP table")
    p = sub.add_parser("synth", parents=[common], help="generate synthetic data")
    p.add_argument("kind", choices=("corpus", "scenes", "sequence"))
    p.add_argument("--count", type=int, help="number of scenes (kind=scenes)")
    sub.add_parser("ablate-kernel", parents=[common], help="IoU and grid FLOPs per kernel sigma")
    return ap


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    pairs = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    if args.seed is not None:
        pairs["seed"] = str(args.seed)
    return cfg.update(pairs)


def _threads() -> None:
    n = os.environ.get("FOVEALSEG_THREADS")
    if n:
        import torch
        try:
            torch.set_num_threads(max(int(n), 1))
        except ValueError:
            raise ConfigError(f"FOVEALSEG_THREADS must be an integer, got {n!r}") from None


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        _threads()
        out = args.out
        out.mkdir(parents=True, exist_ok=True)
        cfg.echo(out)
        return HANDLERS[args.command](cfg, out, args)
    except (ConfigError, UsageError) as e:
        print(f"fovealseg {args.command}: error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001  every runtime failure becomes one structured line
        msg = str(e).replace("\n", " ")
        print(f"error: command={args.command} type={type(e).__name__} message={json.dumps(msg)}", file=sys.stderr)
        if args.verbose:
            raise
        return 1


if __name__ == "__main__":
    sys.exit(main())
