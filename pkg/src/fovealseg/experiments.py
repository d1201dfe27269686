"""Toy-scale comparison of FSNet against the uniform-downsampling baseline.

Both models start from one backbone pretrained at full resolution on the
training split, standing in for an off-the-shelf segmentation network.
Each then runs one ``alternate_train`` round at the reduced size; for the
uniform sampler stage 1 is a no-op.
"""
from __future__ import annotations

import copy
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import torch

from . import seeding
from .data import SampleSet, SyntheticSpec, build_corpus
from .flops import grid_flops
from .model import FSNet, FSNetConfig
from .sampler import KernelSpec
from .trainer import EvalResult, LogFile, StageConfig, TrainConfig, alternate_train, evaluate, train_stage2

log = logging.getLogger(__name__)


@dataclass
class ToyConfig:
    seed: int = 0
    n_train: int = 300
    n_val: int = 60
    scene: SyntheticSpec = field(default_factory=SyntheticSpec)
    model: FSNetConfig = field(default_factory=lambda: FSNetConfig(h=8, w=8, sigma=8))
    pretrain: StageConfig = field(default_factory=lambda: StageConfig("adamw", 2e-3, 1e-5, 80, 20, 0.9))
    train: TrainConfig = field(default_factory=lambda: TrainConfig(
        stage1=StageConfig("nadam", 1e-3, 1e-5, 30, 20, 0.9),
        stage2=StageConfig("adamw", 1e-3, 1e-5, 50, 20, 0.9),
        batch_size=32,
    ))


@dataclass
class ToyResult:
    fsnet: EvalResult
    avg: EvalResult
    pretrained: EvalResult | None
    seconds: float

    @property
    def gain(self) -> float:
        return self.fsnet.iou - self.avg.iou

    def to_dict(self) -> dict:
        return {"fsnet": self.fsnet.to_dict(), "avg": self.avg.to_dict(),
                "pretrained_fullres": self.pretrained.to_dict() if self.pretrained else None, "gain": self.gain, "seconds": self.seconds}


def toy_data(cfg: ToyConfig) -> tuple[SampleSet, SampleSet]:
    train = build_corpus(cfg.scene, cfg.n_train, seeding.int_seed(cfg.seed, "train"))
    val = build_corpus(cfg.scene, cfg.n_val, seeding.int_seed(cfg.seed, "val"))
    return SampleSet.from_samples(train), SampleSet.from_samples(val)


def _fresh(cfg: FSNetConfig, seed: int) -> FSNet:
    torch.manual_seed(seeding.int_seed(seed, "init", cfg.sampler, cfg.h, cfg.w))
    return FSNet(cfg)


def pretrain_backbone(train: SampleSet, val: SampleSet, cfg: ToyConfig, sink=None) -> tuple[dict, EvalResult]:
    """Train the backbone on undistorted full-resolution input (identity grid).

    Returns ``(None, None)`` when the pretraining schedule has no iterations.
    """
    if cfg.pretrain.iterations == 0:
        return None, None
    H, W = cfg.scene.height, cfg.scene.width
    full = replace(cfg.model, src_h=H, src_w=W, h=H, w=W, sal_h=0, sal_w=0, sampler="uniform")
    model = _fresh(full, cfg.seed)
    tc = replace(cfg.train, stage2=cfg.pretrain)
    train_stage2(model, train, val, tc, sink)
    return copy.deepcopy(model.backbone.state_dict()), evaluate(model, val)


def finetune(backbone: dict | None, mcfg: FSNetConfig, train: SampleSet, val: SampleSet, cfg: ToyConfig,
             ckpt_dir=None, sink=None) -> tuple[FSNet, EvalResult]:
    """One ``alternate_train`` round from a (possibly pretrained) backbone, then evaluation."""
    model = _fresh(mcfg, cfg.seed)
    if backbone is not None:
        model.backbone.load_state_dict(backbone)
    alternate_train(model, train, val, cfg.train, ckpt_dir, sink)
    return model, evaluate(model, val)


def _sinks(out_dir):
    out = Path(out_dir) if out_dir else None
    return out, (lambda name: LogFile(out / f"{name}.log") if out else None)


def run_toy_experiment(cfg: ToyConfig = ToyConfig(), out_dir=None) -> ToyResult:
    t0 = time.time()
    train, val = toy_data(cfg)
    out, sink = _sinks(out_dir)
    backbone, pre = pretrain_backbone(train, val, cfg, sink("pretrain"))
    if pre is not None:
        log.info("pretrained full-resolution IoU %.3f", pre.iou)
    results = {}
    for sampler in ("uniform", "saliency"):
        mcfg = replace(cfg.model, src_h=cfg.scene.height, src_w=cfg.scene.width, sampler=sampler)
        ckpt = out / f"checkpoints_{sampler}" if out else None
        _, results[sampler] = finetune(backbone, mcfg, train, val, cfg, ckpt, sink(sampler))
        log.info("%s IoU %.3f IoU' %.3f", sampler, results[sampler].iou, results[sampler].iou_prime)
    return ToyResult(results["saliency"], results["uniform"], pre, time.time() - t0)


def kernel_ablation(cfg: ToyConfig, sigmas=(8, 12, 16, 20), out_dir=None) -> list[dict]:
    """IoU, IoU' and grid FLOPs of FSNet per kernel sigma, all from one pretrained backbone.

    Grid FLOPs are quoted at the 64x128 reference target so they line up
    with the calibration of ``flops.C_GRID``.
    """
    train, val = toy_data(cfg)
    out, sink = _sinks(out_dir)
    backbone, _ = pretrain_backbone(train, val, cfg, sink("pretrain"))
    rows = []
    for s in sigmas:
        mcfg = replace(cfg.model, src_h=cfg.scene.height, src_w=cfg.scene.width, sampler="saliency", sigma=int(s))
        ckpt = out / f"checkpoints_sigma{s}" if out else None
        _, r = finetune(backbone, mcfg, train, val, cfg, ckpt, sink(f"sigma{s}"))
        size = KernelSpec(int(s)).size
        rows.append({"sigma": int(s), "size": size, "iou": r.iou, "iou_prime": r.iou_prime,
                     "grid_flops": grid_flops(64, 128, size)})
        log.info("sigma %d IoU %.3f IoU' %.3f", s, r.iou, r.iou_prime)
    return rows


def toy_config_dict(cfg: ToyConfig) -> dict:
    return asdict(cfg)
