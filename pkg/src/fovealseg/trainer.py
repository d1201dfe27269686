"""Alternating two-stage training of FSNet and IoU / IoU' evaluation.

Stage 1 trains the saliency net with the segmentation backbone frozen;
stage 2 freezes the saliency net and fine-tunes the backbone. One
"iteration" of the schedule is one epoch over the training set.
"""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from pathlib import Path
import numpy as np
import torch

from . import seeding
from .data import SampleSet
from .losses import LossConfig, total_loss
from .model import FSNet, FSNetOutput, compose_mask, predict_fullres, save_checkpoint
from .sampler import SamplingGrid, subsample_label_map, uniform_grid

log = logging.getLogger(__name__)


@dataclass
class StageConfig:
    optimizer: str = "nadam"
    lr: float = 0.05
    weight_decay: float = 1e-5
    iterations: int = 500
    patience: int = 20
    decay: float = 0.9


@dataclass
class TrainConfig:
    # Segformer-style backbones used lr 5e-1 in stage 2; convolutional ones 5e-3.
    stage1: StageConfig = field(default_factory=lambda: StageConfig("nadam", 0.05, 1e-5, 500, 20, 0.9))
    stage2: StageConfig = field(default_factory=lambda: StageConfig("adamw", 5e-3, 1e-5, 800, 20, 0.9))
    rounds: int = 1
    batch_size: int = 128
    seed: int = 0
    augment: bool = True  # random flips and transposes of each training batch
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if self.rounds < 1 or self.batch_size < 1:
            raise ValueError("rounds and batch_size must be positive")
        for st in (self.stage1, self.stage2):
            if st.lr < 0 or st.iterations < 0 or st.patience < 1 or not 0 < st.decay <= 1:
                raise ValueError(f"invalid stage config {st}")


@dataclass
class EvalResult:
    iou: float
    iou_prime: float
    per_class: dict[int, dict[str, float]]
    n: int

    def to_dict(self) -> dict:
        return {"iou": self.iou, "iou_prime": self.iou_prime, "n": self.n,
                "per_class": {str(k): v for k, v in self.per_class.items()}}


def _optimizer(name: str, params, lr: float, wd: float):
    name = name.lower()
    if name == "nadam":
        return torch.optim.NAdam(params, lr=lr, weight_decay=wd)
    if name == "adamw":
        return torch.optim.AdamW(params, lr=lr, weight_decay=wd)
    if name == "adam":
        return torch.optim.Adam(params, lr=lr, weight_decay=wd)
    raise ValueError(f"unknown optimizer {name!r}")


def targets_for(out: FSNetOutput, masks: torch.Tensor, classes: torch.Tensor, n_classes: int) -> torch.Tensor:
    """One-hot (B, C, h, w) IOI target subsampled with the output's own grid."""
    sub = subsample_label_map(masks.long(), out.grid.detach())
    onehot = torch.zeros(sub.shape[0], n_classes, *sub.shape[-2:], dtype=out.y_cm.dtype)
    onehot[torch.arange(sub.shape[0]), classes] = sub.to(out.y_cm.dtype)
    return onehot


def dihedral(batch: SampleSet, k: int) -> SampleSet:
    """Apply element ``k`` (0..7) of the square's symmetry group to images, masks and gaze."""
    img, msk, gz = batch.images, batch.masks, batch.gaze.clone()
    if k & 4:
        if img.shape[-1] != img.shape[-2]:
            raise ValueError("transposes need square images")
        img, msk, gz = img.transpose(-1, -2), msk.transpose(-1, -2), gz.flip(1)
    if k & 1:
        img, msk, gz[:, 0] = img.flip(-2), msk.flip(-2), 1.0 - gz[:, 0]
    if k & 2:
        img, msk, gz[:, 1] = img.flip(-1), msk.flip(-1), 1.0 - gz[:, 1]
    return SampleSet(img.contiguous(), gz, msk.contiguous(), batch.classes)


def batch_loss(model: FSNet, batch: SampleSet, loss_cfg: LossConfig) -> torch.Tensor:
    out = model(batch.images, batch.gaze)
    tgt = targets_for(out, batch.masks, batch.classes, model.cfg.n_classes)
    return total_loss(out.y_cm, tgt, loss_cfg)


@torch.no_grad()
def validation_loss(model: FSNet, data: SampleSet, loss_cfg: LossConfig, batch_size: int = 256) -> float:
    total = 0.0
    for s in range(0, len(data), batch_size):
        chunk = data.subset(slice(s, s + batch_size))
        total += float(batch_loss(model, chunk, loss_cfg)) * len(chunk)
    return total / len(data)


def _train_stage(model: FSNet, train: SampleSet, val: SampleSet, st: StageConfig, cfg: TrainConfig,
                 stage: int, sink: "LogFile | None") -> FSNet:
    if len(train) == 0 or len(val) == 0:
        raise ValueError("training and validation data must be non-empty")
    active = model.saliency if stage == 1 else model.backbone
    frozen = model.backbone if stage == 1 else model.saliency
    if stage == 1 and model.cfg.sampler == "uniform":
        return model  # the uniform grid has nothing to learn
    for p in frozen.parameters():
        p.requires_grad_(False)
    for p in active.parameters():
        p.requires_grad_(True)
    opt = _optimizer(st.optimizer, active.parameters(), st.lr, st.weight_decay)
    sched = torch.optim.lr_scheduler.ReduceLROnPlateau(opt, factor=st.decay, patience=2)
    gen = seeding.torch_generator(cfg.seed, "batches", stage, sink.step if sink else 0)

    model.train()
    best = validation_loss(model, val, cfg.loss)
    best_state = copy.deepcopy(active.state_dict())
    since_best = 0
    if sink:
        sink.record(stage, float("nan"), best, opt.param_groups[0]["lr"])
    for epoch in range(st.iterations):
        perm = torch.randperm(len(train), generator=gen)
        losses = []
        for s in range(0, len(train), cfg.batch_size):
            batch = train.subset(perm[s:s + cfg.batch_size])
            if cfg.augment:
                batch = dihedral(batch, int(torch.randint(8, (1,), generator=gen)))
            opt.zero_grad(set_to_none=True)
            loss = batch_loss(model, batch, cfg.loss)
            loss.backward()
            opt.step()
            losses.append(loss.item())
        vl = validation_loss(model, val, cfg.loss)
        sched.step(vl)
        if sink:
            sink.record(stage, float(np.mean(losses)), vl, opt.param_groups[0]["lr"])
        if vl < best:
            best, since_best = vl, 0
            best_state = copy.deepcopy(active.state_dict())
        else:
            since_best += 1
            if since_best >= st.patience:
                log.info("stage %d: early stop after epoch %d", stage, epoch + 1)
                break
    active.load_state_dict(best_state)
    for p in model.parameters():
        p.requires_grad_(True)
    return model


def train_stage1(model, train, val, cfg: TrainConfig, sink=None):
    return _train_stage(model, train, val, cfg.stage1, cfg, 1, sink)


def train_stage2(model, train, val, cfg: TrainConfig, sink=None):
    return _train_stage(model, train, val, cfg.stage2, cfg, 2, sink)


class LogFile:
    """Append-only ``step,stage,loss,val_loss,lr`` lines; step 0 of a stage is its initial validation."""

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self.step = 0
        self.rows: list[tuple[int, int, float, float, float]] = []
        if self.path and not self.path.exists():
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("step,stage,loss,val_loss,lr\n")

    def record(self, stage: int, loss: float, val_loss: float, lr: float) -> None:
        if not np.isnan(loss):
            self.step += 1
        row = (self.step, stage, loss, val_loss, lr)
        self.rows.append(row)
        if self.path:
            with self.path.open("a") as fh:
                fh.write(f"{row[0]},{stage},{loss:.6f},{val_loss:.6f},{lr:.6g}\n")


def alternate_train(model: FSNet, train: SampleSet, val: SampleSet, cfg: TrainConfig,
                    ckpt_dir=None, sink=None, stages=(train_stage1, train_stage2)) -> FSNet:
    """Run stage 1 then stage 2, ``cfg.rounds`` times, checkpointing after each stage."""
    index = []
    for r in range(cfg.rounds):
        for k, fn in enumerate(stages, start=1):
            model = fn(model, train, val, cfg, sink)
            if ckpt_dir is not None:
                name = f"round{r + 1}_stage{k}"
                save_checkpoint(model, Path(ckpt_dir) / name, {"round": r + 1, "stage": k})
                index.append(name)
    if ckpt_dir is not None:
        Path(ckpt_dir).mkdir(parents=True, exist_ok=True)
        (Path(ckpt_dir) / "checkpoints.txt").write_text("\n".join(index) + "\n")
    return model


# --------------------------------------------------------------------------- evaluation

def mask_iou(pred: np.ndarray, gt: np.ndarray, class_ok: bool = True) -> float:
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0 if class_ok else 0.0
    if not class_ok:
        return 0.0
    return float(np.logical_and(pred, gt).sum() / union)


@torch.no_grad()
def evaluate(model, data: SampleSet, batch_size: int = 128) -> EvalResult:
    if len(data) == 0:
        raise ValueError("evaluation data is empty")
    was = model.training
    model.eval()
    ious, ious_p, classes = [], [], []
    try:
        for s in range(0, len(data), batch_size):
            batch = data.subset(slice(s, s + batch_size))
            out = model(batch.images, batch.gaze)
            sub = subsample_label_map(batch.masks.long(), out.grid).numpy().astype(bool)
            for b in range(len(batch)):
                mask, label = predict_fullres(out, b)
                ok = label == int(batch.classes[b])
                ious.append(mask_iou(mask, batch.masks[b].numpy(), ok))
                ious_p.append(mask_iou(out.y_bm[b, 0].numpy() >= 0.5, sub[b], ok))
                classes.append(int(batch.classes[b]))
    finally:
        model.train(was)
    classes = np.array(classes)
    per = {}
    for c in np.unique(classes):
        sel = classes == c
        per[int(c)] = {"iou": float(np.mean(np.array(ious)[sel])),
                       "iou_prime": float(np.mean(np.array(ious_p)[sel])), "n": int(sel.sum())}
    return EvalResult(float(np.mean(ious)), float(np.mean(ious_p)), per, len(ious))


class GroundTruthModel(torch.nn.Module):
    """Perfect stand-in model: looks each image up in ``data`` and returns its true IOI.

    Uses the identity grid, so full-resolution predictions are exact.
    """

    def __init__(self, data: SampleSet, n_classes: int = 3):
        super().__init__()
        self.data = data
        self.n_classes = n_classes
        self.index = {data.images[i].numpy().tobytes(): i for i in range(len(data))}

    def forward(self, images: torch.Tensor, gaze: torch.Tensor) -> FSNetOutput:
        idx = [self.index[img.numpy().tobytes()] for img in images]
        H, W = images.shape[-2:]
        bm = self.data.masks[idx].float()[:, None]
        cls = torch.nn.functional.one_hot(self.data.classes[idx], self.n_classes).float()
        ug = uniform_grid(H, W, H, W)
        grid = SamplingGrid(ug.gh.expand(len(idx), -1, -1), ug.gw.expand(len(idx), -1, -1), (H, W))
        return FSNetOutput(bm, cls, compose_mask(bm, cls), grid, None)
