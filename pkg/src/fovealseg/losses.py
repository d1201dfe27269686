"""Soft dice plus inverse-area weighted focal loss on downsampled predictions.

Inputs are channel-first: ``(C, h, w)`` for one sample or ``(B, C, h, w)``
for a batch; batched losses are averaged over samples. ``target`` is the
one-hot IOI class volume, all-zero on background pixels.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch

from . import events

P_CLIP = 1e-7


@dataclass(frozen=True)
class LossConfig:
    lam: float = 1.0
    gamma: float = 2.0
    eps: float = 1e-6

    def __post_init__(self):
        if self.lam < 0 or self.gamma < 0 or not self.eps > 0:
            raise ValueError(f"invalid loss config {self}")


def _batched(pred: torch.Tensor, target: torch.Tensor):
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    if pred.dim() == 3:
        return pred.unsqueeze(0), target.unsqueeze(0)
    if pred.dim() != 4:
        raise ValueError("expected (C, h, w) or (B, C, h, w)")
    return pred, target


def dice_loss(pred: torch.Tensor, target: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    pred, target = _batched(pred, target)
    target = target.to(pred.dtype)
    inter = (pred * target).sum(dim=(1, 2, 3))
    denom = pred.sum(dim=(1, 2, 3)) + target.sum(dim=(1, 2, 3))
    return (1.0 - (2.0 * inter + eps) / (denom + eps)).mean()


def true_label_probability(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """p_t per pixel: the IOI-class probability on IOI pixels, else 1 - sum_c pred."""
    fg = target.sum(dim=1) > 0
    p_fg = (pred * target).sum(dim=1)
    p_bg = 1.0 - pred.sum(dim=1)
    return torch.where(fg, p_fg, p_bg), fg


def area_weighted_focal_loss(pred: torch.Tensor, target: torch.Tensor, gamma: float = 2.0) -> torch.Tensor:
    pred, target = _batched(pred, target)
    target = target.to(pred.dtype)
    pt, fg = true_label_probability(pred, target)
    pt = pt.clamp(P_CLIP, 1.0 - P_CLIP)
    term = (1.0 - pt) ** gamma * -torch.log(pt)

    fgf = fg.to(pred.dtype)
    n_fg = fgf.sum(dim=(1, 2))
    n_bg = (1.0 - fgf).sum(dim=(1, 2))
    empty = n_fg == 0
    events.bump("focal_empty_ioi", int(empty.sum()))
    w_fg = torch.where(empty, torch.zeros_like(n_fg), 1.0 / n_fg.clamp(min=1.0))
    w_bg = torch.where(n_bg == 0, torch.zeros_like(n_bg), 1.0 / n_bg.clamp(min=1.0))
    weights = fgf * w_fg[:, None, None] + (1.0 - fgf) * w_bg[:, None, None]
    return (weights * term).sum(dim=(1, 2)).mean()


def total_loss(pred: torch.Tensor, target: torch.Tensor, cfg: LossConfig = LossConfig()) -> torch.Tensor:
    loss = dice_loss(pred, target, cfg.eps)
    if cfg.lam:
        loss = loss + cfg.lam * area_weighted_focal_loss(pred, target, cfg.gamma)
    return loss
