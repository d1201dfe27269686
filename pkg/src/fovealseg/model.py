"""FSNet: gaze map -> saliency net -> sampling grid -> warped input -> two heads."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as Fnn

from .gaze import GazePoint
from .sampler import (
    KernelSpec, SamplingGrid, compute_grid, pixel_aligned, uniform_downsample,
    uniform_grid, unwarp, warp,
)

SCHEMA_VERSION = 1
SALIENCY_OFFSET = 1e-6


@dataclass(frozen=True)
class FSNetConfig:
    src_h: int = 32
    src_w: int = 32
    h: int = 8
    w: int = 8
    sal_h: int = 0  # 0 -> same as the warp target
    sal_w: int = 0
    sigma: int = 16
    n_classes: int = 3
    sal_base: int = 16
    sal_depth: int = 3
    width: int = 32
    gaze_prior: float = 20.0
    sampler: str = "saliency"  # or "uniform" for the Avg baseline

    def __post_init__(self):
        if not (1 <= self.h <= self.src_h and 1 <= self.w <= self.src_w):
            raise ValueError(f"target {self.h}x{self.w} must fit inside source {self.src_h}x{self.src_w}")
        sh, sw = self.saliency_hw
        if not (1 <= sh <= self.src_h and 1 <= sw <= self.src_w):
            raise ValueError("saliency input size must fit inside the source")
        if self.sampler not in ("saliency", "uniform"):
            raise ValueError(f"unknown sampler {self.sampler!r}")
        if self.n_classes < 1 or self.sigma < 1:
            raise ValueError("n_classes and sigma must be positive")

    @property
    def saliency_hw(self) -> tuple[int, int]:
        return (self.sal_h or self.h, self.sal_w or self.w)

    @property
    def kernel(self) -> KernelSpec:
        return KernelSpec(self.sigma)


def gaze_maps(gaze: torch.Tensor, H: int, W: int) -> torch.Tensor:
    """Batched gaze distance maps (B, 1, H, W) from normalized (B, 2) gaze."""
    gaze = gaze.to(torch.float64)
    gu = torch.floor(gaze[:, 0] * (H - 1) + 0.5)
    gv = torch.floor(gaze[:, 1] * (W - 1) + 0.5)
    ii = torch.arange(H, dtype=torch.float64)[None, :, None]
    jj = torch.arange(W, dtype=torch.float64)[None, None, :]
    d = torch.sqrt((ii - gu[:, None, None]) ** 2 + (jj - gv[:, None, None]) ** 2)
    return (1.0 - d / math.sqrt(H * H + W * W)).unsqueeze(1)


def _block(cin, cout):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1), nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1), nn.ReLU(inplace=True),
    )


class SaliencyNet(nn.Module):
    """Small U-Net producing one non-negative density channel at input size."""

    def __init__(self, in_ch=4, base=16, depth=3, gaze_prior=0.0):
        super().__init__()
        chans = [base * 2 ** k for k in range(depth)]
        self.down = nn.ModuleList()
        c = in_ch
        for ch in chans:
            self.down.append(_block(c, ch))
            c = ch
        self.up = nn.ModuleList()
        self.fuse = nn.ModuleList()
        for ch in reversed(chans[:-1]):
            self.up.append(nn.ConvTranspose2d(c, ch, 2, stride=2))
            self.fuse.append(_block(2 * ch, ch))
            c = ch
        self.head = nn.Conv2d(c, 1, 1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)
        # learnable decay rate of a multiplicative exp(gain * (N - 1)) gaze prior
        self.gaze_gain = nn.Parameter(torch.tensor(float(gaze_prior)))

    def forward(self, x):
        gaze = x[:, 3:4]
        skips = []
        for k, blk in enumerate(self.down):
            if k:
                x = Fnn.max_pool2d(x, 2, ceil_mode=True)
            x = blk(x)
            skips.append(x)
        for up, fuse, skip in zip(self.up, self.fuse, reversed(skips[:-1])):
            x = up(x)
            x = Fnn.interpolate(x, size=skip.shape[-2:], mode="nearest") if x.shape[-2:] != skip.shape[-2:] else x
            x = fuse(torch.cat([x, skip], dim=1))
        return Fnn.softplus(self.head(x)) * torch.exp(self.gaze_gain * (gaze - 1.0))


def gaze_affinity(x: torch.Tensor, tau: float) -> torch.Tensor:
    """Colour similarity of every pixel to the sample nearest the gaze.

    ``x`` is a (B, 4, h, w) RGB + gaze-map stack; the gaze sample is the
    argmax of the gaze channel (first one on ties).
    """
    B = x.shape[0]
    rgb = x[:, :3].flatten(2)
    idx = x[:, 3].flatten(1).argmax(dim=1)
    ref = rgb[torch.arange(B), :, idx]
    d2 = ((rgb - ref[:, :, None]) ** 2).mean(dim=1)
    return torch.exp(-d2 / tau).view(B, 1, *x.shape[-2:])


class Backbone(nn.Module):
    """Toy segmentation network with a binary-mask head and a class head.

    A fixed gaze-colour affinity channel joins the input so the small trunk
    can find the gazed object from few examples. The class branch sees the
    gated input with the predicted mask and max-pools a two-scale feature map,
    so it can read the IOI's outline.
    """

    def __init__(self, in_ch=4, width=32, n_classes=3, tau=0.01):
        super().__init__()
        self.tau = tau
        self.trunk = nn.Sequential(
            nn.Conv2d(in_ch + 1, width, 3, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(width, width, 3, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(width, width, 3, padding=2, dilation=2), nn.ReLU(inplace=True),
            nn.Conv2d(width, width, 3, padding=1), nn.ReLU(inplace=True),
        )
        self.seg_head = nn.Conv2d(width, 1, 1)
        self.cls_branch = nn.Sequential(
            nn.Conv2d(in_ch + 2, width, 3, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(width, width, 3, padding=1), nn.ReLU(inplace=True),
            nn.MaxPool2d(2, ceil_mode=True),
            nn.Conv2d(width, 2 * width, 3, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(2 * width, 2 * width, 3, padding=1), nn.ReLU(inplace=True),
        )
        self.cls_head = nn.Linear(2 * width, n_classes)

    def forward(self, x):
        x = torch.cat([x, gaze_affinity(x, self.tau)], dim=1)
        seg_logit = self.seg_head(self.trunk(x))
        bm = torch.sigmoid(seg_logit)
        feats = self.cls_branch(torch.cat([x * bm, bm], dim=1))
        gate = Fnn.max_pool2d(bm, 2, ceil_mode=True)
        return seg_logit, self.cls_head((feats * gate).amax(dim=(2, 3)))


@dataclass
class FSNetOutput:
    y_bm: torch.Tensor   # (B, 1, h, w)
    y_cls: torch.Tensor  # (B, C)
    y_cm: torch.Tensor   # (B, C, h, w)
    grid: SamplingGrid   # batched (B, h, w)
    D: torch.Tensor | None  # (B, H, W) normalized saliency; None for the uniform sampler


def compose_mask(y_bm: torch.Tensor, y_cls: torch.Tensor) -> torch.Tensor:
    """Outer product: Y_cm[b, c, i, j] = Y_cls[b, c] * Y_bm[b, 0, i, j]."""
    if y_bm.dim() == 3:
        return compose_mask(y_bm.unsqueeze(0), y_cls.unsqueeze(0))[0]
    if y_bm.dim() != 4 or y_bm.shape[1] != 1 or y_cls.dim() != 2 or y_cls.shape[0] != y_bm.shape[0]:
        raise ValueError(f"cannot compose {tuple(y_bm.shape)} with {tuple(y_cls.shape)}")
    return y_cls[:, :, None, None] * y_bm


def normalize_saliency(S: torch.Tensor) -> torch.Tensor:
    """Per-sample min-max to [0, 1] plus a small offset; constant maps become all-ones."""
    flat = S.flatten(1)
    lo = flat.min(dim=1, keepdim=True).values
    hi = flat.max(dim=1, keepdim=True).values
    span = hi - lo
    flat = torch.where(span > 1e-12, (flat - lo) / span.clamp(min=1e-12), torch.ones_like(flat))
    return (flat + SALIENCY_OFFSET).view_as(S)


class FSNet(nn.Module):
    def __init__(self, cfg: FSNetConfig = FSNetConfig()):
        super().__init__()
        self.cfg = cfg
        self.saliency = SaliencyNet(4, cfg.sal_base, cfg.sal_depth, cfg.gaze_prior)
        self.backbone = Backbone(4, cfg.width, cfg.n_classes)

    def saliency_parameters(self):
        return self.saliency.parameters()

    def segmentation_parameters(self):
        return self.backbone.parameters()

    def densities(self, stack: torch.Tensor) -> torch.Tensor:
        cfg = self.cfg
        small = uniform_downsample(stack, *cfg.saliency_hw)
        S = self.saliency(small)
        S = Fnn.interpolate(S, size=stack.shape[-2:], mode="bilinear", align_corners=False)
        return normalize_saliency(S[:, 0])

    def forward(self, images: torch.Tensor, gaze: torch.Tensor) -> FSNetOutput:
        cfg = self.cfg
        if images.dim() != 4 or images.shape[1] != 3:
            raise ValueError("images must be (B, 3, H, W)")
        H, W = images.shape[-2:]
        if (H, W) != (cfg.src_h, cfg.src_w):
            raise ValueError(f"image size {(H, W)} does not match config {(cfg.src_h, cfg.src_w)}")
        stack = torch.cat([images, gaze_maps(gaze, H, W).to(images.dtype)], dim=1)
        B = images.shape[0]
        if cfg.sampler == "uniform":
            ug = uniform_grid(H, W, cfg.h, cfg.w, images.dtype)
            grid = SamplingGrid(ug.gh.expand(B, -1, -1), ug.gw.expand(B, -1, -1), (H, W))
            D = None
        else:
            D = self.densities(stack)
            grid = compute_grid(D, cfg.h, cfg.w, cfg.kernel)
        if self.training:
            warped = warp(stack, pixel_aligned(grid), "bilinear")
        else:
            warped = warp(stack, grid, "nearest")
        seg_logit, cls_logit = self.backbone(warped)
        y_bm = torch.sigmoid(seg_logit)
        y_cls = torch.softmax(cls_logit, dim=1)
        return FSNetOutput(y_bm, y_cls, compose_mask(y_bm, y_cls), grid, D)

    @torch.no_grad()
    def segment(self, image: np.ndarray, gaze: GazePoint) -> tuple[np.ndarray, int]:
        """Full-resolution (mask, label) for one (H, W, 3) image."""
        was = self.training
        self.eval()
        try:
            x = torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1))).float()[None]
            out = self.forward(x, torch.tensor([[gaze.u, gaze.v]], dtype=torch.float64))
        finally:
            self.train(was)
        return predict_fullres(out, 0)


def predict_fullres(out: FSNetOutput, index: int = 0) -> tuple[np.ndarray, int]:
    grid = out.grid[index] if out.grid.gh.dim() == 3 else out.grid
    prob = unwarp(out.y_bm[index, 0], grid)
    label = int(np.argmax(out.y_cls[index].detach().cpu().numpy()))
    return prob >= 0.5, label


# --------------------------------------------------------------------------- checkpoints

def save_checkpoint(model: FSNet, path, extra: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    state = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    np.savez(path / "weights.npz", **state)
    lines = [f"schema_version={SCHEMA_VERSION}"]
    lines += [f"{k}={v}" for k, v in asdict(model.cfg).items()]
    for k, v in (extra or {}).items():
        lines.append(f"{k}={v}")
    (path / "manifest.txt").write_text("\n".join(lines) + "\n")
    return path


def read_manifest(path) -> dict[str, str]:
    out = {}
    for line in (Path(path) / "manifest.txt").read_text().splitlines():
        if line.strip() and not line.startswith("#"):
            k, _, v = line.partition("=")
            out[k.strip()] = v.strip()
    return out


def load_checkpoint(path) -> FSNet:
    path = Path(path)
    man = read_manifest(path)
    if int(man.get("schema_version", -1)) != SCHEMA_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint schema {man.get('schema_version')}")
    kw = {}
    for f in fields(FSNetConfig):
        if f.name in man:
            kw[f.name] = type(f.default)(man[f.name])
    model = FSNet(FSNetConfig(**kw))
    with np.load(path / "weights.npz") as z:
        model.load_state_dict({k: torch.from_numpy(z[k]) for k in z.files})
    return model
