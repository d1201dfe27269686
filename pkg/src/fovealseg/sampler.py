"""Saliency-guided zoom, uniform downsampling and the reverse sampler.

Grids hold *normalized* source coordinates: ``gh[i, j] * H`` is a source row
for the nearest sampler, ``gh[i, j] * (H - 1)`` is the row used by the
bilinear sampler (``align_corners=True`` convention).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as Fnn
from scipy import ndimage

from . import events

_NEAREST_EPS = 1e-6


@dataclass(frozen=True)
class KernelSpec:
    sigma: int = 16

    def __post_init__(self):
        if int(self.sigma) != self.sigma or self.sigma < 1:
            raise ValueError(f"kernel sigma must be an integer >= 1, got {self.sigma!r}")

    @property
    def size(self) -> int:
        return 2 * int(self.sigma) + 1


def gaussian_kernel(spec: KernelSpec) -> np.ndarray:
    """Unnormalized (size, size) Gaussian, 1.0 at the center."""
    c = spec.sigma
    a = np.arange(spec.size, dtype=np.float64) - c
    return np.exp(-(a[:, None] ** 2 + a[None, :] ** 2) / (2.0 * spec.sigma ** 2))


@dataclass
class SamplingGrid:
    gh: torch.Tensor  # (..., h, w)
    gw: torch.Tensor
    src_hw: tuple[int, int]
    fallbacks: int = 0

    @property
    def hw(self) -> tuple[int, int]:
        return tuple(self.gh.shape[-2:])

    def detach(self) -> "SamplingGrid":
        return SamplingGrid(self.gh.detach(), self.gw.detach(), self.src_hw, self.fallbacks)

    def __getitem__(self, k) -> "SamplingGrid":
        return SamplingGrid(self.gh[k], self.gw[k], self.src_hw, self.fallbacks)

    def to_bytes(self) -> bytes:
        """Row-major gh then gw as little-endian float32."""
        gh = self.gh.detach().cpu().numpy().astype("<f4")
        gw = self.gw.detach().cpu().numpy().astype("<f4")
        return gh.tobytes(order="C") + gw.tobytes(order="C")

    @classmethod
    def from_bytes(cls, buf: bytes, hw: tuple[int, int], src_hw: tuple[int, int]) -> "SamplingGrid":
        arr = np.frombuffer(buf, dtype="<f4")
        n = hw[0] * hw[1]
        if arr.size != 2 * n:
            raise ValueError(f"expected {2 * n} floats, got {arr.size}")
        gh = torch.from_numpy(arr[:n].reshape(hw).copy())
        gw = torch.from_numpy(arr[n:].reshape(hw).copy())
        return cls(gh, gw, tuple(src_hw))


def uniform_grid(H: int, W: int, h: int, w: int, dtype=torch.float64) -> SamplingGrid:
    gh = (torch.arange(h, dtype=dtype) / h)[:, None].expand(h, w).contiguous()
    gw = (torch.arange(w, dtype=dtype) / w)[None, :].expand(h, w).contiguous()
    return SamplingGrid(gh, gw, (H, W))


def _window_weights(n_src: int, n_tgt: int, sigma: int, dtype) -> torch.Tensor:
    """(n_tgt, n_src) 1D Gaussian weights, zero outside each target's window."""
    centers = torch.arange(n_tgt, dtype=torch.float64) * (n_src / n_tgt)
    rounded = torch.floor(centers + 0.5)
    src = torch.arange(n_src, dtype=torch.float64)
    inside = (src[None, :] - rounded[:, None]).abs() <= sigma
    wts = torch.exp(-((src[None, :] - centers[:, None]) ** 2) / (2.0 * sigma * sigma))
    return torch.where(inside, wts, torch.zeros_like(wts)).to(dtype)


def compute_grid(D: torch.Tensor, h: int, w: int, spec: KernelSpec) -> SamplingGrid:
    """Kernel- and saliency-weighted mean source coordinate per target pixel.

    ``D`` has shape (..., H, W). The Gaussian kernel is truncated to its
    ``size x size`` footprint around the target's source location
    ``(i * H / h, j * W / w)``; out-of-image taps are dropped. Because the
    truncated kernel is separable, the windowed sums are banded matmuls.
    """
    D = torch.as_tensor(D)
    if not D.is_floating_point():
        D = D.to(torch.float64)
    H, W = D.shape[-2:]
    if h > H or w > W or h < 1 or w < 1:
        raise ValueError(f"target {h}x{w} must fit inside source {H}x{W}")
    if bool((D < 0).any()):
        raise ValueError("saliency must be non-negative")
    A = _window_weights(H, h, spec.sigma, D.dtype)
    B = _window_weights(W, w, spec.sigma, D.dtype)
    rows = torch.arange(H, dtype=D.dtype)
    cols = torch.arange(W, dtype=D.dtype)

    AD = torch.matmul(A, D)  # (..., h, W)
    Z = torch.matmul(AD, B.T)
    Nh = torch.matmul(torch.matmul(A * rows, D), B.T)
    Nw = torch.matmul(AD, (B * cols).T)

    tiny = torch.finfo(D.dtype).tiny * 1e3
    ok = Z > tiny
    safe = torch.where(ok, Z, torch.ones_like(Z))
    ug = uniform_grid(H, W, h, w, D.dtype)
    gh = torch.where(ok, Nh / safe / H, ug.gh.expand_as(Z))
    gw = torch.where(ok, Nw / safe / W, ug.gw.expand_as(Z))
    n_fallback = int((~ok).sum())
    events.bump("grid_fallback", n_fallback)
    return SamplingGrid(gh.clamp(0.0, 1.0), gw.clamp(0.0, 1.0), (H, W), n_fallback)


def _as_batched(F: torch.Tensor, grid: SamplingGrid):
    squeeze = F.dim() == 3
    if squeeze:
        F = F.unsqueeze(0)
    if F.dim() != 4:
        raise ValueError(f"image must be (C, H, W) or (B, C, H, W), got {tuple(F.shape)}")
    if tuple(F.shape[-2:]) != tuple(grid.src_hw):
        raise ValueError(f"image {tuple(F.shape[-2:])} does not match grid source {grid.src_hw}")
    B = F.shape[0]
    h, w = grid.hw
    gh = grid.gh.expand(B, h, w) if grid.gh.dim() == 2 else grid.gh
    gw = grid.gw.expand(B, h, w) if grid.gw.dim() == 2 else grid.gw
    if gh.shape[0] != B:
        raise ValueError("grid batch does not match image batch")
    return F, gh, gw, squeeze


def nearest_indices(grid: SamplingGrid) -> tuple[torch.Tensor, torch.Tensor]:
    H, W = grid.src_hw
    rows = torch.floor(grid.gh.detach() * H + 0.5 + _NEAREST_EPS).long().clamp(0, H - 1)
    cols = torch.floor(grid.gw.detach() * W + 0.5 + _NEAREST_EPS).long().clamp(0, W - 1)
    return rows, cols


def warp(F: torch.Tensor, grid: SamplingGrid, mode: str = "nearest") -> torch.Tensor:
    """Resample ``F`` (C,H,W) or (B,C,H,W) onto the grid's target lattice."""
    F, gh, gw, squeeze = _as_batched(F, grid)
    B, C, H, W = F.shape
    h, w = gh.shape[-2:]
    if mode == "nearest":
        rows, cols = nearest_indices(SamplingGrid(gh, gw, (H, W)))
        idx = (rows * W + cols).reshape(B, 1, h * w).expand(B, C, h * w)
        out = F.reshape(B, C, H * W).gather(2, idx).reshape(B, C, h, w)
    elif mode == "bilinear":
        xy = torch.stack([2.0 * gw - 1.0, 2.0 * gh - 1.0], dim=-1).to(F.dtype)
        out = Fnn.grid_sample(F, xy, mode="bilinear", padding_mode="border", align_corners=True)
    else:
        raise ValueError(f"unknown warp mode {mode!r}")
    return out[0] if squeeze else out


def pixel_aligned(grid: SamplingGrid) -> SamplingGrid:
    """Rescale so bilinear sampling lands on ``g * H`` like the nearest sampler."""
    H, W = grid.src_hw
    sh = H / (H - 1) if H > 1 else 0.0
    sw = W / (W - 1) if W > 1 else 0.0
    return SamplingGrid((grid.gh * sh).clamp(0, 1), (grid.gw * sw).clamp(0, 1), grid.src_hw, grid.fallbacks)


def uniform_downsample(F, h: int, w: int):
    """F[round(i*H/h), round(j*W/w)] on the last two axes (numpy or torch)."""
    H, W = F.shape[-2:]
    if h > H or w > W:
        raise ValueError(f"target {h}x{w} must fit inside source {H}x{W}")
    # integer form of round-half-up(i*H/h)
    rows = np.minimum((2 * np.arange(h) * H + h) // (2 * h), H - 1)
    cols = np.minimum((2 * np.arange(w) * W + w) // (2 * w), W - 1)
    if isinstance(F, torch.Tensor):
        return F[..., torch.from_numpy(rows), :][..., torch.from_numpy(cols)]
    return np.asarray(F)[..., rows, :][..., cols]


def _cell_overlap(start: np.ndarray, stop: np.ndarray, n: int):
    """Pixel indices and overlap lengths of intervals [start, stop)."""
    stop = np.maximum(stop, start)
    m = int(math.ceil(float((stop - start).max(initial=0.0)))) + 1
    first = np.floor(start).astype(np.int64)
    idx = first[:, None] + np.arange(m)[None, :]
    lo = np.maximum(idx, start[:, None])
    hi = np.minimum(idx + 1, stop[:, None])
    wts = np.clip(hi - lo, 0.0, None)
    wts[(idx < 0) | (idx >= n)] = 0.0
    return np.clip(idx, 0, n - 1), wts


def unwarp(Yhat, grid: SamplingGrid) -> np.ndarray:
    """Project (K, h, w) or (h, w) target-space values back to (K, H, W).

    Target sample (i, j) owns the rectangle from its own position to the
    next sample down its column and along its row (the last row and column
    repeat the preceding spacing). Source pixels take the overlap-weighted mean
    of the cells covering them; uncovered pixels copy the nearest covered one.
    On a uniform grid this is exact block replication.
    """
    Y = Yhat.detach().cpu().numpy() if isinstance(Yhat, torch.Tensor) else np.asarray(Yhat)
    squeeze = Y.ndim == 2
    if squeeze:
        Y = Y[None]
    H, W = grid.src_hw
    h, w = grid.hw
    if Y.shape[-2:] != (h, w) or grid.gh.dim() != 2:
        raise ValueError(f"values {Y.shape[-2:]} do not match a single grid of {(h, w)}")
    K = Y.shape[0]
    gy = grid.gh.detach().cpu().numpy().astype(np.float64) * H
    gx = grid.gw.detach().cpu().numpy().astype(np.float64) * W
    # snap float noise so uniform grids tile exactly
    gy = np.where(np.abs(gy - np.round(gy)) < 1e-9, np.round(gy), gy)
    gx = np.where(np.abs(gx - np.round(gx)) < 1e-9, np.round(gx), gx)
    # the last row / column repeats the previous spacing (H/h on a single-row grid)
    last_y = gy[-1:] + (gy[-1:] - gy[-2:-1] if h > 1 else H / h)
    last_x = gx[:, -1:] + (gx[:, -1:] - gx[:, -2:-1] if w > 1 else W / w)
    y1 = np.concatenate([gy[1:], last_y], axis=0)
    x1 = np.concatenate([gx[:, 1:], last_x], axis=1)
    y0, x0 = gy.ravel(), gx.ravel()

    ri, rw = _cell_overlap(y0, y1.ravel(), H)
    ci, cw = _cell_overlap(x0, x1.ravel(), W)
    flat = (ri[:, :, None] * W + ci[:, None, :]).reshape(h * w, -1)
    wts = (rw[:, :, None] * cw[:, None, :]).reshape(h * w, -1)

    den = np.zeros(H * W)
    np.add.at(den, flat.ravel(), wts.ravel())
    vals = Y.reshape(K, h * w).astype(np.float64)
    num = np.zeros((K, H * W))
    for k in range(K):
        np.add.at(num[k], flat.ravel(), (wts * vals[k][:, None]).ravel())

    covered = den > 1e-12
    out = np.zeros((K, H * W))
    out[:, covered] = num[:, covered] / den[covered]
    out = out.reshape(K, H, W)
    covered = covered.reshape(H, W)
    if not covered.all():
        if covered.any():
            _, (ii, jj) = ndimage.distance_transform_edt(~covered, return_indices=True)
            out = out[:, ii, jj]
        else:
            events.bump("unwarp_degenerate")
            pr = np.clip(np.floor(y0 + 0.5).astype(int), 0, H - 1)
            pc = np.clip(np.floor(x0 + 0.5).astype(int), 0, W - 1)
            gi, gj = np.mgrid[0:H, 0:W]
            d = (gi.ravel()[:, None] - pr[None]) ** 2 + (gj.ravel()[:, None] - pc[None]) ** 2
            near = np.argmin(d, axis=1)
            out = vals[:, near].reshape(K, H, W)
    return out[0] if squeeze else out


def subsample_label_map(labels: torch.Tensor, grid: SamplingGrid) -> torch.Tensor:
    """Nearest-sample an integer label map (B, H, W) or (H, W)."""
    lab = labels.unsqueeze(-3)
    return warp(lab, grid, "nearest").squeeze(-3)


def subsample_labels(Ygt, grid: SamplingGrid):
    """Nearest-sample a one-hot label volume (C+1, H, W); labels never blend."""
    is_np = not isinstance(Ygt, torch.Tensor)
    Y = torch.as_tensor(np.asarray(Ygt)) if is_np else Ygt
    if Y.dim() != 3:
        raise ValueError("one-hot labels must have shape (C+1, H, W)")
    ok = ((Y == 0) | (Y == 1)).all() and (Y.sum(0) == 1).all()
    if not bool(ok):
        raise ValueError("labels are not one-hot per pixel")
    out = warp(Y, grid, "nearest")
    return out.numpy() if is_np else out
