"""Analytic FLOP counts for FSNet components and the scheduler's checks.

Convolutions count ``2 k^2 C_in C_out H_out W_out`` (transposed convolutions
use the input size in place of the output size), linear layers ``2 in out``.
Network counts come from forward hooks on the ``meta`` device, so no
arithmetic actually runs, even at 640x640.
"""
from __future__ import annotations

import copy

import torch
import torch.nn as nn

from .model import Backbone, FSNetConfig, SaliencyNet
from .sampler import KernelSpec

# calibrated so a size-33 kernel on a 64x128 target costs 8.92M
GRID_REF_FLOPS = 8.92e6
C_GRID = GRID_REF_FLOPS / (64 * 128 * 33 ** 2)

COMPONENTS = ("saliency", "grid", "warp", "seg_head", "cls_head", "unwarp", "reuse", "displacement", "fullres")


def module_flops(module: nn.Module, *inputs_shapes: tuple[int, ...]) -> int:
    """Sum of conv / linear FLOPs for one forward pass on inputs of the given shapes."""
    if any(t.device.type != "meta" for t in module.parameters()):
        module = copy.deepcopy(module).to("meta")
    total = 0

    def hook(mod, args, out):
        nonlocal total
        if isinstance(mod, nn.ConvTranspose2d):
            x = args[0]
            k = mod.kernel_size[0] * mod.kernel_size[1]
            total += 2 * k * mod.in_channels * mod.out_channels * x.shape[0] * x.shape[-2] * x.shape[-1] // mod.groups
        elif isinstance(mod, nn.Conv2d):
            k = mod.kernel_size[0] * mod.kernel_size[1]
            total += 2 * k * (mod.in_channels // mod.groups) * mod.out_channels * out.shape[0] * out.shape[-2] * out.shape[-1]
        elif isinstance(mod, nn.Linear):
            total += 2 * mod.in_features * mod.out_features * out.numel() // mod.out_features

    with torch.device("meta"):
        handles = [m.register_forward_hook(hook) for m in module.modules()
                   if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear))]
        try:
            with torch.no_grad():
                module(*(torch.empty(s) for s in inputs_shapes))
        finally:
            for h in handles:
                h.remove()
    return int(total)


def grid_flops(h: int, w: int, size: int) -> int:
    return int(round(h * w * size * size * C_GRID))


def _backbone_parts(cfg: FSNetConfig, h: int, w: int) -> tuple[int, int]:
    with torch.device("meta"):
        bb = Backbone(4, cfg.width, cfg.n_classes)
    seg = module_flops(bb.trunk, (1, 5, h, w)) + module_flops(bb.seg_head, (1, cfg.width, h, w))
    cls = module_flops(bb.cls_branch, (1, 6, h, w))
    hh, ww = -(-h // 2), -(-w // 2)
    cls += module_flops(bb.cls_head, (1, 2 * cfg.width)) + 2 * 2 * cfg.width * hh * ww  # gate and max-pool
    return seg, cls


def count_flops(component: str, dims: dict | None = None, cfg: FSNetConfig | None = None) -> int:
    """FLOPs of one component.

    ``dims`` may set ``H, W`` (source), ``h, w`` (target), ``size`` (kernel),
    ``channels`` and ``radius``; anything unset comes from ``cfg``.
    """
    cfg = cfg or FSNetConfig()
    d = {"H": cfg.src_h, "W": cfg.src_w, "h": cfg.h, "w": cfg.w, "size": KernelSpec(cfg.sigma).size,
         "channels": 4, "radius": 2}
    d.update(dims or {})
    H, W, h, w = d["H"], d["W"], d["h"], d["w"]
    if component == "saliency":
        sh, sw = d.get("sal_h", cfg.sal_h or h), d.get("sal_w", cfg.sal_w or w)
        with torch.device("meta"):
            net = SaliencyNet(4, cfg.sal_base, cfg.sal_depth)
        # gaze map (6 / pixel), bilinear upsampling of D (8 / pixel) and its min-max normalisation (4 / pixel)
        return module_flops(net, (1, 4, sh, sw)) + 18 * H * W
    if component == "grid":
        return grid_flops(h, w, d["size"])
    if component == "warp":
        return 2 * d["channels"] * h * w
    if component == "seg_head":
        return _backbone_parts(cfg, h, w)[0]
    if component == "cls_head":
        return _backbone_parts(cfg, h, w)[1]
    if component == "unwarp":
        # overlap-weighted scatter (2 / pixel), normalisation (1 / pixel) and thresholding (1 / pixel)
        return 4 * H * W
    if component == "reuse":
        r = d["radius"]
        return 3 * 3 * H * W + (2 * r + 1) ** 2
    if component == "displacement":
        return 6
    if component == "fullres":
        seg, cls = _backbone_parts(cfg, H, W)
        return seg + cls
    raise ValueError(f"unknown component {component!r}; expected one of {COMPONENTS}")


def fsnet_flops(cfg: FSNetConfig, dims: dict | None = None) -> dict[str, int]:
    """Per-component breakdown of one FSNet run plus its ``total``."""
    parts = {c: count_flops(c, dims, cfg) for c in ("saliency", "grid", "warp", "seg_head", "cls_head", "unwarp")}
    if cfg.sampler == "uniform":
        parts["saliency"] = parts["grid"] = 0
    parts["total"] = sum(parts.values())
    return parts


def kernel_table(sizes=(17, 25, 33, 41), h: int = 64, w: int = 128) -> dict[int, int]:
    return {s: grid_flops(h, w, s) for s in sizes}
