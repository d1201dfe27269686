import pytest
import torch.nn as nn

from fovealseg.flops import C_GRID, COMPONENTS, count_flops, fsnet_flops, grid_flops, kernel_table, module_flops
from fovealseg.model import FSNetConfig

PUBLISHED = {17: 2.38e6, 25: 5.12e6, 33: 8.92e6, 41: 13.77e6}


def test_calibration_point():
    assert grid_flops(64, 128, 33) == 8_920_000
    assert C_GRID == pytest.approx(8.92e6 / (64 * 128 * 33 ** 2))


def test_kernel_table_matches_published_within_two_percent():
    for size, f in kernel_table().items():
        assert f == pytest.approx(PUBLISHED[size], rel=0.02)


def test_endpoint_ratio():
    assert grid_flops(64, 128, 41) / grid_flops(64, 128, 17) == pytest.approx(41 ** 2 / 17 ** 2)
    assert 41 ** 2 / 17 ** 2 == pytest.approx(13.77 / 2.38, rel=0.01)  # quadratic model: 5.82 vs 5.79


def test_one_by_one_conv_is_two_flops():
    assert module_flops(nn.Conv2d(1, 1, 1), (1, 1, 1, 1)) == 2


def test_conv_and_linear_formulas():
    assert module_flops(nn.Conv2d(3, 8, 3, padding=1), (1, 3, 10, 12)) == 2 * 9 * 3 * 8 * 10 * 12
    assert module_flops(nn.Conv2d(4, 4, 3, stride=2, padding=1), (1, 4, 8, 8)) == 2 * 9 * 4 * 4 * 4 * 4
    assert module_flops(nn.Linear(7, 5), (1, 7)) == 2 * 7 * 5


def test_warp_quadruples_when_target_doubles():
    a = count_flops("warp", {"h": 16, "w": 24})
    assert count_flops("warp", {"h": 32, "w": 48}) == 4 * a


def test_unknown_component_rejected():
    with pytest.raises(ValueError, match="unknown component"):
        count_flops("attention")


def test_every_component_counts_positive():
    cfg = FSNetConfig(src_h=64, src_w=64, h=16, w=16)
    for c in COMPONENTS:
        assert count_flops(c, cfg=cfg) > 0


def test_fsnet_breakdown_sums_and_uniform_drops_grid():
    cfg = FSNetConfig(src_h=64, src_w=64, h=16, w=16)
    p = fsnet_flops(cfg)
    assert p["total"] == sum(v for k, v in p.items() if k != "total")
    u = fsnet_flops(FSNetConfig(src_h=64, src_w=64, h=16, w=16, sampler="uniform"))
    assert u["saliency"] == u["grid"] == 0 and u["total"] < p["total"]


def test_default_cost_model_nd_ratio():
    cfg = FSNetConfig(src_h=640, src_w=640, h=64, w=64)
    assert count_flops("fullres", cfg=cfg) / fsnet_flops(cfg)["total"] > 20
