import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from fovealseg.sampler import (
    KernelSpec, SamplingGrid, compute_grid, gaussian_kernel, subsample_labels,
    uniform_downsample, uniform_grid, unwarp, warp,
)
from oracles import bilinear_at, block_upsample, dense_grid


def test_kernel_center_and_size():
    k = gaussian_kernel(KernelSpec(1))
    assert k.shape == (3, 3)
    assert k[1, 1] == 1.0
    assert KernelSpec(16).size == 33


@pytest.mark.parametrize("sigma", [1, 2, 5])
def test_kernel_symmetry(sigma):
    k = gaussian_kernel(KernelSpec(sigma))
    np.testing.assert_array_equal(k, k.T)
    np.testing.assert_array_equal(k, k[::-1, ::-1])
    assert k.argmax() == k.size // 2 and (k > 0).all()


def test_kernel_rejects_bad_sigma():
    with pytest.raises(ValueError):
        KernelSpec(0)


def test_constant_saliency_near_uniform():
    H, W, h, w, s = 40, 48, 10, 12, 3
    g = compute_grid(torch.ones(H, W, dtype=torch.float64), h, w, KernelSpec(s))
    for i in range(h):
        for j in range(w):
            ri, rj = np.floor(i * H / h + 0.5), np.floor(j * W / w + 0.5)
            if ri - s >= 0 and ri + s <= H - 1:
                assert abs(g.gh[i, j] - i / h) <= 1 / H
            if rj - s >= 0 and rj + s <= W - 1:
                assert abs(g.gw[i, j] - j / w) <= 1 / W


def test_peak_attracts_samples():
    D = np.ones((16, 16))
    D[4, 4] = 100.0
    spec = KernelSpec(4)
    base_h, base_w = dense_grid(np.ones((16, 16)), 4, 4, 4)
    peak_h, peak_w = dense_grid(D, 4, 4, 4)
    g = compute_grid(torch.from_numpy(D), 4, 4, spec)
    # target (1, 1) sits at source (4, 4); its neighbours must move toward the peak
    for (i, j) in [(0, 0), (0, 1), (1, 0), (2, 2), (2, 1), (1, 2)]:
        before = np.hypot(base_h[i, j] - 0.25, base_w[i, j] - 0.25)
        after = np.hypot(peak_h[i, j] - 0.25, peak_w[i, j] - 0.25)
        assert after < before
    np.testing.assert_allclose(g.gh.numpy(), peak_h, atol=1e-12)
    np.testing.assert_allclose(g.gw.numpy(), peak_w, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(4, 24), st.integers(4, 24), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_grid_in_unit_square(H, W, sigma, seed):
    rng = np.random.default_rng(seed)
    h, w = rng.integers(1, H + 1), rng.integers(1, W + 1)
    D = rng.random((H, W)) * (rng.random((H, W)) < 0.5)
    g = compute_grid(torch.from_numpy(D), int(h), int(w), KernelSpec(sigma))
    assert float(g.gh.min()) >= 0 and float(g.gh.max()) <= 1
    assert float(g.gw.min()) >= 0 and float(g.gw.max()) <= 1


def test_grid_monotone_on_random_saliency():
    rng = np.random.default_rng(7)
    for _ in range(200):
        H, W = rng.integers(8, 33, size=2)
        h, w = rng.integers(2, H + 1), rng.integers(2, W + 1)
        D = rng.random((H, W)) + 1e-6
        g = compute_grid(torch.from_numpy(D), int(h), int(w), KernelSpec(int(rng.integers(1, 6))))
        assert (torch.diff(g.gh, dim=0) >= -1e-12).all()
        assert (torch.diff(g.gw, dim=1) >= -1e-12).all()


def test_all_zero_window_falls_back():
    D = torch.zeros(16, 16, dtype=torch.float64)
    D[12, 12] = 1.0  # only the window of target (3, 3) sees it
    g = compute_grid(D, 4, 4, KernelSpec(1))
    assert g.fallbacks == 15
    assert float(g.gh[0, 0]) == 0.0 and float(g.gw[1, 2]) == 0.5


def test_warp_uniform_nearest_is_uniform_downsample():
    F = torch.rand(3, 13, 17, dtype=torch.float64)
    for h, w in [(13, 17), (5, 7), (4, 4), (1, 1)]:
        out = warp(F, uniform_grid(13, 17, h, w), "nearest")
        torch.testing.assert_close(out, uniform_downsample(F, h, w), rtol=0, atol=0)


def test_bilinear_constant_image():
    F = torch.full((2, 9, 9), 0.3, dtype=torch.float64)
    g = SamplingGrid(torch.rand(4, 5, dtype=torch.float64), torch.rand(4, 5, dtype=torch.float64), (9, 9))
    torch.testing.assert_close(warp(F, g, "bilinear"), torch.full((2, 4, 5), 0.3, dtype=torch.float64))


def test_bilinear_row_pinned():
    F = torch.arange(4, dtype=torch.float64)[:, None].expand(4, 4).reshape(1, 4, 4)
    gh = torch.full((3, 3), 0.5, dtype=torch.float64)
    gw = torch.rand(3, 3, dtype=torch.float64)
    out = warp(F, SamplingGrid(gh, gw, (4, 4)), "bilinear")
    torch.testing.assert_close(out, torch.full((1, 3, 3), 1.5, dtype=torch.float64))
    # cross-check against the scalar oracle for a generic image
    G = torch.rand(6, 7, dtype=torch.float64)
    gh, gw = torch.rand(3, 4, dtype=torch.float64), torch.rand(3, 4, dtype=torch.float64)
    out = warp(G[None], SamplingGrid(gh, gw, (6, 7)), "bilinear")[0]
    for i in range(3):
        for j in range(4):
            ref = bilinear_at(G.numpy(), float(gh[i, j]) * 5, float(gw[i, j]) * 6)
            assert abs(float(out[i, j]) - ref) < 1e-12


def test_warp_shape_mismatch():
    with pytest.raises(ValueError):
        warp(torch.zeros(1, 8, 8), uniform_grid(9, 9, 3, 3))


def test_uniform_downsample_examples():
    F = (4 * np.arange(4)[:, None] + np.arange(4)[None, :])
    np.testing.assert_array_equal(uniform_downsample(F, 2, 2), [[0, 2], [8, 10]])
    np.testing.assert_array_equal(uniform_downsample(F, 4, 4), F)
    np.testing.assert_array_equal(uniform_downsample(np.full((7, 5), 2.0), 3, 2), np.full((3, 2), 2.0))


def test_unwarp_identity_and_constant():
    Y = np.random.default_rng(0).random((2, 6, 9))
    np.testing.assert_array_equal(unwarp(Y, uniform_grid(6, 9, 6, 9)), Y)
    out = unwarp(np.full((3, 4), 0.7), uniform_grid(9, 12, 3, 4))
    np.testing.assert_allclose(out, 0.7)


def test_unwarp_checkerboard_blocks():
    Y = (np.add.outer(np.arange(4), np.arange(4)) % 2).astype(float)
    np.testing.assert_array_equal(unwarp(Y, uniform_grid(8, 8, 4, 4)), block_upsample(Y, 2))


def test_unwarp_round_trip_integer_factor():
    rng = np.random.default_rng(3)
    for s in (2, 3, 4):
        F = rng.random((1, 4 * s, 5 * s))
        g = uniform_grid(4 * s, 5 * s, 4, 5)
        down = warp(torch.from_numpy(F), g, "nearest").numpy()
        np.testing.assert_array_equal(unwarp(down, g), block_upsample(uniform_downsample(F[0], 4, 5), s)[None])


def test_unwarp_fills_every_pixel_on_zoomed_grid():
    D = torch.full((32, 32), 1e-6, dtype=torch.float64)
    D[10:14, 10:14] = 1.0
    g = compute_grid(D, 8, 8, KernelSpec(6))
    out = unwarp(np.random.default_rng(1).random((8, 8)), g)
    assert out.shape == (32, 32) and np.isfinite(out).all()


def test_subsample_labels_cases():
    rng = np.random.default_rng(0)
    lab = rng.integers(0, 3, size=(6, 6))
    onehot = np.eye(3)[lab].transpose(2, 0, 1)
    np.testing.assert_array_equal(subsample_labels(onehot, uniform_grid(6, 6, 6, 6)), onehot)
    bg = np.zeros((3, 6, 6))
    bg[0] = 1
    out = subsample_labels(bg, uniform_grid(6, 6, 3, 3))
    assert (out[0] == 1).all()
    with pytest.raises(ValueError):
        subsample_labels(np.full((3, 6, 6), 0.5), uniform_grid(6, 6, 3, 3))


def test_single_pixel_ioi_survives_zoom():
    H = W = 32
    gi, gj = 13, 19  # not on the uniform lattice of stride 2
    onehot = np.zeros((2, H, W))
    onehot[0] = 1
    onehot[:, gi, gj] = [0, 1]
    assert subsample_labels(onehot, uniform_grid(H, W, 16, 16))[1].sum() == 0
    D = np.full((H, W), 1e-3)
    D[gi, gj] = 1.0
    g = compute_grid(torch.from_numpy(D), 16, 16, KernelSpec(3))
    assert subsample_labels(onehot, g)[1].sum() >= 1


def test_grid_bytes_round_trip():
    g = compute_grid(torch.rand(10, 12, dtype=torch.float64), 5, 6, KernelSpec(2))
    buf = g.to_bytes()
    assert len(buf) == 2 * 5 * 6 * 4
    back = SamplingGrid.from_bytes(buf, (5, 6), (10, 12))
    np.testing.assert_allclose(back.gh.numpy(), g.gh.numpy(), atol=1e-7)
    np.testing.assert_allclose(back.gw.numpy(), g.gw.numpy(), atol=1e-7)
