import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import finite_difference_check, total_variation
from sas_saliency.refine import (DeepParsing, ParsingConfig, bilateral_kernel, mean_field_message, quadratic_update,
                                 refine)


def brute_message(p, guide, cfg):
    """Loop-over-pixels kernel-weighted neighbour mean, guide is C x H x W."""
    H, W = p.shape
    r = cfg.window // 2
    out = np.zeros_like(p)
    for y in range(H):
        for x in range(W):
            num = den = 0.0
            for yy in range(max(0, y - r), min(H, y + r + 1)):
                for xx in range(max(0, x - r), min(W, x + r + 1)):
                    if yy == y and xx == x:
                        continue
                    f = np.sum((guide[:, yy, xx] - guide[:, y, x]) ** 2)
                    s = (yy - y) ** 2 + (xx - x) ** 2
                    k = np.exp(-f / (2 * cfg.feature_bandwidth ** 2) - s / (2 * cfg.spatial_bandwidth ** 2))
                    num += k * p[yy, xx]
                    den += k
            out[y, x] = num / den
    return out


def uniform_guide(h=8, w=8):
    return np.full((h, w, 3), 0.5)


class TestMessage:
    @pytest.mark.parametrize("window", [3, 5, 9])
    def test_matches_brute_force(self, rng, window):
        cfg = ParsingConfig(window=window, feature_bandwidth=0.3)
        p = rng.uniform(0, 1, (7, 9))
        g = rng.uniform(0, 1, (3, 7, 9))
        got = mean_field_message(torch.from_numpy(p)[None, None], torch.from_numpy(g)[None], cfg)[0, 0].numpy()
        np.testing.assert_allclose(got, brute_message(p, g, cfg), rtol=1e-12, atol=1e-14)

    def test_kernel_contraction_agrees(self, rng):
        cfg = ParsingConfig(window=5, feature_bandwidth=0.4)
        p = torch.from_numpy(rng.uniform(0, 1, (1, 1, 6, 6)))
        g = torch.from_numpy(rng.uniform(0, 1, (1, 3, 6, 6)))
        k = bilateral_kernel(g, cfg)
        patches = torch.nn.functional.unfold(torch.nn.functional.pad(p, (2,) * 4), 5).view(1, 25, 6, 6)
        ref = (k * patches).sum(1) / k.sum(1)
        np.testing.assert_allclose(mean_field_message(p, g, cfg)[:, 0].numpy(), ref.numpy(), rtol=1e-12)

    def test_centre_and_outside_taps_are_zero(self, rng):
        cfg = ParsingConfig(window=3)
        k = bilateral_kernel(torch.from_numpy(rng.uniform(0, 1, (1, 3, 4, 4))), cfg)
        assert torch.all(k[:, 4] == 0)
        # top-left pixel has no neighbours above or to the left
        np.testing.assert_array_equal(k[0, [0, 1, 2, 3, 6], 0, 0].numpy(), 0.0)


class TestUpdate:
    def test_zero_compatibility_is_identity(self, rng):
        for _ in range(10):
            p = rng.uniform(0, 1, (8, 8))
            np.testing.assert_allclose(refine(p, rng.uniform(0, 1, (8, 8, 3)), mu=0.0), p, atol=1e-9)

    def test_update_formula(self):
        p, m = torch.tensor([0.2, 0.9]), torch.tensor([0.6, 0.1])
        np.testing.assert_allclose(quadratic_update(p, m, torch.tensor(3.0)).numpy(), [0.5, 0.3], rtol=1e-6)

    def test_negative_weight_is_clamped(self, rng):
        mod = DeepParsing(ParsingConfig(window=3)).double()
        with torch.no_grad():
            mod.mu.fill_(-2.0)
        p = rng.uniform(0, 1, (6, 6))
        np.testing.assert_allclose(refine(p, uniform_guide(6, 6), module=mod), p, atol=1e-12)

    def test_checkerboard_moves_toward_half(self):
        board = np.where(np.indices((8, 8)).sum(0) % 2 == 0, 0.8, 0.2)
        out = refine(board, uniform_guide())
        inner = (slice(1, -1), slice(1, -1))
        assert np.all(np.abs(out[inner] - 0.5) < np.abs(board[inner] - 0.5))
        assert total_variation(out) < total_variation(board)

    def test_hard_edge_keeps_piecewise_constant_map(self):
        guide = np.zeros((8, 8, 3))
        guide[:, 4:] = 1.0
        m = np.where(np.arange(8)[None, :] < 4, 0.15, 0.85) * np.ones((8, 1))
        out = refine(m, guide, ParsingConfig(feature_bandwidth=0.05), mu=2.0)
        np.testing.assert_allclose(out, m, atol=1e-6)

    def test_horizontal_flip_commutes(self, rng):
        p = rng.uniform(0, 1, (8, 10))
        g = rng.uniform(0, 1, (8, 10, 3))
        cfg = ParsingConfig(window=5, feature_bandwidth=0.5)
        np.testing.assert_allclose(refine(p[:, ::-1], g[:, ::-1], cfg), refine(p, g, cfg)[:, ::-1], atol=1e-12)

    def test_size_mismatch(self):
        with pytest.raises(ValueError):
            DeepParsing()(torch.zeros(1, 1, 4, 4), torch.zeros(1, 3, 5, 4))

    @pytest.mark.parametrize("kw", [dict(window=4), dict(window=1), dict(feature_bandwidth=0.0),
                                    dict(init_compatibility=-1.0)])
    def test_bad_config(self, kw):
        with pytest.raises(ValueError):
            ParsingConfig(**kw)


maps = arrays(np.float64, (8, 8), elements=st.floats(0, 1, allow_nan=False))


class TestProperties:
    @given(maps, st.floats(0.05, 20))
    def test_bounded(self, p, mu):
        out = refine(p, uniform_guide(), mu=mu)
        assert out.min() >= p.min() - 1e-12 and out.max() <= p.max() + 1e-12

    @given(maps, st.floats(0.05, 20))
    def test_uniform_guide_reduces_tv(self, p, mu):
        if np.ptp(p) < 1e-6:
            return
        assert total_variation(refine(p, uniform_guide(), mu=mu)) < total_variation(p)

    @given(st.floats(0, 1), st.floats(0, 20))
    def test_constant_map_fixed(self, c, mu):
        p = np.full((6, 6), c)
        np.testing.assert_allclose(refine(p, np.random.default_rng(0).uniform(0, 1, (6, 6, 3)), mu=mu), p, atol=1e-12)


class TestGradients:
    def test_finite_difference(self, rng):
        mod = DeepParsing(ParsingConfig(window=5, feature_bandwidth=0.5)).double()
        p = torch.tensor(rng.uniform(0.1, 0.9, (1, 1, 8, 8)), requires_grad=True)
        g = torch.tensor(rng.uniform(0, 1, (1, 3, 8, 8)), requires_grad=True)
        w = torch.from_numpy(rng.normal(size=(1, 1, 8, 8)))
        err = finite_difference_check(lambda: (mod(p, g) * w).sum(), [p, g, mod.mu], n_probe=40)
        assert err < 1e-4
