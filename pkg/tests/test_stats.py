import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from despeckle.stats import (
    RAYLEIGH_SNR,
    FeatureMap,
    aggregate_rho,
    below_threshold,
    local_moments,
    mine_negative_regions,
    read_flat_array,
    rho_map,
    sample_anchors,
    snr_ratio,
    window_moments,
    write_flat_array,
)


def _brute_moments(x, i, j, s):
    """Double loop over the window, one channel at a time."""
    r = s // 2
    c = x.shape[0]
    mu, var = np.zeros(c), np.zeros(c)
    for ch in range(c):
        vals = []
        for di in range(-r, r + 1):
            for dj in range(-r, r + 1):
                vals.append(x[ch, i + di, j + dj])
        m = sum(vals) / len(vals)
        mu[ch] = m
        var[ch] = sum((v - m) ** 2 for v in vals) / len(vals)
    return mu, var


def _window_rho_numpy(windows):
    """Population-std ratio for an array of flattened windows (..., s*s)."""
    return windows.mean(-1) / windows.std(-1)


class TestAnchors:
    def test_forced_centre(self):
        assert sample_anchors(5, 5, 1, window=5, seed=0) == [(2, 2)]

    def test_interior_and_distinct(self):
        pts = sample_anchors(56, 56, 256, window=5, seed=3)
        assert len(pts) == 256 == len(set(pts))
        eligible = {(i, j) for i in range(2, 54) for j in range(2, 54)}
        assert set(pts) <= eligible

    def test_deterministic(self):
        assert sample_anchors(20, 30, 10, 3, seed=9) == sample_anchors(20, 30, 10, 3, seed=9)

    def test_too_many(self):
        with pytest.raises(ValueError):
            sample_anchors(5, 5, 2, window=5)

    @pytest.mark.parametrize("window", [0, 4, -3])
    def test_bad_window(self, window):
        with pytest.raises(ValueError):
            sample_anchors(10, 10, 1, window=window)

    def test_uniform_coverage(self):
        # every one of the 4 interior cells should be drawn about equally often
        counts = np.zeros((2, 2))
        for seed in range(4000):
            (i, j), = sample_anchors(4, 4, 1, window=3, seed=seed)
            counts[i - 1, j - 1] += 1
        assert np.all(np.abs(counts - 1000) < 4 * math.sqrt(1000 * 0.75))


class TestMoments:
    def test_constant(self):
        mu, var = local_moments(torch.full((3, 7, 7), 2.5, dtype=torch.float64), (3, 3), 5)
        assert torch.all(mu == 2.5) and torch.all(var == 0)

    def test_one_to_nine(self):
        x = torch.arange(1, 10, dtype=torch.float64).reshape(1, 3, 3)
        mu, var = local_moments(x, (1, 1), 3)
        assert mu.item() == pytest.approx(5.0, abs=1e-12)
        assert var.item() == pytest.approx(60 / 9, abs=1e-12)

    def test_channel_scaling(self):
        rng = np.random.default_rng(0)
        base = rng.random((9, 9))
        x = torch.tensor(np.stack([base, 2 * base]))
        mu, var = local_moments(x, (4, 4), 5)
        assert mu[1].item() == pytest.approx(2 * mu[0].item(), rel=1e-12)
        assert var[1].item() == pytest.approx(4 * var[0].item(), rel=1e-12)

    @pytest.mark.parametrize("window", [3, 5, 7])
    def test_brute_force(self, window):
        rng = np.random.default_rng(window)
        x = rng.normal(size=(3, 15, 17))
        centers = sample_anchors(15, 17, 20, window, seed=1)
        mu, var = window_moments(torch.tensor(x), centers, window)
        for k, (i, j) in enumerate(centers):
            bm, bv = _brute_moments(x, i, j, window)
            np.testing.assert_allclose(mu[k].numpy(), bm, atol=1e-10)
            np.testing.assert_allclose(var[k].numpy(), bv, atol=1e-10)

    def test_border_crossing(self):
        with pytest.raises(ValueError):
            local_moments(torch.zeros(1, 6, 6), (1, 3), 5)

    def test_feature_map_validation(self):
        with pytest.raises(ValueError):
            FeatureMap(torch.zeros(4), branch="noisy")
        with pytest.raises(ValueError):
            FeatureMap(torch.zeros(1, 3, 3), branch="other")


class TestRatio:
    def test_arithmetic(self):
        rho = snr_ratio(torch.tensor([5.0], dtype=torch.float64), torch.tensor([60 / 9], dtype=torch.float64))
        assert rho.item() == pytest.approx(5 / math.sqrt(60 / 9), abs=1e-12)
        assert rho.item() == pytest.approx(1.9365, abs=1e-4)

    def test_degenerate(self):
        rho = snr_ratio(torch.tensor([1.0, 0.0, -1.0]), torch.zeros(3))
        assert rho[0] == math.inf
        assert torch.isnan(rho[1]) and torch.isnan(rho[2])

    def test_negative_variance(self):
        with pytest.raises(ValueError):
            snr_ratio(torch.ones(1), -torch.ones(1))

    def test_aggregate(self):
        assert aggregate_rho(torch.tensor([1.0, 3.0, math.inf, math.nan])).item() == 2.0
        assert aggregate_rho(torch.tensor([math.inf, math.nan])).item() == math.inf
        assert math.isnan(aggregate_rho(torch.tensor([math.nan])).item())

    def test_rayleigh_window_converges(self):
        rng = np.random.default_rng(0)
        x = torch.tensor(rng.rayleigh(1.0, size=(1, 301, 301)))
        mu, var = local_moments(x, (150, 150), 301)
        assert abs(snr_ratio(mu, var).item() - RAYLEIGH_SNR) < 0.05

    def test_scale_invariance(self):
        rng = np.random.default_rng(1)
        x = torch.tensor(rng.random((3, 12, 12)) + 0.1)
        lam = torch.tensor([0.5, 2.0, 7.0], dtype=torch.float64)[:, None, None]
        a, b = rho_map(x, 5), rho_map(x * lam, 5)
        inner = ~torch.isnan(a)
        torch.testing.assert_close(a[inner], b[inner], rtol=1e-12, atol=0)

    def test_shift_equivariance(self):
        rng = np.random.default_rng(2)
        x = torch.tensor(rng.random((2, 20, 20)) + 0.1)
        a = rho_map(x, 3)
        b = rho_map(torch.roll(x, shifts=(2, 3), dims=(1, 2)), 3)
        # interior positions whose windows did not wrap
        torch.testing.assert_close(b[6:19, 7:19], a[4:17, 4:16], rtol=1e-12, atol=0)

    def test_rho_map_matches_pointwise(self):
        rng = np.random.default_rng(3)
        x = torch.tensor(rng.random((2, 9, 10)) + 0.05)
        m = rho_map(x, 5)
        assert torch.isnan(m[0]).all() and torch.isnan(m[:, -1]).all()
        for i in range(2, 7):
            for j in range(2, 8):
                mu, var = local_moments(x, (i, j), 5)
                assert m[i, j].item() == pytest.approx(aggregate_rho(snr_ratio(mu, var)).item(), rel=1e-12)


class TestMining:
    def test_constant_map_empty(self):
        fm = torch.full((4, 16, 16), 0.3)
        out = mine_negative_regions(fm, sample_anchors(16, 16, 20, 5), 5, 1.92)
        assert len(out) == 0
        assert out.features().numel() == 0

    def test_bad_tau(self):
        with pytest.raises(ValueError):
            mine_negative_regions(torch.ones(1, 8, 8), [(3, 3)], 5, 0.0)

    def test_rayleigh_selection_rate(self):
        # oracle: selection probability from 10^6 independent 5x5 windows
        rng = np.random.default_rng(100)
        p = float(np.mean(_window_rho_numpy(rng.rayleigh(size=(10**6, 25))) < 1.92))
        assert 0 < p < 1
        # 10^4 trials: one anchor per independent 5x5 map, stacked as 10^4 disjoint tiles
        tiles = rng.rayleigh(size=(100, 100, 5, 5))
        fm = torch.tensor(tiles.transpose(0, 2, 1, 3).reshape(1, 500, 500))
        anchors = [(5 * a + 2, 5 * b + 2) for a in range(100) for b in range(100)]
        rate = len(mine_negative_regions(fm, anchors, 5, 1.92)) / 10**4
        assert rate > 0
        assert abs(rate - p) < 4 * math.sqrt(p * (1 - p) / 10**4)

    def test_noisy_patch_selected(self):
        rng = np.random.default_rng(4)
        fm = np.full((2, 30, 30), 1.0) + 0.001 * rng.random((2, 30, 30))
        fm[:, 10:15, 10:15] = rng.normal(0, 1, (2, 5, 5))
        anchors = [(12, 12), (4, 4), (25, 25), (4, 25)]
        out = mine_negative_regions(torch.tensor(fm), anchors, 5, 1.92)
        assert out.centers == [(12, 12)]
        assert all(r.score < 1.92 for r in out.regions)
        torch.testing.assert_close(out.features()[0], torch.tensor(fm[:, 10:15, 10:15].mean((1, 2))))

    @settings(max_examples=40, deadline=None)
    @given(t1=st.floats(0.1, 5.0), t2=st.floats(0.1, 5.0), seed=st.integers(0, 10**6))
    def test_threshold_monotone(self, t1, t2, seed):
        lo, hi = min(t1, t2), max(t1, t2)
        fm = torch.tensor(np.random.default_rng(seed).rayleigh(size=(3, 16, 16)))
        anchors = sample_anchors(16, 16, 30, 5, seed)
        a = set(mine_negative_regions(fm, anchors, 5, lo).centers)
        b = set(mine_negative_regions(fm, anchors, 5, hi).centers)
        assert a <= b

    def test_negatives_keep_gradients(self):
        fm = torch.tensor(np.random.default_rng(5).normal(size=(2, 9, 9)), requires_grad=True)
        out = mine_negative_regions(fm, [(4, 4)], 5, 100.0)
        out.features().sum().backward()
        assert fm.grad is not None and fm.grad.abs().sum() > 0


def test_below_threshold_and_flat_array(tmp_path):
    m = rho_map(torch.tensor(np.random.default_rng(6).rayleigh(size=(1, 12, 12))), 3)
    hits = below_threshold(m, 1.92)
    assert all(v < 1.92 for _, _, v in hits)
    assert len(hits) == int((m < 1.92).sum())
    write_flat_array(m.numpy()[None], tmp_path / "rho.bin")
    back = read_flat_array(tmp_path / "rho.bin")
    assert back.shape == (1, 12, 12)
    np.testing.assert_array_equal(back[0], m.numpy())
    assert (tmp_path / "rho.bin").read_bytes().startswith(b"float64 1 12 12\n")
