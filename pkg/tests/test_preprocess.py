import math

import numpy as np
import pytest

from patchfm.errors import DataError, DataWarning, ShapeError
from patchfm.preprocess import (
    MaskSet,
    NormStats,
    TimeSeries,
    adaptive_cpm_block,
    denormalize,
    make_windowed_sample,
    mask_aware_stats,
    normalize_asinh,
    pad_or_truncate,
    patchify,
    sample_cpm_mask,
)


def series(values, id="s", freq="H", start="2020-01-01T00:00:00"):
    return TimeSeries(id=id, freq=freq, start=start, values=np.asarray(values, dtype=float))


class TestPadOrTruncate:
    def test_left_pad(self):
        vals, pad, miss = pad_or_truncate(series([1, 2, 3, 4, 5]), T=8)
        assert np.array_equal(pad, [1, 1, 1, 0, 0, 0, 0, 0])
        assert np.array_equal(vals, [0, 0, 0, 1, 2, 3, 4, 5])
        assert not miss.any()

    def test_truncate_keeps_most_recent(self):
        vals, pad, _ = pad_or_truncate(series(range(10)), T=8)
        assert np.array_equal(vals, np.arange(2, 10, dtype=float))
        assert not pad.any()

    def test_missing_flag_aligned(self):
        raw = [1.0, 2.0, np.nan, 4.0]
        vals, pad, miss = pad_or_truncate(series(raw), T=6)
        assert np.array_equal(miss, [0, 0, 0, 0, 1, 0])
        assert vals[4] == 0.0  # stored fill value

    def test_empty_series_rejected(self):
        with pytest.raises(DataError):
            TimeSeries(id="x", freq="H", start="2020", values=np.array([]))


class TestAdaptiveCpm:
    @pytest.mark.parametrize(
        "T_x,L,n_cpm,expected",
        [(40, 16, 8, 1), (8192, 16, 8, 8), (256, 16, 8, 4), (64, 16, 8, 1), (320, 16, 8, 5)],
    )
    def test_formula(self, T_x, L, n_cpm, expected):
        # direct evaluation of min(ceil(ceil(T_x/L)/4), n_cpm)
        assert adaptive_cpm_block(T_x, L, n_cpm) == expected
        assert adaptive_cpm_block(T_x, L, n_cpm) == min(
            math.ceil(math.ceil(T_x / L) / 4), n_cpm
        )


class TestCpmMask:
    def test_determinism(self):
        valid = np.ones(512, dtype=bool)
        m1 = sample_cpm_mask(np.random.default_rng(5), 512, 16, 4, 0.4, valid)
        m2 = sample_cpm_mask(np.random.default_rng(5), 512, 16, 4, 0.4, valid)
        assert np.array_equal(m1, m2)

    def test_single_patch_blocks_when_n_cpm_eff_is_one(self):
        valid = np.ones(256, dtype=bool)
        rng = np.random.default_rng(3)
        m = sample_cpm_mask(rng, 256, 16, 1, 0.4, valid)
        runs = _mask_runs(m)
        # interior runs are exactly one patch; the tail run may be shorter/merged
        for start, length in runs[:-1]:
            assert length == 16

    def test_ratio_bounds_and_contiguity_over_seeds(self):
        T, L, n_eff, ratio = 1024, 16, 4, 0.4
        valid = np.ones(T, dtype=bool)
        block = n_eff * L
        for seed in range(300):
            m = sample_cpm_mask(np.random.default_rng(seed), T, L, n_eff, ratio, valid)
            frac = m.sum() / T
            assert ratio <= frac <= ratio + block / T + 1e-12, seed
            for start, length in _mask_runs(m)[:-1]:
                assert length == block, (seed, start, length)

    def test_valid_region_shorter_than_block_degrades_to_tail(self):
        valid = np.zeros(64, dtype=bool)
        valid[-10:] = True
        with pytest.warns(DataWarning):
            m = sample_cpm_mask(np.random.default_rng(0), 64, 16, 2, 0.4, valid)
        assert m.sum() >= 1
        assert (~m & valid).sum() >= 2  # stats still possible
        assert not m[:-10].any()

    def test_never_masks_outside_data_region(self):
        valid = np.zeros(256, dtype=bool)
        valid[100:] = True  # left padding before index 100
        for seed in range(50):
            m = sample_cpm_mask(np.random.default_rng(seed), 256, 16, 2, 0.5, valid)
            assert not m[:100].any()


def _mask_runs(mask):
    runs = []
    start = None
    for i, v in enumerate(mask):
        if v and start is None:
            start = i
        elif not v and start is not None:
            runs.append((start, i - start))
            start = None
    if start is not None:
        runs.append((start, len(mask) - start))
    return runs


class TestStats:
    def test_hand_evaluated_case(self):
        # visible {1,2,3}, masked {100}: mu=2, sigma=sqrt(2/3)
        values = np.array([1.0, 2.0, 3.0, 100.0])
        union = np.array([False, False, False, True])
        st = mask_aware_stats(values, union)
        assert st.mu == pytest.approx(2.0)
        assert st.sigma == pytest.approx(math.sqrt(2.0 / 3.0), abs=1e-12)

    def test_constant_series_clamps_sigma(self):
        st = mask_aware_stats(np.full(8, 5.0), np.zeros(8, dtype=bool))
        assert st.mu == 5.0
        assert st.sigma == 1e-6 * 5.0

    def test_masked_values_cannot_leak(self):
        rng = np.random.default_rng(1)
        values = rng.normal(size=64)
        union = rng.random(64) < 0.4
        union[:2] = False
        st1 = mask_aware_stats(values, union)
        perturbed = values.copy()
        perturbed[union] += 1e6
        st2 = mask_aware_stats(perturbed, union)
        assert st1.mu == st2.mu and st1.sigma == st2.sigma  # bit-identical

    def test_too_few_visible(self):
        with pytest.raises(DataError):
            mask_aware_stats(np.ones(4), np.array([True, True, True, False]))


class TestNormalize:
    def test_center_maps_to_zero(self):
        st = NormStats(mu=3.0, sigma=2.0)
        assert normalize_asinh(np.array([3.0]), st)[0] == 0.0

    def test_inverse_construction(self):
        st = NormStats(mu=3.0, sigma=2.0)
        x = 3.0 + 2.0 * math.sinh(1.0)
        assert normalize_asinh(np.array([x]), st)[0] == pytest.approx(1.0, abs=1e-12)

    def test_affine_invariance(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=128) * 4 + 1
        union = rng.random(128) < 0.3
        for a in (0.5, 3.0, 100.0):
            b = rng.normal() * 10
            s1 = mask_aware_stats(x, union)
            s2 = mask_aware_stats(a * x + b, union)
            n1 = normalize_asinh(x, s1)
            n2 = normalize_asinh(a * x + b, s2)
            assert np.allclose(n1, n2, atol=1e-10)

    def test_denormalize_examples(self):
        st = NormStats(mu=10.0, sigma=2.0)
        assert denormalize(np.array([0.0]), st)[0] == 10.0
        assert denormalize(np.array([1.0]), st)[0] == pytest.approx(10 + 2 * math.sinh(1.0))
        # round trip
        rng = np.random.default_rng(3)
        x = rng.normal(size=32) * 7 + 2
        st = mask_aware_stats(x, np.zeros(32, dtype=bool))
        rt = denormalize(normalize_asinh(x, st), st)
        assert np.allclose(rt, x, rtol=1e-9)


class TestPatchify:
    def masks(self, T, n_pad):
        pad = np.zeros(T, dtype=bool)
        pad[:n_pad] = True
        return MaskSet(pred=np.zeros(T, dtype=bool), miss=np.zeros(T, dtype=bool), pad=pad)

    def test_two_patches(self):
        p, pm, pp = patchify(np.arange(32, dtype=float), self.masks(32, 0), 16)
        assert p.shape == (2, 16) and pm.shape == (2, 16) and pp.shape == (2,)

    def test_partial_padding_is_not_a_pad_patch(self):
        _, _, pp = patchify(np.zeros(32), self.masks(32, 3), 16)
        assert not pp.any()

    def test_full_patch_padding(self):
        _, _, pp = patchify(np.zeros(32), self.masks(32, 16), 16)
        assert np.array_equal(pp, [True, False])

    def test_divisibility(self):
        with pytest.raises(ShapeError):
            patchify(np.zeros(33), self.masks(33, 0), 16)


class TestWindowedSample:
    def test_masked_positions_zero_filled(self):
        rng = np.random.default_rng(4)
        values = rng.normal(size=64) + 10
        pred = np.zeros(64, dtype=bool)
        pred[-8:] = True
        sample = make_windowed_sample(values, np.zeros(64, bool), np.zeros(64, bool), pred)
        assert np.all(sample.x_norm[pred] == 0.0)
        assert np.all(sample.x_norm[~pred] != 0.0)
        assert sample.targets.shape == (8,)
        assert np.array_equal(sample.targets, values[-8:])

    def test_leakage_exclusion_bit_identical(self):
        rng = np.random.default_rng(5)
        for trial in range(100):
            values = rng.normal(size=64) * rng.uniform(0.5, 20)
            pred = rng.random(64) < 0.4
            pred[:4] = False
            s1 = make_windowed_sample(values, np.zeros(64, bool), np.zeros(64, bool), pred)
            perturbed = values.copy()
            perturbed[pred] += np.where(rng.random(pred.sum()) < 0.5, 1e6, -1e6)
            s2 = make_windowed_sample(perturbed, np.zeros(64, bool), np.zeros(64, bool), pred)
            assert s1.stats.mu == s2.stats.mu
            assert s1.stats.sigma == s2.stats.sigma
            assert np.array_equal(s1.x_norm, s2.x_norm)  # zero-filled at pred

    def test_pred_on_padding_rejected(self):
        pred = np.zeros(8, dtype=bool)
        pad = np.zeros(8, dtype=bool)
        pred[0] = pad[0] = True
        with pytest.raises(DataError):
            MaskSet(pred=pred, miss=np.zeros(8, bool), pad=pad)
