import numpy as np
import pytest
import torch

from oracles import bilinear_half_pixel, nearest_rank_quantile
from ulsad.errors import CalibrationError, ConfigError, ShapeError
from ulsad.features import flatten
from ulsad.inference import (
    AnomalyMap,
    QuantileCalibration,
    combine_maps,
    empirical_quantile,
    fit_quantiles,
    global_map,
    image_score,
    local_map,
    normalize_map,
    upsample_map,
)
from ulsad.local_branch import LossConfig, loss_pl
from ulsad.metrics import auroc, pixel_auroc


class TestBranchMaps:
    def test_perfect_reconstruction_zero(self, rng):
        u = torch.from_numpy(rng.normal(size=(6, 4, 5)))
        assert torch.allclose(local_map(u, u.clone()), torch.zeros(4, 5, dtype=torch.float64), atol=1e-12)
        assert torch.allclose(global_map(u, u.clone()), torch.zeros(4, 5, dtype=torch.float64), atol=1e-12)

    def test_single_position_hand_case(self):
        a = torch.tensor([1.0, 0.0], dtype=torch.float64).view(2, 1, 1)
        b = torch.tensor([0.0, 1.0], dtype=torch.float64).view(2, 1, 1)
        assert local_map(b, a, LossConfig(lambda_l=0.5)).item() == pytest.approx(2.5, abs=1e-12)
        assert global_map(a, b, LossConfig(lambda_g=0.5)).item() == pytest.approx(2.5, abs=1e-12)

    def test_mean_reconciles_with_patch_loss(self, rng):
        u = torch.from_numpy(rng.normal(size=(5, 4, 6)))
        rec = torch.from_numpy(rng.normal(size=(5, 4, 6)))
        cfg = LossConfig(lambda_l=0.7)
        m = local_map(u, rec, cfg)
        assert m.mean().item() == pytest.approx(loss_pl(flatten(rec), flatten(u), cfg).item(), abs=1e-6)
        assert (m >= 0).all()

    def test_global_uses_lambda_g(self, rng):
        a = torch.from_numpy(rng.normal(size=(3, 2, 2)))
        b = torch.from_numpy(rng.normal(size=(3, 2, 2)))
        lo = global_map(a, b, LossConfig(lambda_l=5.0, lambda_g=0.0))
        assert torch.allclose(lo, ((a - b) ** 2).sum(0))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            local_map(torch.zeros(2, 3, 3), torch.zeros(2, 3, 4))


class TestQuantiles:
    def test_one_to_hundred(self):
        pool = np.arange(1, 101, dtype=float)
        rng = np.random.default_rng(0)
        shuffled = rng.permutation(pool)
        cal = fit_quantiles([shuffled[:37].reshape(1, 37), shuffled[37:].reshape(9, 7)], None, 0.9, 0.99)
        assert cal.q_alpha_l == 90.0 == nearest_rank_quantile(pool, 0.9)
        assert cal.q_beta_l == 99.0 == nearest_rank_quantile(pool, 0.99)

    def test_matches_sort_and_index_oracle(self, rng):
        for _ in range(30):
            v = rng.normal(size=int(rng.integers(1, 300)))
            level = float(rng.uniform(0.01, 0.999))
            assert empirical_quantile(v, level) == nearest_rank_quantile(v, level)

    def test_order_independent(self, rng):
        maps = [rng.gamma(2.0, size=(4, 4)) for _ in range(5)]
        a = fit_quantiles(maps, maps[::-1])
        b = fit_quantiles(maps[::-1], maps)
        assert a == b

    def test_constant_pool_is_degenerate(self):
        with pytest.raises(CalibrationError):
            fit_quantiles([np.ones((4, 4))], None)

    def test_empty(self):
        with pytest.raises(CalibrationError):
            fit_quantiles([], None)

    def test_bad_levels(self):
        with pytest.raises(ConfigError):
            fit_quantiles([np.arange(10.0)], None, alpha=0.99, beta=0.9)

    def test_fraction_below_alpha(self, rng):
        maps = [rng.gamma(2.0, size=(16, 16)) for _ in range(10)]
        cal = fit_quantiles(maps, None, 0.9, 0.995)
        pooled = np.concatenate([m.ravel() for m in maps])
        assert abs(np.mean(pooled <= cal.q_alpha_l) - 0.9) < 1 / pooled.size + 1e-12


class TestNormalize:
    def test_endpoints(self):
        assert normalize_map(np.array(1.7), 1.7, 4.2) == 0.0
        assert normalize_map(np.array(4.2), 1.7, 4.2) == 0.1

    def test_affine(self):
        assert normalize_map(np.array(5.0), 1.0, 3.0) == pytest.approx(0.2)

    def test_degenerate(self):
        with pytest.raises(CalibrationError):
            normalize_map(np.ones(3), 2.0, 2.0)

    def test_anomaly_map_flag(self):
        m = normalize_map(AnomalyMap(np.ones((2, 2)), "local"), 0.0, 1.0)
        assert m.calibrated and m.kind == "local"

    def test_auroc_unchanged(self, rng):
        s = rng.gamma(2.0, size=100)
        y = rng.integers(0, 2, size=100)
        y[:2] = [0, 1]
        assert abs(auroc(normalize_map(s, 1.1, 5.3), y) - auroc(s, y)) <= 1e-12
        maps = [rng.gamma(2.0, size=(6, 6)) for _ in range(3)]
        masks = [rng.random((6, 6)) > 0.8 for _ in range(3)]
        norm = [normalize_map(m, 1.1, 5.3) for m in maps]
        assert abs(pixel_auroc(norm, masks) - pixel_auroc(maps, masks)) <= 1e-12


class TestCombine:
    def _cal(self, data, kind="local"):
        return AnomalyMap(data, kind, calibrated=True)

    def test_equal_maps(self, rng):
        v = rng.normal(size=(3, 3))
        assert np.array_equal(combine_maps(self._cal(v), self._cal(v, "global")).data, v)

    def test_zero_and_v(self, rng):
        v = rng.normal(size=(3, 3))
        out = combine_maps(self._cal(np.zeros((3, 3))), self._cal(v, "global"))
        np.testing.assert_allclose(out.data, v / 2)

    def test_commutative_and_bounded(self, rng):
        a, b = rng.normal(size=(4, 4)), rng.normal(size=(4, 4))
        ab = combine_maps(self._cal(a), self._cal(b)).data
        ba = combine_maps(self._cal(b), self._cal(a)).data
        assert np.array_equal(ab, ba)
        assert np.all(ab >= np.minimum(a, b)) and np.all(ab <= np.maximum(a, b))

    def test_uncalibrated_rejected(self):
        with pytest.raises(CalibrationError):
            combine_maps(AnomalyMap(np.zeros((2, 2))), self._cal(np.zeros((2, 2))))


class TestScore:
    def test_zero_map(self):
        assert image_score(np.zeros((4, 4))) == 0.0

    def test_spike(self):
        m = np.zeros((5, 5))
        m[3, 1] = 0.7
        assert image_score(m) == 0.7

    def test_permutation_invariant(self, rng):
        m = rng.normal(size=(6, 6))
        assert image_score(rng.permutation(m.ravel()).reshape(6, 6)) == image_score(m)

    def test_empty(self):
        with pytest.raises(ShapeError):
            image_score(np.zeros((0, 3)))


class TestUpsample:
    def test_constant(self):
        out = upsample_map(np.full((4, 4), 2.5), 16, sigma=4.0)
        np.testing.assert_allclose(out, 2.5, atol=1e-12)
        assert out.shape == (16, 16)

    def test_hot_pixel_tent(self):
        src = np.zeros((4, 4))
        src[1, 2] = 1.0
        out = upsample_map(src, 16, sigma=0)
        np.testing.assert_allclose(out, bilinear_half_pixel(src, 16), atol=1e-12)

    def test_random_matches_oracle(self, rng):
        src = rng.normal(size=(5, 5))
        np.testing.assert_allclose(upsample_map(src, 15, sigma=0), bilinear_half_pixel(src, 15), atol=1e-12)

    def test_argmax_preserved(self):
        yy, xx = np.mgrid[:8, :8]
        src = np.exp(-((yy - 5) ** 2 + (xx - 2) ** 2) / 4.0)
        out = upsample_map(src, 32, sigma=0)
        r, c = np.unravel_index(np.argmax(out), out.shape)
        assert (r // 4, c // 4) == (5, 2)

    def test_downscale_rejected(self):
        with pytest.raises(ShapeError):
            upsample_map(np.zeros((8, 8)), 4)

    def test_batch(self, rng):
        src = rng.normal(size=(3, 4, 4))
        out = upsample_map(src, 8, sigma=1.0)
        assert out.shape == (3, 8, 8)
        np.testing.assert_allclose(out[1], upsample_map(src[1], 8, sigma=1.0))


class TestCalibrationRecord:
    def test_order_guard(self):
        with pytest.raises(CalibrationError):
            QuantileCalibration(1.0, 1.0)
        with pytest.raises(CalibrationError):
            QuantileCalibration(0.0, 1.0, 2.0, 1.0)
