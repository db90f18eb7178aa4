import numpy as np
import pytest

from oracles import brute_aupro, pairwise_auroc, sweep_pro
from ulsad.errors import MetricError
from ulsad.inference import normalize_map
from ulsad.metrics import aupro, auroc, pixel_auroc, pro_curve


class TestAuroc:
    def test_perfect(self):
        assert auroc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0

    def test_hand_value(self):
        assert auroc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75

    def test_all_ties(self):
        assert auroc([0.3] * 6, [0, 1, 0, 1, 1, 0]) == 0.5

    def test_single_class(self):
        with pytest.raises(MetricError):
            auroc([0.1, 0.2], [1, 1])

    def test_matches_pairwise_oracle(self, rng):
        for _ in range(100):
            n = int(rng.integers(2, 201))
            labels = rng.integers(0, 2, size=n)
            labels[0], labels[1] = 0, 1
            scores = np.round(rng.normal(size=n), 1)  # rounding produces ties
            assert auroc(scores, labels) == pairwise_auroc(scores, labels)

    def test_flip_labels(self, rng):
        s = rng.normal(size=50)
        y = rng.integers(0, 2, size=50)
        y[:2] = [0, 1]
        assert auroc(s, 1 - y) == pytest.approx(1 - auroc(s, y), abs=1e-12)

    def test_monotone_invariance(self, rng):
        s = rng.gamma(2.0, size=80)
        y = rng.integers(0, 2, size=80)
        y[:2] = [0, 1]
        assert auroc(normalize_map(s, 0.5, 3.0), y) == auroc(s, y)
        assert auroc(np.log(s), y) == auroc(s, y)


class TestPixelAuroc:
    def test_map_equals_mask(self):
        mask = np.zeros((6, 6))
        mask[2:4, 1:5] = 1
        assert pixel_auroc([mask.copy()], [mask]) == 1.0

    def test_inverted(self):
        mask = np.zeros((6, 6))
        mask[2:4, 1:5] = 1
        assert pixel_auroc([1 - mask], [mask]) == 0.0

    def test_pooled_definition(self, rng):
        maps = [rng.normal(size=(5, 5)) for _ in range(3)]
        masks = [rng.random((5, 5)) > 0.7 for _ in range(3)]
        flat = auroc(np.concatenate([m.ravel() for m in maps]), np.concatenate([g.ravel() for g in masks]))
        assert pixel_auroc(maps, masks) == flat

    def test_all_normal(self):
        with pytest.raises(MetricError):
            pixel_auroc([np.ones((3, 3))], [np.zeros((3, 3))])


def _random_masked_maps(rng, n_items, size):
    maps, masks = [], []
    for _ in range(n_items):
        m = np.zeros((size, size), dtype=bool)
        for _ in range(int(rng.integers(1, 4))):
            r, c = rng.integers(0, size, size=2)
            hh, ww = rng.integers(1, max(2, size // 3), size=2)
            m[r:r + hh, c:c + ww] = True
        s = np.round(rng.normal(size=(size, size)) + 1.5 * m, 2)
        maps.append(s)
        masks.append(m)
    return maps, masks


class TestAupro:
    def test_perfect_map(self):
        mask = np.zeros((8, 8))
        mask[1:3, 1:3] = 1
        mask[5:7, 4:8] = 1
        assert aupro([mask.astype(float)], [mask]) == pytest.approx(1.0, abs=1e-12)

    def test_constant_map(self):
        mask = np.zeros((4, 4))
        mask[0:2, 0:2] = 1
        value = aupro([np.full((4, 4), 0.5)], [mask])
        # curve is (0,0) -> (1,1); area up to 0.3 is 0.045
        assert brute_aupro([np.full((4, 4), 0.5)], [mask]) == pytest.approx(0.15, abs=1e-12)
        assert value == pytest.approx(0.15, abs=1e-12)

    def test_two_regions_half_detected(self):
        mask = np.zeros((8, 8), dtype=bool)
        mask[1:3, 1:3] = True
        mask[5:8, 5:8] = True
        score = np.zeros((8, 8))
        score[1:3, 1:3] = 1.0  # first region found, second missed
        fpr, pro = pro_curve([score], [mask])
        # at threshold 1.0: no false positives, one of two regions covered
        assert fpr[1] == 0.0 and pro[1] == pytest.approx(0.5)
        f2, p2 = sweep_pro([score], [mask])
        assert f2[1] == 0.0 and p2[1] == pytest.approx(0.5)

    def test_diagonal_touching_is_one_region(self):
        mask = np.zeros((4, 4), dtype=bool)
        mask[0, 0] = mask[1, 1] = True
        score = np.zeros((4, 4))
        score[0, 0] = 1.0
        fpr, pro = pro_curve([score], [mask])
        assert pro[1] == pytest.approx(0.5)  # one 8-connected region, half covered

    def test_matches_threshold_sweep_oracle(self, rng):
        for _ in range(50):
            size = int(rng.integers(4, 17))
            maps, masks = _random_masked_maps(rng, int(rng.integers(1, 3)), size)
            if all(m.all() for m in masks):
                continue
            assert aupro(maps, masks) == pytest.approx(brute_aupro(maps, masks), abs=1e-6)

    def test_full_range(self, rng):
        maps, masks = _random_masked_maps(rng, 2, 10)
        assert aupro(maps, masks, fpr_limit=1.0) == pytest.approx(brute_aupro(maps, masks, 1.0), abs=1e-9)

    def test_no_regions(self):
        with pytest.raises(MetricError):
            aupro([np.ones((4, 4))], [np.zeros((4, 4))])

    def test_bad_limit(self):
        with pytest.raises(MetricError):
            aupro([np.ones((4, 4))], [np.eye(4)], fpr_limit=0)
