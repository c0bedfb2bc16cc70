import numpy as np
import pytest

from sdseval.dataset import BoxDetection, Candidate
from sdseval.evaluate import (
    VOL_THRESHOLDS,
    SIMILARITY,
    ap_b,
    ap_r,
    ap_vol,
    box_to_region_upper_bound,
    cross_validate_paste_thresholds,
    match,
    paste_and_pixel_iu,
    pr_and_ap,
)
from sdseval.masks import PixelBox, bbox, overlap

from conftest import det, gt, mask_from_pixels, rect_mask
from oracles import exhaustive_match, random_match_instance, voc_ap


def identity_dets(gts):
    return [det(g.image_id, g.category_id, 1.0 + k, g.mask) for k, g in enumerate(gts)]


def iou_055_pair(image_id, instance_id):
    """GT of area 15 and a detection of area 16 sharing 11 pixels (IoU 0.55)."""
    g = rect_mask(0, 0, 4, 2, 6, 5)
    d = mask_from_pixels([(r, c) for r in range(2) for c in range(5)] + [(2, 0)] + [(3, c) for c in range(5)], 6, 5)
    return gt(image_id, instance_id, 1, g), d


class TestMatch:
    def test_identity_tp(self):
        g = gt("a", 1, 1, rect_mask(0, 0, 2, 2, 5, 5))
        m = match([det("a", 1, 0.5, g.mask)], [g])
        assert m.tp.tolist() == [True] and m.matched == [("a", 1)]

    def test_duplicate_is_fp(self):
        g = gt("a", 1, 1, rect_mask(0, 0, 9, 0, 10, 1))
        d1 = det("a", 1, 1.0, rect_mask(0, 0, 8, 0, 10, 1))  # 0.9
        d2 = det("a", 1, 0.9, rect_mask(0, 0, 7, 0, 10, 1))  # 0.8
        m = match([d2, d1], [g])
        assert m.tp.tolist() == [False, True]
        np.testing.assert_allclose(m.overlaps, [0.0, 0.9])

    def test_exactly_half_is_fp(self):
        g = gt("a", 1, 1, rect_mask(0, 0, 3, 0, 4, 1))
        m = match([det("a", 1, 1.0, rect_mask(0, 0, 1, 0, 4, 1))], [g], 0.5)
        assert not m.tp[0]

    def test_max_overlap_ground_truth_chosen(self):
        g1 = gt("a", 1, 1, rect_mask(0, 0, 3, 0, 10, 1))
        g2 = gt("a", 2, 1, rect_mask(2, 0, 7, 0, 10, 1))
        m = match([det("a", 1, 1.0, rect_mask(2, 0, 6, 0, 10, 1))], [g1, g2], 0.1)
        assert m.matched == [("a", 2)]

    def test_other_image_ignored(self):
        g = gt("b", 1, 1, rect_mask(0, 0, 1, 1, 3, 3))
        assert not match([det("a", 1, 1.0, g.mask)], [g]).tp[0]

    def test_matches_exhaustive_oracle(self, rng):
        for _ in range(100):
            dets, gts = random_match_instance(rng)
            t = float(rng.choice(VOL_THRESHOLDS))
            sim = [[overlap(d.mask, g.mask) for g in gts] for d in dets]
            np.testing.assert_array_equal(match(dets, gts, t).tp, exhaustive_match(dets, gts, sim, t))


class TestPRAndAP:
    def _result(self, labels, num_gt=1):
        g = [gt("a", k + 1, 1, rect_mask(k, 0, k, 0, 10, 1)) for k in range(num_gt)]
        dets = []
        for i, hit in enumerate(labels):
            mask = g[sum(labels[:i])].mask if hit else rect_mask(9, 0, 9, 0, 10, 1)
            dets.append(det("a", 1, 10.0 - i, mask))
        return match(dets, g)

    @pytest.mark.parametrize("labels, expected", [([1], 1.0), ([1, 0], 1.0), ([0, 1], 0.5)])
    def test_examples(self, labels, expected):
        assert pr_and_ap(self._result(labels)).ap == expected

    def test_arrays(self):
        curve = pr_and_ap(self._result([1, 0, 1], num_gt=2))
        np.testing.assert_allclose(curve.precision, [1.0, 0.5, 2 / 3])
        np.testing.assert_allclose(curve.recall, [0.5, 0.5, 1.0])
        np.testing.assert_allclose(curve.scores, [10.0, 9.0, 8.0])
        assert curve.ap == pytest.approx(0.5 + 0.5 * 2 / 3, abs=1e-15)

    def test_no_ground_truth(self):
        with pytest.raises(ValueError):
            pr_and_ap(match([], []))

    def test_voc_oracle(self, rng):
        for _ in range(200):
            n_gt = int(rng.integers(1, 6))
            labels = rng.random(int(rng.integers(0, 12))) < 0.5
            labels[np.cumsum(labels) > n_gt] = False
            result = match([], [])
            result.tp, result.order, result.num_gt = labels, list(range(len(labels))), n_gt
            result.scores = -np.arange(len(labels), dtype=float)
            assert abs(pr_and_ap(result).ap - voc_ap(labels, n_gt)) <= 1e-12


class TestReports:
    def test_identity_perfect(self, rng):
        gts = [gt(f"i{k % 3}", k, 1 + k % 2, rect_mask(k, k, k + 2, k + 3, 12, 12)) for k in range(6)]
        dets = identity_dets(gts)
        assert ap_r(dets, gts).mean_ap(0.5) == 1.0
        assert ap_b(dets, gts).mean_ap(0.5) == 1.0
        assert ap_vol(dets, gts).mean_ap_vol == 1.0

    def test_no_detections(self):
        gts = [gt("a", 1, 1, rect_mask(0, 0, 1, 1, 4, 4))]
        assert ap_r([], gts).mean_ap(0.5) == 0.0
        assert ap_vol([], gts).mean_ap_vol == 0.0

    def test_uniform_055_volume(self):
        pairs = [iou_055_pair(f"i{k}", 1) for k in range(4)]
        gts = [g for g, _ in pairs]
        dets = [det(g.image_id, 1, 1.0 + k, d) for k, (g, d) in enumerate(pairs)]
        assert overlap(dets[0].mask, gts[0].mask) == 0.55
        report = ap_vol(dets, gts)
        assert [report.ap[1][t] for t in VOL_THRESHOLDS] == [1.0] * 5 + [0.0] * 4
        assert abs(report.mean_ap_vol - 5 / 9) <= 1e-12

    def test_volume_is_mean_of_thresholds(self, rng):
        dets, gts = random_match_instance(rng)
        report = ap_vol(dets, gts)
        assert report.ap_vol(1) == pytest.approx(np.mean([report.ap[1][t] for t in VOL_THRESHOLDS]), abs=1e-15)

    def test_mean_over_ground_truth_categories(self):
        gts = [gt("a", 1, 1, rect_mask(0, 0, 1, 1, 6, 6)), gt("a", 2, 2, rect_mask(3, 3, 4, 4, 6, 6))]
        dets = [det("a", 1, 1.0, gts[0].mask), det("a", 3, 1.0, gts[1].mask)]
        report = ap_r(dets, gts)
        assert report.categories == [1, 2]
        assert report.mean_ap(0.5) == 0.5

    def test_box_metric_uses_boxes(self):
        g = gt("a", 1, 1, rect_mask(0, 0, 3, 3, 4, 4))
        ring = mask_from_pixels([(r, c) for r in range(4) for c in range(4) if r in (0, 3) or c in (0, 3)], 4, 4)
        d = [det("a", 1, 1.0, ring)]
        assert ap_b(d, [g]).mean_ap(0.5) == 1.0
        assert ap_r(d, [g]).mean_ap(0.5) == 1.0  # 12/16
        assert ap_r(d, [g], 0.8).mean_ap(0.8) == 0.0


class TestInvariants:
    def test_monotone_score_transform(self, rng):
        for _ in range(50):
            dets, gts = random_match_instance(rng)
            moved = [det(d.image_id, 1, np.exp(d.score) * 3 - 1, d.mask, d.source_candidate_id) for d in dets]
            a, b = match(dets, gts), match(moved, gts)
            np.testing.assert_array_equal(a.tp, b.tp)
            assert pr_and_ap(a).ap == pr_and_ap(b).ap

    def test_removing_fp_never_lowers_ap(self, rng):
        for _ in range(50):
            dets, gts = random_match_instance(rng)
            m = match(dets, gts)
            base = pr_and_ap(m).ap
            for i in np.flatnonzero(~m.tp):
                rest = dets[:i] + dets[i + 1 :]
                assert pr_and_ap(match(rest, gts)).ap >= base - 1e-15

    def test_bottom_fp_leaves_ap_unchanged(self, rng):
        for _ in range(50):
            dets, gts = random_match_instance(rng)
            base = pr_and_ap(match(dets, gts)).ap
            far = det("elsewhere", 1, -100.0, rect_mask(0, 0, 0, 0, 8, 8))
            assert pr_and_ap(match(dets + [far], gts)).ap == base

    def test_each_ground_truth_matched_once(self, rng):
        for _ in range(50):
            dets, gts = random_match_instance(rng)
            m = match(dets, gts, 0.1)
            hits = [k for k in m.matched if k is not None]
            assert len(hits) == len(set(hits)) <= len(gts)

    def test_precision_similarity(self):
        g = gt("a", 1, 1, rect_mask(0, 0, 1, 1, 4, 4))
        assert SIMILARITY["precision"](rect_mask(0, 0, 0, 0, 4, 4), g.mask) == 1.0


class TestPixelIU:
    def test_identity(self):
        g = gt("a", 1, 1, rect_mask(0, 0, 2, 2, 5, 5))
        res = paste_and_pixel_iu([det("a", 1, 0.7, g.mask)], [g], {"a": (5, 5)}, {1: 0.5})
        assert res.iu[1] == 1.0 and res.mean == 1.0

    def test_nothing_survives(self):
        g = gt("a", 1, 1, rect_mask(0, 0, 2, 2, 5, 5))
        res = paste_and_pixel_iu([det("a", 1, 0.2, g.mask)], [g], {"a": (5, 5)}, {1: 0.5})
        assert res.iu[1] == 0.0

    def test_higher_score_wins_contested_pixels(self):
        a = rect_mask(0, 0, 2, 0, 4, 1)
        b = rect_mask(1, 0, 3, 0, 4, 1)
        gts = [gt("a", 1, 1, a), gt("a", 2, 2, rect_mask(3, 0, 3, 0, 4, 1))]
        res = paste_and_pixel_iu([det("a", 2, 0.8, b), det("a", 1, 0.9, a)], gts, {"a": (4, 1)})
        assert res.iu == {1: 1.0, 2: 1.0}

    def test_processing_order_invariant(self, rng):
        gts, dets = [], []
        for k in range(6):
            image = f"i{k % 3}"
            top = 6 * (k // 3)  # instances on one image are disjoint
            g = gt(image, k, 1 + k % 2, rect_mask(k, top, k + 4, top + 4, 12, 12))
            gts.append(g)
            dets.append(det(image, g.category_id, rng.normal(), rect_mask(k + 1, top + 1, k + 5, top + 5, 12, 12)))
        sizes = {f"i{k}": (12, 12) for k in range(3)}
        a = paste_and_pixel_iu(dets, gts, sizes, images=["i0", "i1", "i2"])
        perm = rng.permutation(len(dets))
        b = paste_and_pixel_iu([dets[i] for i in perm], gts[::-1], sizes, images=["i2", "i0", "i1"])
        assert a.iu == b.iu

    def test_cross_validation_drops_harmful_detections(self):
        g = gt("a", 1, 1, rect_mask(0, 0, 3, 3, 8, 8))
        dets = [det("a", 1, 0.9, g.mask), det("a", 1, 0.1, rect_mask(5, 5, 7, 7, 8, 8))]
        t = cross_validate_paste_thresholds(dets, [g], {"a": (8, 8)}, ["a"])
        assert 0.1 < t[1] <= 0.9
        assert paste_and_pixel_iu(dets, [g], {"a": (8, 8)}, t).mean == 1.0


class TestUpperBound:
    def test_pool_containing_ground_truth(self):
        g = gt("a", 1, 1, rect_mask(2, 2, 7, 7, 10, 10))
        pool = [Candidate("a", 1, rect_mask(2, 2, 7, 6, 10, 10)), Candidate("a", 2, g.mask)]
        (out,) = box_to_region_upper_bound([BoxDetection("a", 1, 0.5, PixelBox(2, 2, 7, 7))], pool, [g])
        assert out.mask == g.mask and out.source_candidate_id == 2

    def test_empty_pool(self):
        g = gt("a", 1, 1, rect_mask(2, 2, 7, 7, 10, 10))
        pool = [Candidate("a", 1, rect_mask(0, 0, 1, 1, 10, 10))]
        assert box_to_region_upper_bound([BoxDetection("a", 1, 0.5, PixelBox(2, 2, 7, 7))], pool, [g]) == []

    def test_argmax(self):
        g = gt("a", 1, 1, rect_mask(0, 0, 9, 0, 10, 1))
        low = Candidate("a", 1, mask_from_pixels([(0, c) for c in (0, 2, 4, 9)], 10, 1))  # 0.4
        high = Candidate("a", 2, mask_from_pixels([(0, c) for c in range(10) if c not in (3, 6)], 10, 1))  # 0.8
        assert bbox(low.mask) == bbox(high.mask) == bbox(g.mask)
        (out,) = box_to_region_upper_bound([BoxDetection("a", 1, 0.5, bbox(g.mask))], [low, high], [g])
        assert out.mask == high.mask
