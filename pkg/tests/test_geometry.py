import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tinyovd.errors import RejectionExhausted
from tinyovd.geometry import (
    Box,
    NoiseConfig,
    NoiseKind,
    from_center_form,
    generate_noisy_samples,
    giou,
    giou_matrix,
    iou,
    iou_matrix,
    to_center_form,
)

boxes = st.builds(
    lambda x1, y1, w, h: Box(x1, y1, x1 + w, y1 + h),
    st.floats(0, 0.8),
    st.floats(0, 0.8),
    st.floats(0.01, 0.2),
    st.floats(0.01, 0.2),
)


def pixel_grid_iou(a: Box, b: Box, res: int = 512, sub: int = 4) -> float:
    """Counting oracle on a res x res pixel grid.

    Pixel coverage is counted from sub x sub sample points per pixel
    (single-point counting quantizes too coarsely for a 5e-3 comparison).
    Box membership is separable per axis, so counts reduce to 1D indicator
    sums; no interval arithmetic from the implementation under test.
    """
    n = res * sub
    coords = (np.arange(n) + 0.5) / n

    def in1d(lo, hi):
        return (coords >= lo) & (coords <= hi)

    ax, ay = in1d(a.x1, a.x2), in1d(a.y1, a.y2)
    bx, by = in1d(b.x1, b.x2), in1d(b.y1, b.y2)
    inter = (ax & bx).sum() * (ay & by).sum()
    union = ax.sum() * ay.sum() + bx.sum() * by.sum() - inter
    if union == 0:
        return 0.0
    return inter / union


class TestIou:
    def test_identical(self):
        b = Box(0, 0, 1, 1)
        assert iou(b, b) == 1.0

    def test_hand_value(self):
        assert iou(Box(0, 0, 0.2, 0.2), Box(0.1, 0.1, 0.3, 0.3)) == pytest.approx(1 / 7, abs=1e-12)

    def test_disjoint(self):
        assert iou(Box(0, 0, 0.1, 0.1), Box(0.5, 0.5, 0.6, 0.6)) == 0.0

    def test_degenerate_zero_area(self):
        assert iou(Box(0.2, 0.2, 0.2, 0.2), Box(0.2, 0.2, 0.2, 0.2)) == 0.0

    @given(boxes, boxes)
    def test_bounds_and_symmetry(self, a, b):
        v = iou(a, b)
        assert 0.0 <= v <= 1.0
        assert v == iou(b, a)

    @given(boxes)
    def test_self_iou(self, a):
        assert iou(a, a) == pytest.approx(1.0)

    def test_pixel_grid_oracle(self, rng):
        for _ in range(1000):
            x1, y1 = rng.uniform(0, 0.6, 2)
            w, h = rng.uniform(0.1, 0.4, 2)
            a = Box(x1, y1, min(x1 + w, 1), min(y1 + h, 1))
            x1, y1 = rng.uniform(0, 0.6, 2)
            w, h = rng.uniform(0.1, 0.4, 2)
            b = Box(x1, y1, min(x1 + w, 1), min(y1 + h, 1))
            assert iou(a, b) == pytest.approx(pixel_grid_iou(a, b), abs=5e-3)


class TestGiou:
    def test_identical(self):
        b = Box(0.1, 0.1, 0.5, 0.7)
        assert giou(b, b) == pytest.approx(1.0)

    def test_hand_value(self):
        assert giou(Box(0, 0, 0.1, 0.1), Box(0.2, 0, 0.3, 0.1)) == pytest.approx(-1 / 3, abs=1e-12)

    def test_opposite_corners_approach_minus_one(self):
        a = Box(0, 0, 1e-4, 1e-4)
        b = Box(1 - 1e-4, 1 - 1e-4, 1, 1)
        assert giou(a, b) < -0.99

    @given(boxes, boxes)
    def test_giou_le_iou(self, a, b):
        assert giou(a, b) <= iou(a, b) + 1e-12

    @given(boxes, boxes)
    def test_range(self, a, b):
        assert -1.0 <= giou(a, b) <= 1.0

    def test_matrix_versions_agree(self, rng):
        def rand_box():
            xs, ys = sorted(rng.uniform(0, 1, 2)), sorted(rng.uniform(0, 1, 2))
            return Box(xs[0], ys[0], xs[1], ys[1])

        a = [rand_box() for _ in range(7)]
        bs = [Box(0.1, 0.1, 0.4, 0.5), Box(0.3, 0.2, 0.9, 0.9)]
        am = np.array([x.as_array() for x in a])
        bm = np.array([x.as_array() for x in bs])
        got_iou = iou_matrix(am, bm)
        got_giou = giou_matrix(am, bm)
        for i, x in enumerate(a):
            for j, y in enumerate(bs):
                assert got_iou[i, j] == pytest.approx(iou(x, y), abs=1e-12)
                assert got_giou[i, j] == pytest.approx(giou(x, y), abs=1e-12)


class TestCenterForm:
    def test_unit_box(self):
        assert to_center_form(Box(0, 0, 1, 1)) == (0.5, 0.5, 1, 1)

    def test_hand_value(self):
        b = from_center_form(0.5, 0.5, 0.2, 0.4)
        assert b.as_array() == pytest.approx([0.4, 0.3, 0.6, 0.7], abs=1e-12)

    @given(boxes)
    @settings(max_examples=200)
    def test_round_trip(self, b):
        back = from_center_form(*to_center_form(b))
        assert back.as_array() == pytest.approx(b.as_array(), abs=1e-12)


class TestNoisySamples:
    def gts(self):
        return [(Box(0.3, 0.3, 0.6, 0.6), 2), (Box(0.55, 0.2, 0.8, 0.45), 1)]

    def test_zero_lambda_replicates_gt(self, rng):
        cfg = NoiseConfig(lam=0.0, m_perturbed=4, m_expanded=0)
        out = generate_noisy_samples(self.gts(), cfg, rng)
        assert len(out) == 8
        for s in out:
            gt = self.gts()[s.gt_index][0]
            assert s.box.as_array() == pytest.approx(gt.as_array())
            assert s.initial_iou == 1.0

    def test_expanded_concentric_iou(self):
        gt = Box(0.2, 0.2, 0.6, 0.6)
        cfg = NoiseConfig(m_perturbed=1, m_expanded=1, expansion_low=1.25, expansion_high=1.25)
        out = generate_noisy_samples([(gt, 0)], cfg, np.random.default_rng(3))
        exp = [s for s in out if s.kind is NoiseKind.EXPANDED][0]
        assert exp.initial_iou == pytest.approx(1 / 1.25**2, abs=1e-12)
        assert exp.box.center == pytest.approx(gt.center, abs=1e-12)

    def test_quality_rule_monte_carlo(self):
        rng = np.random.default_rng(11)
        cfg = NoiseConfig(lam=0.4, m_perturbed=10, m_expanded=3)
        total, below_one = 0, 0
        while total < 10_000:
            x1, y1 = rng.uniform(0.25, 0.45, 2)
            w, h = rng.uniform(0.1, 0.3, 2)
            out = generate_noisy_samples([(Box(x1, y1, x1 + w, y1 + h), 0)], cfg, rng)
            for s in out:
                total += 1
                assert s.initial_iou > 0.5
                assert s.initial_iou == pytest.approx(iou(s.box, Box(x1, y1, x1 + w, y1 + h)), abs=1e-12)
                if s.initial_iou < 1.0:
                    below_one += 1
        assert below_one > total * 0.5  # the distribution genuinely has support below 1

    def test_category_and_order(self, rng):
        cfg = NoiseConfig(m_perturbed=3, m_expanded=1)
        out = generate_noisy_samples(self.gts(), cfg, rng)
        assert [s.gt_index for s in out] == [0, 0, 0, 0, 1, 1, 1, 1]
        assert [s.category_id for s in out] == [2, 2, 2, 2, 1, 1, 1, 1]
        kinds = [s.kind for s in out[:4]]
        assert kinds == [NoiseKind.PERTURBED] * 3 + [NoiseKind.EXPANDED]

    def test_same_seed_bit_identical(self):
        cfg = NoiseConfig(m_perturbed=5, m_expanded=2)
        a = generate_noisy_samples(self.gts(), cfg, np.random.default_rng(42))
        b = generate_noisy_samples(self.gts(), cfg, np.random.default_rng(42))
        for s, t in zip(a, b):
            assert s.box == t.box and s.initial_iou == t.initial_iou

    def test_clamped_inside_unit_square(self):
        rng = np.random.default_rng(5)
        cfg = NoiseConfig(lam=0.4, m_perturbed=8, m_expanded=2)
        gt = Box(0.02, 0.02, 0.35, 0.3)  # hugs the corner; perturbations must clamp
        out = generate_noisy_samples([(gt, 0)], cfg, rng)
        for s in out:
            arr = s.box.as_array()
            assert np.all(arr >= 0.0) and np.all(arr <= 1.0)

    def test_rejection_exhausted_at_border(self):
        # a box touching the border cannot host any in-bounds expansion
        gt = Box(0.0, 0.4, 0.2, 0.6)
        cfg = NoiseConfig(m_perturbed=1, m_expanded=1, max_rejection_resamples=50)
        with pytest.raises(RejectionExhausted):
            generate_noisy_samples([(gt, 0)], cfg, np.random.default_rng(0))
