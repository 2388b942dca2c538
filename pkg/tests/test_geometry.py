import numpy as np
import pytest
from hypothesis import given, strategies as st

from tsdet.annotations import BoundingBox
from tsdet.errors import ValidationError
from tsdet.geometry import Detection, clip, iou, iou_matrix_xyxy, nms

from .oracles import iou_oracle, nms_oracle


def box(x, y, w, h):
    return BoundingBox(x, y, w, h)


class TestIou:
    def test_identical_boxes(self):
        b = box(3.0, 4.0, 10.0, 6.0)
        assert iou(b, b) == 1.0

    def test_disjoint_boxes(self):
        assert iou(box(0, 0, 2, 2), box(10, 10, 2, 2)) == 0.0

    def test_known_overlap(self):
        # corners (0,0,2,2) vs (1,1,3,3): intersection 1, union 7
        a = BoundingBox.from_corners(0, 0, 2, 2)
        b = BoundingBox.from_corners(1, 1, 3, 3)
        assert iou(a, b) == pytest.approx(1 / 7)

    def test_zero_area_rejected(self):
        with pytest.raises(ValidationError):
            box(0, 0, 0.0, 2.0)

    @given(st.floats(-50, 50), st.floats(-50, 50), st.floats(0.5, 20), st.floats(0.5, 20),
           st.floats(-50, 50), st.floats(-50, 50), st.floats(0.5, 20), st.floats(0.5, 20))
    def test_symmetry_and_range(self, ax, ay, aw, ah, bx, by, bw, bh):
        a, b = box(ax, ay, aw, ah), box(bx, by, bw, bh)
        v = iou(a, b)
        assert v == iou(b, a)
        assert 0.0 <= v <= 1.0

    @given(st.floats(-20, 20), st.floats(-20, 20))
    def test_translation_invariance(self, dx, dy):
        a, b = box(0, 0, 4, 6), box(2, 3, 5, 4)
        a2 = box(a.x + dx, a.y + dy, a.w, a.h)
        b2 = box(b.x + dx, b.y + dy, b.w, b.h)
        assert iou(a2, b2) == pytest.approx(iou(a, b), abs=1e-12)

    def test_matches_scalar_oracle(self, rng):
        for _ in range(200):
            a = tuple(rng.uniform(0, 40, 2)) + tuple(rng.uniform(1, 20, 2))
            b = tuple(rng.uniform(0, 40, 2)) + tuple(rng.uniform(1, 20, 2))
            assert iou(box(*a), box(*b)) == pytest.approx(iou_oracle(a, b), abs=1e-12)


class TestClip:
    def test_interior_box_unchanged(self):
        b = box(10, 10, 20, 20)
        assert clip(b, 128, 128) == b

    def test_corner_clip(self):
        assert clip(box(-5, -5, 10, 10), 128, 128) == box(0, 0, 5, 5)

    def test_fully_outside_errors(self):
        with pytest.raises(ValidationError, match="degenerate after clip"):
            clip(box(-20, -20, 5, 5), 128, 128)

    @given(st.floats(-40, 130), st.floats(-40, 130), st.floats(1, 60), st.floats(1, 60))
    def test_idempotent(self, x, y, w, h):
        b = box(x, y, w, h)
        try:
            once = clip(b, 128, 128)
        except ValidationError:
            return
        assert clip(once, 128, 128) == once
        x1, y1, x2, y2 = once.corners
        assert 0 <= x1 <= x2 <= 128 and 0 <= y1 <= y2 <= 128


def det(x, y, w, h, cls=1, score=0.5):
    return Detection(box(x, y, w, h), cls, score)


class TestNms:
    def test_suppresses_same_class_overlap(self):
        # IoU 0.6 between the two boxes, threshold 0.5: only the stronger survives
        a = det(0, 0, 10, 6, score=0.9)
        b = det(0, 0, 10, 4, score=0.8)
        assert iou(a.box, b.box) == pytest.approx(0.6666666, abs=1e-4)
        kept = nms([a, b], 0.5)
        assert kept == [a]

    def test_classes_do_not_interact(self):
        a = det(0, 0, 10, 6, cls=1, score=0.9)
        b = det(0, 0, 10, 6, cls=2, score=0.8)
        assert nms([a, b], 0.5) == [a, b]

    def test_empty_input(self):
        assert nms([], 0.5) == []

    def test_threshold_validated(self):
        with pytest.raises(ValidationError):
            nms([det(0, 0, 2, 2)], 1.0)

    def test_output_sorted_and_subset(self, rng):
        dets = [det(*rng.uniform(0, 90, 2), *rng.uniform(4, 30, 2),
                    cls=int(rng.integers(1, 4)), score=float(rng.uniform(0, 1)))
                for _ in range(40)]
        kept = nms(dets, 0.5)
        assert all(k in dets for k in kept)
        scores = [k.score for k in kept]
        assert scores == sorted(scores, reverse=True)
        for i, a in enumerate(kept):
            for b in kept[i + 1:]:
                if a.class_id == b.class_id:
                    assert iou(a.box, b.box) < 0.5

    def test_matches_bruteforce_oracle(self, rng):
        for trial in range(100):
            n = int(rng.integers(0, 50))
            dets = []
            raw = []
            for _ in range(n):
                x, y = rng.uniform(0, 80, 2)
                w, h = rng.uniform(3, 40, 2)
                cls = int(rng.integers(1, 4))
                score = float(rng.uniform(0, 1))
                dets.append(det(x, y, w, h, cls=cls, score=score))
                raw.append(((x, y, w, h), cls, score))
            thr = float(rng.uniform(0.2, 0.8))
            kept = nms(dets, thr)
            expected = [dets[i] for i in nms_oracle(raw, thr)]
            assert kept == expected


def test_iou_matrix_matches_scalar(rng):
    a = np.column_stack([rng.uniform(0, 50, 20), rng.uniform(0, 50, 20)])
    a = np.hstack([a, a + rng.uniform(1, 30, (20, 2))])
    b = np.column_stack([rng.uniform(0, 50, 15), rng.uniform(0, 50, 15)])
    b = np.hstack([b, b + rng.uniform(1, 30, (15, 2))])
    m = iou_matrix_xyxy(a, b)
    for i in range(20):
        for j in range(15):
            va = (a[i, 0], a[i, 1], a[i, 2] - a[i, 0], a[i, 3] - a[i, 1])
            vb = (b[j, 0], b[j, 1], b[j, 2] - b[j, 0], b[j, 3] - b[j, 1])
            assert m[i, j] == pytest.approx(iou_oracle(va, vb), abs=1e-12)
