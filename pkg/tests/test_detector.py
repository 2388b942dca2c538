import numpy as np
import pytest

from tsdet.annotations import Annotation, BoundingBox, ClassCatalog
from tsdet.detector import (
    ROLE_IGNORED,
    ROLE_NEGATIVE,
    ROLE_POSITIVE,
    AnchorConfig,
    AssignmentSet,
    DetectorModel,
    anchor_grid,
    apply_deltas,
    box_deltas,
    compute_loss,
    match_anchors,
    predict,
)
from tsdet.errors import ValidationError
from tsdet.features import FEATURE_DIM, ImageFeatures
from tsdet.geometry import iou_matrix_xyxy
from tsdet.world import WorldConfig, generate_scene

from .conftest import make_catalog


def ann(x, y, w, h, cls=1, status=None, weight=None, score=None, ann_id=1):
    return Annotation(ann_id, 1, cls, BoundingBox(x, y, w, h),
                      score=score, status=status, weight=weight)


class TestAnchorGrid:
    def test_count_128(self):
        cfg = AnchorConfig()
        anchors = anchor_grid(128, 128, cfg)
        assert anchors.shape == (16 * 16 * 9, 4)

    def test_inside_image(self):
        anchors = anchor_grid(128, 96, AnchorConfig())
        assert np.all(anchors[:, 0] >= 0) and np.all(anchors[:, 1] >= 0)
        assert np.all(anchors[:, 2] <= 128) and np.all(anchors[:, 3] <= 96)
        assert np.all(anchors[:, 2] > anchors[:, 0]) and np.all(anchors[:, 3] > anchors[:, 1])

    def test_deterministic(self):
        a = anchor_grid(128, 128, AnchorConfig())
        b = anchor_grid(128, 128, AnchorConfig())
        np.testing.assert_array_equal(a, b)

    def test_small_image_rejected(self):
        with pytest.raises(ValidationError):
            anchor_grid(4, 4, AnchorConfig())


class TestDeltas:
    def test_round_trip(self, rng):
        anchors = rng.uniform(0, 80, (40, 2))
        anchors = np.hstack([anchors, anchors + rng.uniform(4, 30, (40, 2))])
        targets = rng.uniform(0, 80, (40, 2))
        targets = np.hstack([targets, targets + rng.uniform(4, 30, (40, 2))])
        deltas = box_deltas(anchors, targets)
        back = apply_deltas(anchors, deltas)
        np.testing.assert_allclose(back, targets, atol=1e-9)


class TestMatchAnchors:
    CFG = AnchorConfig()

    def test_high_iou_positive_with_weight(self):
        anchors = np.array([[10.0, 10.0, 20.0, 20.0]])
        a = ann(10, 10, 10, 11, cls=2, status="keep", weight=0.625, score=0.95)
        asg = match_anchors(anchors, [a], self.CFG, class_weights={2: 2.0})
        assert asg.roles[0] == ROLE_POSITIVE
        assert asg.cls_targets[0] == 2
        assert asg.weights[0] == pytest.approx(0.625 * 2.0)

    def test_ignore_overlap_shields_anchor(self):
        anchors = np.array([[10.0, 10.0, 20.0, 20.0], [50.0, 50.0, 60.0, 60.0]])
        a = ann(10, 10, 10, 16, status="ignore", score=0.95)
        asg = match_anchors(anchors, [a], self.CFG)
        assert asg.roles[0] == ROLE_IGNORED
        assert asg.weights[0] == 0.0
        assert asg.roles[1] == ROLE_NEGATIVE
        assert asg.weights[1] == 1.0

    def test_low_iou_negative(self):
        # second anchor sits on the object, so the first is a plain background
        anchors = np.array([[0.0, 0.0, 8.0, 8.0], [40.0, 40.0, 50.0, 50.0]])
        a = ann(40, 40, 10, 10)
        asg = match_anchors(anchors, [a], self.CFG)
        assert asg.roles[0] == ROLE_NEGATIVE and asg.weights[0] == 1.0

    def test_gray_zone_ignored(self):
        anchors = np.array([[0.0, 0.0, 10.0, 10.0], [0.0, 0.0, 10.0, 4.0]])
        a = ann(0, 0, 10, 4)  # IoU 0.4 with the first anchor: between 0.3 and 0.5
        asg = match_anchors(anchors, [a], self.CFG)
        assert asg.roles[0] == ROLE_IGNORED
        assert asg.roles[1] == ROLE_POSITIVE

    def test_dropped_annotation_becomes_background(self):
        anchors = np.array([[10.0, 10.0, 20.0, 20.0]])
        a = ann(10, 10, 10, 10, status="drop", score=0.1)
        asg = match_anchors(anchors, [a], self.CFG)
        assert asg.roles[0] == ROLE_NEGATIVE

    def test_best_anchor_forced_positive_for_small_object(self):
        # a 4px ball has IoU < 0.5 with every 8px+ anchor, but must keep one positive
        anchors = anchor_grid(128, 128, self.CFG)
        ball = ann(61, 61, 4, 4, cls=3)
        asg = match_anchors(anchors, [ball], self.CFG)
        assert asg.n_reg == 1
        pos = int(np.nonzero(asg.roles == ROLE_POSITIVE)[0][0])
        ious = iou_matrix_xyxy(anchors, np.array([[61.0, 61.0, 65.0, 65.0]]))[:, 0]
        assert pos == int(np.argmax(ious))

    def test_labeled_gt_counts_as_keep_weight_one(self):
        anchors = np.array([[10.0, 10.0, 20.0, 20.0]])
        asg = match_anchors(anchors, [ann(10, 10, 10, 10)], self.CFG)
        assert asg.roles[0] == ROLE_POSITIVE and asg.weights[0] == 1.0

    def test_positive_reg_targets_decode_back(self):
        anchors = np.array([[8.0, 8.0, 24.0, 24.0]])
        a = ann(10, 9, 14, 17)
        asg = match_anchors(anchors, [a], self.CFG)
        decoded = apply_deltas(anchors, asg.reg_targets)
        np.testing.assert_allclose(decoded[0], [10, 9, 24, 26], atol=1e-9)

    def test_alpha_monotonicity_transfers_to_anchor_weights(self):
        # raising a band score never lowers that label's positive-anchor weights
        from tsdet.policy import WeightPolicy, assign_status
        anchors = anchor_grid(128, 128, self.CFG)
        policy = WeightPolicy("progressive", 0.2, 0.9)
        prev = None
        for s in (0.25, 0.4, 0.6, 0.85, 0.95):
            st = assign_status(s, policy)
            assert st.kind == "keep"
            a = ann(40, 40, 16, 24, status="keep", weight=st.weight, score=s)
            asg = match_anchors(anchors, [a], self.CFG)
            weights = np.sort(asg.weights[asg.roles == ROLE_POSITIVE])
            if prev is not None:
                assert weights.shape == prev.shape
                assert np.all(weights >= prev - 1e-12)
            prev = weights


def random_assignments(rng, n_anchors, k):
    roles = rng.choice([ROLE_NEGATIVE, ROLE_POSITIVE, ROLE_IGNORED], size=n_anchors,
                       p=[0.6, 0.25, 0.15]).astype(np.int8)
    cls_targets = np.zeros(n_anchors, dtype=np.int64)
    weights = np.ones(n_anchors)
    reg_targets = np.zeros((n_anchors, 4))
    ann_index = np.full(n_anchors, -1, dtype=np.int64)
    pos = roles == ROLE_POSITIVE
    cls_targets[pos] = rng.integers(1, k + 1, int(pos.sum()))
    weights[pos] = rng.uniform(0.05, 1.0, int(pos.sum()))
    weights[roles == ROLE_IGNORED] = 0.0
    reg_targets[pos] = rng.normal(0, 1.2, (int(pos.sum()), 4))
    return AssignmentSet(roles, cls_targets, weights, reg_targets, ann_index)


def random_model(rng, k):
    catalog = ClassCatalog.from_names([f"c{i}" for i in range(k)])
    m = DetectorModel.new(catalog)
    m.w_cls = rng.normal(0, 0.5, m.w_cls.shape)
    m.b_cls = rng.normal(0, 0.5, m.b_cls.shape)
    m.w_reg = rng.normal(0, 0.5, m.w_reg.shape)
    m.b_reg = rng.normal(0, 0.5, m.b_reg.shape)
    return m


def finite_difference_check(rng, n_anchors=24, k=3, h=1e-5, tol=1e-4):
    model = random_model(rng, k)
    x = rng.normal(0, 1, (n_anchors, FEATURE_DIM))
    asg = random_assignments(rng, n_anchors, k)
    origin = "labeled" if rng.random() < 0.5 else "pseudo"
    _, grads = compute_loss(model, x, asg, origin)

    def loss_at() -> float:
        breakdown, _ = compute_loss(model, x, asg, origin)
        return breakdown.total

    for arr, g in ((model.w_cls, grads.w_cls), (model.b_cls, grads.b_cls),
                   (model.w_reg, grads.w_reg), (model.b_reg, grads.b_reg)):
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        idx = rng.choice(len(flat), size=min(12, len(flat)), replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            lp = loss_at()
            flat[i] = orig - h
            lm = loss_at()
            flat[i] = orig
            fd = (lp - lm) / (2 * h)
            scale = max(1.0, abs(fd), abs(gflat[i]))
            assert abs(fd - gflat[i]) <= tol * scale, (fd, gflat[i])


class TestComputeLoss:
    def test_all_ignored_zero(self, rng):
        model = random_model(rng, 3)
        x = rng.normal(0, 1, (10, FEATURE_DIM))
        asg = AssignmentSet(
            roles=np.full(10, ROLE_IGNORED, dtype=np.int8),
            cls_targets=np.zeros(10, dtype=np.int64),
            weights=np.zeros(10),
            reg_targets=np.zeros((10, 4)),
            ann_index=np.full(10, -1, dtype=np.int64),
        )
        breakdown, grads = compute_loss(model, x, asg)
        assert breakdown.total == 0.0
        assert np.all(grads.w_cls == 0) and np.all(grads.w_reg == 0)

    def test_doubling_weights_doubles_loss(self, rng):
        model = random_model(rng, 3)
        x = rng.normal(0, 1, (30, FEATURE_DIM))
        asg = random_assignments(rng, 30, 3)
        doubled = AssignmentSet(asg.roles, asg.cls_targets, asg.weights * 2,
                                asg.reg_targets, asg.ann_index)
        b1, _ = compute_loss(model, x, asg)
        b2, _ = compute_loss(model, x, doubled)
        assert b2.l_cls == pytest.approx(2 * b1.l_cls, rel=1e-12)
        assert b2.l_reg == pytest.approx(2 * b1.l_reg, rel=1e-12)

    def test_origin_buckets_additivity(self, rng):
        model = random_model(rng, 3)
        x = rng.normal(0, 1, (30, FEATURE_DIM))
        asg = random_assignments(rng, 30, 3)
        lab, _ = compute_loss(model, x, asg, "labeled")
        uns, _ = compute_loss(model, x, asg, "pseudo")
        assert lab.l_unlabeled == 0.0 and uns.l_labeled == 0.0
        assert lab.total == lab.l_labeled + lab.l_unlabeled
        assert uns.total == uns.l_labeled + uns.l_unlabeled

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(1234)
        for _ in range(10):
            finite_difference_check(rng)


class TestCheckpoint:
    def test_round_trip(self, tmp_path, rng):
        model = random_model(rng, 3)
        model.epochs_trained = 17
        model.seed = 99
        p = tmp_path / "m.ckpt"
        model.save(p)
        loaded = DetectorModel.load(p)
        assert loaded.catalog == model.catalog
        assert loaded.anchor_cfg == model.anchor_cfg
        assert loaded.epochs_trained == 17 and loaded.seed == 99
        np.testing.assert_array_equal(loaded.w_cls, model.w_cls)
        np.testing.assert_array_equal(loaded.b_reg, model.b_reg)
        assert loaded.weights_hash() == model.weights_hash()

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "m.ckpt"
        p.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(ValidationError, match="magic"):
            DetectorModel.load(p)

    def test_truncated(self, tmp_path, rng):
        model = random_model(rng, 2)
        p = tmp_path / "m.ckpt"
        model.save(p)
        p.write_bytes(p.read_bytes()[:-16])
        with pytest.raises(ValidationError):
            DetectorModel.load(p)

    def test_version_mismatch(self, tmp_path, rng):
        model = random_model(rng, 2)
        p = tmp_path / "m.ckpt"
        model.save(p)
        raw = bytearray(p.read_bytes())
        raw[4:8] = (999).to_bytes(4, "little")
        p.write_bytes(bytes(raw))
        with pytest.raises(ValidationError, match="version 999"):
            DetectorModel.load(p)

    def test_non_finite_rejected_on_save(self, tmp_path, rng):
        model = random_model(rng, 2)
        model.w_cls[0, 0] = np.nan
        with pytest.raises(ValidationError, match="non-finite"):
            model.save(tmp_path / "m.ckpt")


class TestPredict:
    def test_untrained_model_uniform_scores(self):
        catalog = ClassCatalog.from_names([f"c{i}" for i in range(6)])
        model = DetectorModel.new(catalog)
        pixels = np.zeros((128, 128, 3), dtype=np.uint8)
        dets = predict(model, pixels, score_floor=0.05, nms_iou=0.5)
        assert dets  # 1/(K+1) = 1/7 > 0.05, so anchors survive to NMS
        assert all(d.score == pytest.approx(1 / 7) for d in dets)

    def test_floor_one_empty(self, rng):
        model = random_model(rng, 3)
        pixels = rng.integers(0, 255, (64, 64, 3), dtype=np.uint8)
        assert predict(model, pixels, score_floor=1.0) == []

    def test_least_squares_model_recovers_scene(self):
        # closed-form fit on one scene: +-6 logit targets for the classifier
        # via class-balanced weighted least squares, exact least squares for
        # the regressor
        cfg = WorldConfig(clutter_rate=0.0)
        pixels, anns = generate_scene(cfg, seed=10)
        assert len(anns) >= 3
        acfg = AnchorConfig()
        anchors = anchor_grid(128, 128, acfg)
        x = ImageFeatures(pixels).for_boxes(anchors)
        asg = match_anchors(anchors, anns, acfg)
        k = len(cfg.catalog)
        rows = np.arange(len(anchors))
        t_logits = np.full((len(anchors), k + 1), -6.0)
        t_logits[rows, asg.cls_targets] = 6.0
        contrib = asg.roles != ROLE_IGNORED
        pos = asg.roles == ROLE_POSITIVE
        row_w = np.ones(len(anchors))
        row_w[pos] = (contrib.sum() - pos.sum()) / max(pos.sum(), 1)
        sw = np.sqrt(row_w[contrib])[:, None]
        w_cls = np.linalg.lstsq(x[contrib] * sw, t_logits[contrib] * sw, rcond=None)[0].T
        w_reg = np.linalg.lstsq(x[pos], asg.reg_targets[pos], rcond=None)[0].T

        model = DetectorModel.new(cfg.catalog, acfg)
        model.w_cls = w_cls
        model.w_reg = w_reg
        dets = predict(model, pixels, score_floor=0.3, nms_iou=0.5)
        ious = iou_matrix_xyxy(
            np.array([d.box.corners for d in dets]),
            np.array([a.box.corners for a in anns]))
        recovered = 0
        for j, a in enumerate(anns):
            best_anchor_iou = iou_matrix_xyxy(anchors, np.array([a.box.corners])).max()
            hit = any(ious[i, j] >= 0.5 and dets[i].class_id == a.class_id
                      for i in range(len(dets)))
            if best_anchor_iou >= 0.5:
                assert hit, f"missed well-anchored object {a}"
            recovered += hit
        assert recovered >= len(anns) * 0.7
