import math

import numpy as np
import pytest

from bevtrack import tensor as T
from bevtrack.geom import RotatedBox, iou
from bevtrack.net import Model, ModelConfig, build_anchors, encode_box
from bevtrack.train import (
    GtObject,
    Sample,
    TrainConfig,
    assign_targets,
    encode_regression,
    format_log_line,
    lr_at,
    mine_hard_negatives,
    total_loss,
    train,
)
from bevtrack.voxel import GridSpec


MICRO_GRID = GridSpec((-1.6, 1.6), (-1.6, 1.6), (0.0, 0.4), 0.2)  # 16x16, Z=2


def micro_model(seed=0, n_in=1, n_out=1):
    cfg = ModelConfig(
        grid=MICRO_GRID, n_in=n_in, n_out=n_out, fusion="late", widths=(2, 2, 2, 2), head_width=2
    )
    return Model(cfg, seed=seed)


class TestAssign:
    def setup_method(self):
        self.model = micro_model()
        self.anchors = build_anchors(self.model.config)

    def test_empty_scene_all_background(self):
        a = assign_targets(self.anchors, [], n_out=1)
        assert a.labels.sum() == 0
        assert (a.matched_gt == -1).all()
        assert a.valid.sum() == 0

    def test_overlapping_gt_marks_positives(self):
        gt = GtObject(track_id=0, boxes=[RotatedBox(0.0, 0.0, 5.0, 5.0, 0.0)])
        a = assign_targets(self.anchors, [gt], n_out=1)
        assert a.labels.sum() >= 1
        # every positive anchor really overlaps above threshold, except any
        # force-assigned argmax anchor
        flat_labels = a.labels.reshape(-1)
        ious = np.array([iou(b, gt.boxes[0]) for b in self.anchors.boxes])
        forced = ious.argmax()
        for i in np.flatnonzero(flat_labels):
            assert ious[i] > 0.4 or i == forced

    def test_force_assign_low_overlap_gt(self):
        # tiny box overlaps no anchor above 0.4, must still get one anchor
        gt = GtObject(track_id=3, boxes=[RotatedBox(0.1, 0.1, 0.5, 0.5, 0.0)])
        a = assign_targets(self.anchors, [gt], n_out=1)
        assert a.labels.sum() == 1
        ious = np.array([iou(b, gt.boxes[0]) for b in self.anchors.boxes])
        assert a.labels.reshape(-1)[ious.argmax()] == 1.0

    def test_targets_match_direct_encoding(self):
        gt = GtObject(track_id=0, boxes=[RotatedBox(0.2, -0.3, 5.0, 5.0, 0.1)])
        a = assign_targets(self.anchors, [gt], n_out=1)
        flat = a.labels.reshape(-1)
        tflat = a.targets.transpose(0, 3, 4, 1, 2).reshape(-1, 1, 6)
        for i in np.flatnonzero(flat):
            expect = encode_box(self.anchors.boxes[i], gt.boxes[0])
            np.testing.assert_allclose(tflat[i, 0], expect, atol=1e-12)

    def test_future_box_absent_marks_invalid(self):
        gt = GtObject(track_id=0, boxes=[RotatedBox(0, 0, 5, 5, 0), None])
        a = assign_targets(self.anchors, [gt], n_out=2)
        assert a.valid[:, 0].sum() == a.labels.sum()
        assert a.valid[:, 1].sum() == 0

    def test_missing_current_box_rejected(self):
        with pytest.raises(ValueError, match="current-frame"):
            assign_targets(self.anchors, [GtObject(0, [None])], n_out=1)

    def test_encode_regression_alias(self):
        a = RotatedBox(0, 0, 5, 5, 0)
        g = RotatedBox(1, 2, 4, 6, 0.3)
        np.testing.assert_array_equal(encode_regression(a, g), encode_box(a, g))


class TestMining:
    def test_three_to_one_ratio(self):
        labels = np.zeros(20)
        labels[:4] = 1.0
        scores = np.linspace(0.0, 0.95, 20)
        mask = mine_hard_negatives(scores, labels, ratio=3)
        assert mask[:4].all()
        assert mask.sum() == 4 + 12
        # kept negatives are exactly the highest-scoring ones
        neg_scores = scores[4:]
        keep = np.sort(np.flatnonzero(mask[4:]))
        expect = np.sort(np.argsort(-neg_scores, kind="stable")[:12])
        np.testing.assert_array_equal(keep, expect)

    def test_tie_breaks_to_lower_flat_index(self):
        labels = np.zeros(5)
        labels[0] = 1.0
        scores = np.array([0.9, 0.5, 0.5, 0.5, 0.5])
        mask = mine_hard_negatives(scores, labels, ratio=3)
        np.testing.assert_array_equal(mask, [1, 1, 1, 1, 0])

    def test_no_positives_keeps_some_negatives(self):
        scores = np.array([0.1, 0.8, 0.3, 0.9])
        mask = mine_hard_negatives(scores, np.zeros(4), ratio=3)
        assert mask.sum() == 3
        assert mask[3] == 1.0 and mask[1] == 1.0

    def test_fewer_negatives_than_quota(self):
        labels = np.array([1.0, 1.0, 0.0])
        mask = mine_hard_negatives(np.array([0.5, 0.5, 0.5]), labels, ratio=3)
        assert mask.all()

    def test_shape_preserved(self):
        scores = np.zeros((2, 3, 4))
        labels = np.zeros((2, 3, 4))
        labels[0, 0, 0] = 1.0
        assert mine_hard_negatives(scores, labels).shape == (2, 3, 4)


class TestLoss:
    def test_perfect_prediction_near_zero(self):
        model = micro_model()
        anchors = build_anchors(model.config)
        a = assign_targets(anchors, [GtObject(0, [RotatedBox(0, 0, 5, 5, 0)])], n_out=1)
        tape = T.Tape()
        # build exact predictions: probabilities = labels clipped, codes = targets
        p = np.clip(a.labels, 1e-9, 1 - 1e-9)
        cls_t = T.Tensor(np.log(p / (1 - p)), tape=tape)
        cls_t = T.sigmoid(cls_t)
        reg_t = T.Tensor(a.targets.copy(), tape=tape)
        loss, comps = total_loss(cls_t, reg_t, a)
        assert comps["reg"] == 0.0
        assert comps["total"] < 1e-6

    def test_alpha_scales_cls_term(self):
        model = micro_model()
        anchors = build_anchors(model.config)
        a = assign_targets(anchors, [GtObject(0, [RotatedBox(0, 0, 5, 5, 0)])], n_out=1)
        rng = np.random.default_rng(0)
        logits = rng.normal(size=a.labels.shape)
        codes = rng.normal(size=a.targets.shape)
        vals = {}
        for alpha in (1.0, 2.0):
            tape = T.Tape()
            cls_t = T.sigmoid(T.Tensor(logits.copy(), tape=tape))
            reg_t = T.Tensor(codes.copy(), tape=tape)
            _, comps = total_loss(cls_t, reg_t, a, alpha=alpha)
            vals[alpha] = comps
        assert vals[2.0]["reg"] == vals[1.0]["reg"]
        assert vals[2.0]["total"] - vals[2.0]["reg"] == pytest.approx(
            2.0 * (vals[1.0]["total"] - vals[1.0]["reg"])
        )

    def test_smooth_l1_cases(self):
        # piecewise values: 0.5 -> 0.125, 2.0 -> 1.5
        tape = T.Tape()
        pred = T.Tensor(np.array([0.5, 2.0]), tape=tape)
        loss = T.smooth_l1(pred, np.zeros(2), np.ones(2))
        assert loss.item() == pytest.approx(0.125 + 1.5)


class TestSchedule:
    def test_halves_at_milestones(self):
        cfg = TrainConfig(iterations=1000, lr=1e-4)
        assert lr_at(0, cfg) == 1e-4
        assert lr_at(599, cfg) == 1e-4
        assert lr_at(600, cfg) == 5e-5
        assert lr_at(799, cfg) == 5e-5
        assert lr_at(800, cfg) == 2.5e-5
        assert lr_at(999, cfg) == 2.5e-5

    def test_bad_config_rejected(self):
        with pytest.raises(ValueError):
            TrainConfig(alpha=0.0)
        with pytest.raises(ValueError):
            TrainConfig(milestones=(0.5, 1.2))
        with pytest.raises(ValueError):
            TrainConfig(hnm_ratio=0)


def toy_sample(n_out=1):
    occ = np.zeros((1, 2, 16, 16))
    occ[:, :, 6:10, 6:10] = 1.0
    box = RotatedBox(0.0, 0.0, 5.0, 5.0, 0.0)
    return Sample(occupancy=occ, objects=[GtObject(0, [box] * n_out)])


class TestTrainLoop:
    def test_zero_iterations_leaves_params_unchanged(self):
        model = micro_model(seed=1)
        anchors = build_anchors(model.config)
        before = {k: v.copy() for k, v in model.params.items()}
        _, log = train([toy_sample()], model, anchors, TrainConfig(iterations=0, batch_size=1))
        assert log == []
        for k in before:
            np.testing.assert_array_equal(model.params[k], before[k])

    def test_deterministic_in_seed(self):
        logs = []
        for _ in range(2):
            model = micro_model(seed=2)
            anchors = build_anchors(model.config)
            _, log = train(
                [toy_sample()], model, anchors, TrainConfig(iterations=3, batch_size=1, seed=5)
            )
            logs.append(log)
        assert logs[0] == logs[1]

    def test_empty_dataset_rejected(self):
        model = micro_model()
        with pytest.raises(ValueError, match="non-empty"):
            train([], model, build_anchors(model.config), TrainConfig(iterations=1))

    def test_loss_decreases_over_50_iterations(self):
        # train ten seeds; demand improvement on at least nine
        wins = 0
        for seed in range(10):
            model = micro_model(seed=seed)
            anchors = build_anchors(model.config)
            cfg = TrainConfig(iterations=50, lr=1e-3, batch_size=1, seed=seed)
            _, log = train([toy_sample()], model, anchors, cfg)
            first = np.mean([r[2] for r in log[:5]])
            last = np.mean([r[2] for r in log[-5:]])
            if last < first:
                wins += 1
        assert wins >= 9

    def test_log_line_format(self):
        line = format_log_line((7, 1e-4, 1.25, 1.0, 0.25))
        assert line.split() == ["7", "0.0001", "1.25", "1", "0.25"]
