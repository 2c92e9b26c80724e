"""Anchor/ground-truth assignment, the joint loss, and the training loop."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .geom import RotatedBox, iou
from .net import CODE_SIZE, AnchorGrid, Model, encode_box
from .voxel import InputTensor


@dataclass
class GtObject:
    """One labeled object for a training sample.

    ``boxes[0]`` is the current-frame box (required); ``boxes[t]`` for t >= 1
    is the box t frames ahead, or None where the track no longer exists.
    """

    track_id: int
    boxes: list


@dataclass
class Sample:
    """One training example: stacked occupancy plus its labeled objects."""

    occupancy: np.ndarray  # [T, Z, X, Y]
    objects: list  # of GtObject


@dataclass
class TargetAssignment:
    labels: np.ndarray  # [K, I, J] in {0, 1}
    matched_gt: np.ndarray  # [K, I, J] index into the gt list, -1 for background
    targets: np.ndarray  # [K, n_out, 6, I, J]
    valid: np.ndarray  # [K, n_out, I, J] timestamps with an existing gt box


@dataclass
class TrainConfig:
    iterations: int = 1000
    lr: float = 1e-4
    alpha: float = 1.0
    milestones: tuple = (0.6, 0.8)
    hnm_ratio: int = 3
    iou_match_thr: float = 0.4
    batch_size: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if any(not 0.0 < m < 1.0 for m in self.milestones):
            raise ValueError("milestones must be fractions in (0, 1)")
        if self.hnm_ratio < 1:
            raise ValueError("hnm_ratio must be >= 1")


def encode_regression(anchor: RotatedBox, gt: RotatedBox):
    """6-vector regression target of a ground-truth box against an anchor."""
    return encode_box(anchor, gt)


def assign_targets(anchors: AnchorGrid, objects, n_out, iou_thr=0.4):
    """Match anchors to ground truth on the current frame.

    Anchors overlapping a gt box above ``iou_thr`` become positive; every gt
    left unmatched is force-assigned to its highest-IoU anchor. Positive
    anchors carry encoded targets for each timestamp where the matched track
    still exists.
    """
    K, I, J = anchors.shape
    n = K * I * J
    labels = np.zeros(n)
    matched = np.full(n, -1, dtype=np.int64)
    targets = np.zeros((n, n_out, CODE_SIZE))
    valid = np.zeros((n, n_out))

    if objects:
        ious = np.zeros((n, len(objects)))
        for m, obj in enumerate(objects):
            gt0 = obj.boxes[0]
            if gt0 is None:
                raise ValueError(f"gt object {obj.track_id} lacks a current-frame box")
            for a, anchor in enumerate(anchors.boxes):
                ious[a, m] = iou(anchor, gt0)
        best_gt = ious.argmax(axis=1)
        best_iou = ious[np.arange(n), best_gt]
        pos = best_iou > iou_thr
        matched[pos] = best_gt[pos]
        for m in range(len(objects)):
            if not np.any(matched == m):
                matched[ious[:, m].argmax()] = m
        labels[matched >= 0] = 1.0
        for a in np.flatnonzero(matched >= 0):
            obj = objects[matched[a]]
            anchor = anchors.boxes[a]
            for t in range(n_out):
                box = obj.boxes[t] if t < len(obj.boxes) else None
                if box is not None:
                    targets[a, t] = encode_box(anchor, box)
                    valid[a, t] = 1.0

    return TargetAssignment(
        labels=labels.reshape(K, I, J),
        matched_gt=matched.reshape(K, I, J),
        targets=targets.reshape(K, I, J, n_out, CODE_SIZE).transpose(0, 3, 4, 1, 2),
        valid=valid.reshape(K, I, J, n_out).transpose(0, 3, 1, 2),
    )


def mine_hard_negatives(cls_scores, labels, ratio=3):
    """Mask of all positives plus the highest-scoring negatives at 3:1.

    Score ties break toward the lower flat index. Frames without positives
    keep the top max(1, ratio) negatives so the loss never goes empty.
    """
    scores = np.asarray(cls_scores, dtype=np.float64).reshape(-1)
    lab = np.asarray(labels, dtype=np.float64).reshape(-1)
    if scores.shape != lab.shape:
        raise ValueError("cls_scores and labels must have the same size")
    mask = lab > 0.5
    n_pos = int(mask.sum())
    n_neg_keep = ratio * n_pos if n_pos else max(1, ratio)
    neg_idx = np.flatnonzero(~mask)
    if len(neg_idx):
        order = neg_idx[np.argsort(-scores[neg_idx], kind="stable")]
        mask[order[:n_neg_keep]] = True
    return mask.reshape(np.shape(cls_scores)).astype(np.float64)


def total_loss(cls_tensor, reg_tensor, assignment: TargetAssignment, alpha=1.0, hnm_ratio=3):
    """alpha * masked BCE + smooth-L1 over positive anchors' valid timestamps."""
    cls_mask = mine_hard_negatives(cls_tensor.data, assignment.labels, hnm_ratio)
    cls_loss = T.bce_loss(cls_tensor, assignment.labels, cls_mask)

    pos = (assignment.labels > 0.5).astype(np.float64)
    reg_mask = (assignment.valid * pos[:, None]) [:, :, None]  # [K,n_out,1,I,J]
    reg_mask = np.broadcast_to(reg_mask, assignment.targets.shape).copy()
    reg_loss = T.smooth_l1(reg_tensor, assignment.targets, reg_mask)

    loss = T.add(T.scale(cls_loss, alpha), reg_loss)
    components = {"cls": cls_loss.item(), "reg": reg_loss.item(), "total": loss.item()}
    return loss, components


def lr_at(iteration, config: TrainConfig):
    """Step schedule: halve at each milestone fraction of the run."""
    lr = config.lr
    for m in config.milestones:
        if iteration >= int(m * config.iterations):
            lr *= 0.5
    return lr


def train(samples, model: Model, anchors: AnchorGrid, config: TrainConfig, log_fn=None):
    """Adam training over precomputed assignments; deterministic in the seed.

    Returns the trained parameter dict (updated in place on the model) and
    the per-iteration log: (iteration, lr, total, cls, reg).
    """
    if not samples:
        raise ValueError("training needs a non-empty dataset")
    assignments = [
        assign_targets(anchors, s.objects, model.config.n_out, config.iou_match_thr)
        for s in samples
    ]
    rng = np.random.default_rng(config.seed)
    state = T.AdamState()
    log = []
    order = []
    for it in range(config.iterations):
        grads = {}
        totals = {"cls": 0.0, "reg": 0.0, "total": 0.0}
        for _ in range(config.batch_size):
            if not order:
                order = list(rng.permutation(len(samples)))
            idx = order.pop()
            tape = T.Tape()
            _, cls_t, reg_t = model.forward(InputTensor(samples[idx].occupancy), tape=tape)
            loss, comps = total_loss(
                cls_t, reg_t, assignments[idx], alpha=config.alpha, hnm_ratio=config.hnm_ratio
            )
            if not math.isfinite(comps["total"]):
                raise RuntimeError(f"non-finite loss at iteration {it} (sample {idx})")
            T.backward(loss, tape)
            for name, g in tape.param_grads.items():
                grads[name] = grads.get(name, 0.0) + g
            for k in totals:
                totals[k] += comps[k]
        lr = lr_at(it, config)
        T.adam_step(model.params, grads, state, lr)
        record = (it, lr, totals["total"], totals["cls"], totals["reg"])
        log.append(record)
        if log_fn is not None:
            log_fn(record)
    return model.params, log


def format_log_line(record):
    """Plain-text training-log schema: iter lr total cls reg."""
    it, lr, total, cls, reg = record
    return f"{it} {lr:.10g} {total:.10g} {cls:.10g} {reg:.10g}"
