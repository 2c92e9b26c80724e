"""End-to-end glue: run a model over a dataset and evaluate every task."""

from __future__ import annotations

from dataclasses import replace

from .metrics import (
    EvalConfig,
    GtBox,
    ScoredBox,
    average_precision,
    clear_mot,
    forecast_error,
    map_by_distance,
)
from .net import AnchorGrid, DetectionSet, Model, build_anchors, decode
from .sim import Dataset, box_ego_to_world, box_world_to_ego, gt_tracks_world, make_samples
from .track import decode_tracklets, hungarian_track
from .voxel import InputTensor, stack_temporal


def detect_dataset(model: Model, anchors: AnchorGrid, dataset: Dataset, score_thr=0.5, nms_thr=0.1):
    """Per-frame DetectionSets in each frame's own ego coordinates."""
    cfg = model.config
    sets = []
    for t in range(cfg.n_in - 1, dataset.duration):
        history = dataset.frames[t - cfg.n_in + 1 : t + 1]
        inp = stack_temporal(history, cfg.grid, n_expected=cfg.n_in)
        out, _, _ = model.forward(inp)
        sets.append(decode(out, anchors, frame=t, score_thr=score_thr, nms_thr=nms_thr))
    return sets


def detections_to_world(detection_sets, dataset: Dataset):
    """Re-express all boxes (current and forecasts) in world coordinates."""
    world = []
    for ds in detection_sets:
        pose = dataset.frames[ds.frame].pose
        dets = []
        for d in ds.detections:
            dets.append(replace(d, boxes=[box_ego_to_world(b, pose) for b in d.boxes]))
        world.append(DetectionSet(frame=ds.frame, detections=dets))
    return world


def _eval_boxes(detection_sets, dataset: Dataset):
    """(ScoredBox list, GtBox list) in ego coordinates, on evaluated frames."""
    frames = {ds.frame for ds in detection_sets}
    dets = [
        ScoredBox(frame=ds.frame, box=d.boxes[0], score=d.score)
        for ds in detection_sets
        for d in ds.detections
    ]
    gts = []
    for t in sorted(frames):
        pose = dataset.frames[t].pose
        for lab in dataset.labels.get(t, []):
            gts.append(
                GtBox(
                    frame=t,
                    box=box_world_to_ego(lab.box, pose),
                    num_points=lab.num_points,
                    track_id=lab.track_id,
                )
            )
    return dets, gts


def evaluate_detection(detection_sets, dataset: Dataset, eval_cfg: EvalConfig):
    """mAP table over IoU thresholds, plus min-points and distance sweeps."""
    dets, gts = _eval_boxes(detection_sets, dataset)
    by_iou = {}
    for thr in eval_cfg.iou_thresholds:
        pr = average_precision(dets, gts, thr, eval_cfg.min_points)
        by_iou[thr] = pr.ap if pr is not None else None
    by_min_points = {}
    for mp in range(0, eval_cfg.min_points + 1):
        pr = average_precision(dets, gts, 0.7, mp)
        by_min_points[mp] = pr.ap if pr is not None else None
    by_distance = map_by_distance(dets, gts, 0.7, eval_cfg.distance_bins, eval_cfg.min_points)
    return {
        "ap_by_iou": by_iou,
        "ap_by_min_points": by_min_points,
        "ap_by_distance": {f"{lo:g}-{hi:g}": ap for (lo, hi), ap in by_distance.items()},
    }


def evaluate_tracking(detection_sets, dataset: Dataset, n_out, eval_cfg: EvalConfig,
                      match_thr=0.5, min_points=None):
    """CLEAR-MOT for the tracklet decoder and the Hungarian baseline."""
    world = detections_to_world(detection_sets, dataset)
    frames = {ds.frame for ds in detection_sets}
    gt = gt_tracks_world(dataset, frames=frames, min_points=min_points)
    decoded = decode_tracklets(world, n_out, match_thr=match_thr)
    baseline = hungarian_track(world)
    return {
        "decoder": clear_mot(decoded, gt, eval_cfg.assoc_iou, eval_cfg.track_score_thr),
        "hungarian": clear_mot(baseline, gt, eval_cfg.assoc_iou, eval_cfg.track_score_thr),
    }, decoded, baseline


def evaluate_forecast(detection_sets, dataset: Dataset, eval_cfg: EvalConfig, min_points=None):
    world = detections_to_world(detection_sets, dataset)
    gt = gt_tracks_world(dataset, frames=None, min_points=min_points)
    return forecast_error(world, gt, eval_cfg.forecast_horizons, eval_cfg.forecast_match_iou)
