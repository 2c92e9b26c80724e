"""Detection AP, CLEAR-MOT tracking metrics and forecast displacement errors."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .geom import iou


@dataclass
class EvalConfig:
    iou_thresholds: tuple = (0.5, 0.6, 0.7, 0.8, 0.9)
    min_points: int = 3
    distance_bins: tuple = tuple(float(d) for d in range(10, 101, 10))
    assoc_iou: float = 0.5
    track_score_thr: float = 0.9
    forecast_horizons: tuple = (1, 2, 3, 4)
    forecast_match_iou: float = 0.5
    score_thr: float = 0.5
    nms_thr: float = 0.1

    def __post_init__(self):
        if any(not 0.0 < t <= 1.0 for t in self.iou_thresholds):
            raise ValueError("iou thresholds must lie in (0, 1]")
        if list(self.distance_bins) != sorted(self.distance_bins):
            raise ValueError("distance bins must be ordered")


@dataclass
class ScoredBox:
    """One detection for evaluation purposes."""

    frame: int
    box: object
    score: float


@dataclass
class GtBox:
    """One ground-truth box with its 3D point count (for don't-care rules)."""

    frame: int
    box: object
    num_points: int = 3
    track_id: int = -1


@dataclass
class PRCurve:
    recall: list
    precision: list
    ap: float


def average_precision(dets, gts, iou_thr, min_points=3):
    """All-point interpolated AP with the minimum-points don't-care rule.

    Detections are ranked globally by score and matched greedily to the
    not-yet-matched ground truth of their frame. A detection whose best
    match is a don't-care box counts neither as hit nor false positive.
    Returns None when no cared-for ground truth exists.
    """
    care = [g for g in gts if g.num_points >= min_points]
    dontcare = [g for g in gts if g.num_points < min_points]
    if not care:
        return None

    care_by_frame = {}
    for g in care:
        care_by_frame.setdefault(g.frame, []).append(g)
    dc_by_frame = {}
    for g in dontcare:
        dc_by_frame.setdefault(g.frame, []).append(g)

    order = sorted(
        dets,
        key=lambda d: (-d.score, d.frame, d.box.cx, d.box.cy, d.box.w, d.box.h, d.box.theta),
    )
    matched = set()
    tp_flags = []
    for det in order:
        best_iou, best_gt, best_dc = 0.0, None, False
        for g in care_by_frame.get(det.frame, ()):
            if id(g) in matched:
                continue
            v = iou(det.box, g.box)
            if v > best_iou:
                best_iou, best_gt, best_dc = v, g, False
        for g in dc_by_frame.get(det.frame, ()):
            v = iou(det.box, g.box)
            if v > best_iou:
                best_iou, best_gt, best_dc = v, g, True
        if best_iou >= iou_thr:
            if best_dc:
                continue  # neither TP nor FP
            matched.add(id(best_gt))
            tp_flags.append(True)
        else:
            tp_flags.append(False)

    n_gt = len(care)
    recall, precision = [], []
    tp = fp = 0
    for flag in tp_flags:
        tp += flag
        fp += not flag
        recall.append(tp / n_gt)
        precision.append(tp / (tp + fp))

    ap = 0.0
    prev_r = 0.0
    # monotone envelope from the right, integrated over recall
    env = list(precision)
    for i in range(len(env) - 2, -1, -1):
        env[i] = max(env[i], env[i + 1])
    for r, p_ in zip(recall, env):
        ap += (r - prev_r) * p_
        prev_r = r
    return PRCurve(recall=recall, precision=precision, ap=ap)


def map_by_distance(dets, gts, iou_thr, bins, min_points=3):
    """AP per ego-distance bin; empty bins are reported as absent (None)."""
    edges = [0.0] + list(bins)

    def bin_of(box):
        d = math.hypot(box.cx, box.cy)
        for b in range(len(edges) - 1):
            if edges[b] <= d < edges[b + 1]:
                return b
        return len(edges) - 2 if d == edges[-1] else None

    gt_bins = {}
    for g in gts:
        b = bin_of(g.box)
        if b is not None:
            gt_bins.setdefault(b, []).append(g)

    # a detection evaluates in the bin of its nearest ground truth (its
    # matched one whenever a match exists)
    det_bins = {}
    for det in dets:
        best, best_v = None, -1.0
        for g in gts:
            if g.frame != det.frame:
                continue
            v = iou(det.box, g.box)
            if v > best_v:
                best, best_v = g, v
        if best is None or best_v == 0.0:
            best = min(
                (g for g in gts if g.frame == det.frame),
                key=lambda g: math.hypot(g.box.cx - det.box.cx, g.box.cy - det.box.cy),
                default=None,
            )
        b = bin_of(best.box) if best is not None else bin_of(det.box)
        if b is not None:
            det_bins.setdefault(b, []).append(det)

    out = {}
    for b in range(len(edges) - 1):
        label = (edges[b], edges[b + 1])
        if b not in gt_bins:
            out[label] = None
            continue
        pr = average_precision(det_bins.get(b, []), gt_bins[b], iou_thr, min_points)
        out[label] = pr.ap if pr is not None else None
    return out


@dataclass
class MotResult:
    mota: float
    motp: float
    mt: float
    ml: float
    fp: int = 0
    fn: int = 0
    idsw: int = 0
    num_gt: int = 0


def clear_mot(tracklets, gt_tracks, assoc_iou=0.5, score_thr=0.9):
    """CLEAR-MOT bookkeeping with identity-preserving per-frame matching.

    ``tracklets`` are TrackletFrame-like records (frame, track_id, box,
    score); ``gt_tracks`` maps gt id -> {frame: RotatedBox}.
    """
    hyp_by_frame = {}
    for r in tracklets:
        if r.score >= score_thr:
            hyp_by_frame.setdefault(r.frame, []).append(r)
    frames = set(hyp_by_frame)
    for track in gt_tracks.values():
        frames.update(track)

    fp = fn = idsw = 0
    num_gt = 0
    iou_sum = 0.0
    n_match = 0
    last_match = {}  # gt id -> hyp id, persists across gaps
    prev_pairs = {}  # gt id -> hyp id matched in the previous frame

    gt_cover = {gid: 0 for gid in gt_tracks}

    for f in sorted(frames):
        gts = [(gid, track[f]) for gid, track in gt_tracks.items() if f in track]
        hyps = list(hyp_by_frame.get(f, []))
        num_gt += len(gts)

        pairs = {}
        used_hyp = set()
        # keep last frame's associations first when still valid
        for gid, gbox in gts:
            want = prev_pairs.get(gid)
            if want is None:
                continue
            for h in hyps:
                if h.track_id == want and h.track_id not in used_hyp:
                    v = iou(gbox, h.box)
                    if v >= assoc_iou:
                        pairs[gid] = (h.track_id, v)
                        used_hyp.add(h.track_id)
                    break
        rest_gt = [(gid, gbox) for gid, gbox in gts if gid not in pairs]
        rest_hyp = [h for h in hyps if h.track_id not in used_hyp]
        if rest_gt and rest_hyp:
            cost = np.ones((len(rest_gt), len(rest_hyp)))
            for i, (_gid, gbox) in enumerate(rest_gt):
                for j, h in enumerate(rest_hyp):
                    cost[i, j] = 1.0 - iou(gbox, h.box)
            rows, cols = linear_sum_assignment(cost)
            for i, j in zip(rows, cols):
                v = 1.0 - cost[i, j]
                if v >= assoc_iou:
                    pairs[rest_gt[i][0]] = (rest_hyp[j].track_id, v)
                    used_hyp.add(rest_hyp[j].track_id)

        fn += len(gts) - len(pairs)
        fp += len(hyps) - len(pairs)
        for gid, (hid, v) in pairs.items():
            iou_sum += v
            n_match += 1
            gt_cover[gid] += 1
            if gid in last_match and last_match[gid] != hid:
                idsw += 1
            last_match[gid] = hid
        prev_pairs = {gid: hid for gid, (hid, _v) in pairs.items()}

    mota = 1.0 - (fn + fp + idsw) / num_gt if num_gt else 1.0
    motp = iou_sum / n_match if n_match else 0.0
    mt = ml = 0.0
    if gt_tracks:
        fracs = [gt_cover[gid] / len(track) for gid, track in gt_tracks.items() if track]
        mt = sum(f >= 0.8 for f in fracs) / len(fracs)
        ml = sum(f <= 0.2 for f in fracs) / len(fracs)
    return MotResult(mota=mota, motp=motp, mt=mt, ml=ml, fp=fp, fn=fn, idsw=idsw, num_gt=num_gt)


@dataclass
class ForecastResult:
    l1: dict  # horizon -> mean L1 center distance
    l2: dict  # horizon -> mean L2 center distance
    recall: float


def forecast_error(detection_sets, gt_tracks, horizons, match_iou=0.5):
    """Center displacement of forecasts, evaluated on true positives only.

    Detections are matched to ground truth at their own frame; horizon h
    compares the detection's h-step forecast with the matched track's box
    at frame + h, skipping horizons past the track's end.
    """
    sums_l1 = {h: 0.0 for h in horizons}
    sums_l2 = {h: 0.0 for h in horizons}
    counts = {h: 0 for h in horizons}
    matched_total = 0
    gt_total = 0

    for ds in detection_sets:
        f = ds.frame
        gts = [(gid, track[f]) for gid, track in gt_tracks.items() if f in track]
        gt_total += len(gts)
        taken = set()
        for det in sorted(ds.detections, key=lambda d: -d.score):
            best_gid, best_v = None, 0.0
            for gid, gbox in gts:
                if gid in taken:
                    continue
                v = iou(det.boxes[0], gbox)
                if v > best_v:
                    best_gid, best_v = gid, v
            if best_gid is None or best_v < match_iou:
                continue
            taken.add(best_gid)
            matched_total += 1
            track = gt_tracks[best_gid]
            for h in horizons:
                if h >= len(det.boxes) or (f + h) not in track:
                    continue
                fut = det.boxes[h]
                gt_fut = track[f + h]
                dx = fut.cx - gt_fut.cx
                dy = fut.cy - gt_fut.cy
                sums_l1[h] += abs(dx) + abs(dy)
                sums_l2[h] += math.hypot(dx, dy)
                counts[h] += 1

    l1 = {h: (sums_l1[h] / counts[h] if counts[h] else None) for h in horizons}
    l2 = {h: (sums_l2[h] / counts[h] if counts[h] else None) for h in horizons}
    recall = matched_total / gt_total if gt_total else 0.0
    return ForecastResult(l1=l1, l2=l2, recall=recall)


def write_report(path, entries):
    """Structured metrics report: deterministic JSON, one object per metric."""
    with open(path, "w") as f:
        json.dump(entries, f, indent=2, sort_keys=True)
        f.write("\n")
