"""Operator entry point: generate, train, eval, track, ablate, render, bench."""

from __future__ import annotations

import argparse
import json
import math
import os
import platform
import sys
import time
from dataclasses import fields

import numpy as np

from . import __version__
from . import tensor as T
from .metrics import EvalConfig, write_report
from .net import DetectionSet, Detection, Model, ModelConfig, build_anchors
from .pipeline import (
    detect_dataset,
    evaluate_detection,
    evaluate_forecast,
    evaluate_tracking,
)
from .sim import (
    Dataset,
    SimConfig,
    box_world_to_ego,
    export_dataset,
    generate_dataset,
    import_dataset,
    make_samples,
)
from .track import decode_tracklets, dump_tracklets
from .train import TrainConfig, format_log_line, train
from .voxel import GridSpec, voxelize


DEFAULT_CONFIG = {
    "seed": 0,
    "grid": {
        "x_range": [-24.0, 24.0],
        "y_range": [-16.0, 16.0],
        "z_range": [0.0, 1.6],
        "cell": 0.2,
    },
    "model": {
        "n_in": 5,
        "n_out": 5,
        "fusion": "late",
        "widths": [8, 16, 32, 64],
        "head_width": 0,
    },
    "train": {},
    "sim": {},
    "eval": {},
}


class ConfigError(ValueError):
    pass


def _check_keys(section, d, allowed):
    unknown = set(d) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in '{section}': {sorted(unknown)}")


class RunConfig:
    """Unified run configuration resolved from file + overrides."""

    def __init__(self, raw):
        _check_keys("(top level)", raw, {"seed", "grid", "model", "train", "sim", "eval"})
        merged = json.loads(json.dumps(DEFAULT_CONFIG))
        for k, v in raw.items():
            if isinstance(v, dict):
                merged[k].update(v)
            else:
                merged[k] = v
        self.seed = int(merged["seed"])

        g = merged["grid"]
        _check_keys("grid", g, {"x_range", "y_range", "z_range", "cell"})
        self.grid = GridSpec(
            x_range=tuple(g["x_range"]),
            y_range=tuple(g["y_range"]),
            z_range=tuple(g["z_range"]),
            cell=g["cell"],
        )

        m = merged["model"]
        _check_keys("model", m, {"n_in", "n_out", "fusion", "widths", "head_width", "anchor_specs"})
        self.model = ModelConfig(grid=self.grid, **{
            k: (tuple(v) if isinstance(v, list) else v) for k, v in m.items()
        })

        tr = dict(merged["train"])
        _check_keys("train", tr, {f.name for f in fields(TrainConfig)})
        tr.setdefault("seed", self.seed)
        if "milestones" in tr:
            tr["milestones"] = tuple(tr["milestones"])
        self.train = TrainConfig(**tr)

        sm = dict(merged["sim"])
        _check_keys("sim", sm, {f.name for f in fields(SimConfig)})
        sm.setdefault("seed", self.seed)
        self.sim = SimConfig.from_dict(sm)

        ev = dict(merged["eval"])
        _check_keys("eval", ev, {f.name for f in fields(EvalConfig)})
        for key in ("iou_thresholds", "distance_bins", "forecast_horizons"):
            if key in ev:
                ev[key] = tuple(ev[key])
        self.eval = EvalConfig(**ev)

    def resolved(self):
        return {
            "version": __version__,
            "seed": self.seed,
            "grid": {
                "x_range": list(self.grid.x_range),
                "y_range": list(self.grid.y_range),
                "z_range": list(self.grid.z_range),
                "cell": self.grid.cell,
            },
            "model": self.model.to_dict(),
            "train": {f.name: _jsonable(getattr(self.train, f.name)) for f in fields(TrainConfig)},
            "sim": self.sim.to_dict(),
            "eval": {f.name: _jsonable(getattr(self.eval, f.name)) for f in fields(EvalConfig)},
        }


def _jsonable(v):
    return list(v) if isinstance(v, tuple) else v


def _apply_set(raw, assignments):
    for item in assignments:
        if "=" not in item:
            raise ConfigError(f"--set needs key=value, got {item!r}")
        key, value = item.split("=", 1)
        try:
            parsed = json.loads(value)
        except json.JSONDecodeError:
            parsed = value
        node = raw
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = parsed
    return raw


def load_run_config(path, seed=None, assignments=()):
    if path:
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        with open(path) as f:
            raw = json.load(f)
    else:
        raw = {}
    raw = _apply_set(raw, assignments)
    if seed is not None:
        raw["seed"] = seed
    return RunConfig(raw)


def _prepare_out(out_dir, config: RunConfig):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.json"), "w") as f:
        json.dump(config.resolved(), f, indent=2, sort_keys=True)
        f.write("\n")


# ---------------------------------------------------------------------------
# commands


def cmd_generate(config: RunConfig, out_dir):
    _prepare_out(out_dir, config)
    dataset = generate_dataset(config.sim)
    export_dataset(dataset, os.path.join(out_dir, "dataset.jsonl"))
    return 0


def cmd_train(config: RunConfig, dataset_path, out_dir):
    _prepare_out(out_dir, config)
    dataset = import_dataset(dataset_path)
    model = Model(config.model, seed=config.seed)
    anchors = build_anchors(config.model)
    samples, _ = make_samples(dataset, config.grid, config.model.n_in, config.model.n_out)
    log_path = os.path.join(out_dir, "train.log")
    with open(log_path, "w") as logf:
        logf.write("# iteration lr total cls reg\n")
        train(
            samples,
            model,
            anchors,
            config.train,
            log_fn=lambda rec: logf.write(format_log_line(rec) + "\n"),
        )
    T.save_checkpoint(
        os.path.join(out_dir, "checkpoint.bin"), model.params, config.model.to_dict()
    )
    return 0


def _load_model(config: RunConfig, checkpoint_path):
    if not os.path.exists(checkpoint_path):
        raise ConfigError(f"checkpoint not found: {checkpoint_path}")
    params, saved_cfg = T.load_checkpoint(checkpoint_path)
    if saved_cfg is None:
        raise ConfigError("checkpoint carries no model config")
    if saved_cfg != config.model.to_dict():
        raise ConfigError(
            "checkpoint/config mismatch: the checkpoint was trained with a different model config"
        )
    return Model(ModelConfig.from_dict(saved_cfg), params=params)


def cmd_eval(config: RunConfig, dataset_path, checkpoint_path, out_dir):
    _prepare_out(out_dir, config)
    dataset = import_dataset(dataset_path)
    model = _load_model(config, checkpoint_path)
    anchors = build_anchors(model.config)
    sets = detect_dataset(
        model, anchors, dataset, score_thr=config.eval.score_thr, nms_thr=config.eval.nms_thr
    )
    report = evaluate_detection(sets, dataset, config.eval)
    write_report(os.path.join(out_dir, "detection_metrics.json"), report)
    return 0


def cmd_track(config: RunConfig, dataset_path, checkpoint_path, out_dir):
    _prepare_out(out_dir, config)
    dataset = import_dataset(dataset_path)
    model = _load_model(config, checkpoint_path)
    anchors = build_anchors(model.config)
    sets = detect_dataset(
        model, anchors, dataset, score_thr=config.eval.score_thr, nms_thr=config.eval.nms_thr
    )
    results, decoded, _baseline = evaluate_tracking(
        sets, dataset, model.config.n_out, config.eval, min_points=config.eval.min_points
    )
    forecast = evaluate_forecast(sets, dataset, config.eval)
    report = {
        "clear_mot": {
            name: {
                "MOTA": r.mota, "MOTP": r.motp, "MT": r.mt, "ML": r.ml,
                "FP": r.fp, "FN": r.fn, "IDSW": r.idsw, "num_gt": r.num_gt,
            }
            for name, r in results.items()
        },
        "forecast": {
            "recall": forecast.recall,
            "l1": {str(h): v for h, v in forecast.l1.items()},
            "l2": {str(h): v for h, v in forecast.l2.items()},
        },
    }
    write_report(os.path.join(out_dir, "tracking_metrics.json"), report)
    dump_tracklets(decoded, os.path.join(out_dir, "tracklets.txt"))
    return 0


def _ablation_variants(base: ModelConfig):
    return [
        ("single_frame", dict(n_in=1, n_out=1, fusion="early"), False),
        ("early_fusion", dict(n_out=1, fusion="early"), False),
        ("late_fusion", dict(n_out=1, fusion="late"), False),
        ("late_fusion_forecast", dict(fusion="late"), False),
        ("late_fusion_forecast_tracking", dict(fusion="late"), True),
    ]


def tracklets_to_detections(records, dataset: Dataset):
    """Aggregated tracklet boxes re-expressed as per-frame ego detections."""
    by_frame = {}
    for r in records:
        by_frame.setdefault(r.frame, []).append(r)
    sets = []
    for f in sorted(by_frame):
        pose = dataset.frames[f].pose
        dets = [
            Detection(score=r.score, boxes=[box_world_to_ego(r.box, pose)], track_id=r.track_id)
            for r in by_frame[f]
        ]
        sets.append(DetectionSet(frame=f, detections=dets))
    return sets


def run_ablation(config: RunConfig, dataset: Dataset, val_dataset: Dataset = None):
    """Train and evaluate the five-variant ladder; returns rows of AP tables."""
    from .pipeline import detections_to_world

    val = val_dataset or dataset
    rows = []
    for name, overrides, with_tracking in _ablation_variants(config.model):
        mcfg = ModelConfig.from_dict({**config.model.to_dict(), **overrides})
        model = Model(mcfg, seed=config.seed)
        anchors = build_anchors(mcfg)
        samples, _ = make_samples(dataset, config.grid, mcfg.n_in, mcfg.n_out)
        train(samples, model, anchors, config.train)
        sets = detect_dataset(
            model, anchors, val, score_thr=config.eval.score_thr, nms_thr=config.eval.nms_thr
        )
        if with_tracking:
            world = detections_to_world(sets, val)
            decoded = decode_tracklets(world, mcfg.n_out)
            sets = tracklets_to_detections(decoded, val)
        report = evaluate_detection(sets, val, config.eval)
        rows.append({"variant": name, "ap_by_iou": report["ap_by_iou"]})
    return rows


def cmd_ablate(config: RunConfig, dataset_path, out_dir, val_dataset_path=None):
    _prepare_out(out_dir, config)
    dataset = import_dataset(dataset_path)
    val = import_dataset(val_dataset_path) if val_dataset_path else None
    rows = run_ablation(config, dataset, val)
    write_report(os.path.join(out_dir, "ablation.json"), {"rows": rows})
    return 0


# ---------------------------------------------------------------------------
# rendering


def _id_color(track_id):
    h = (track_id * 2654435761) % 360
    c = 200
    x = int(c * (1 - abs((h / 60) % 2 - 1)))
    sector = int(h // 60)
    rgb = [(c, x, 0), (x, c, 0), (0, c, x), (0, x, c), (x, 0, c), (c, 0, x)][sector]
    return tuple(v + 55 for v in rgb)


def _draw_box(img, box, color, grid: GridSpec):
    corners = box.corners()
    for e in range(4):
        ax, ay = corners[e]
        bx, by = corners[(e + 1) % 4]
        steps = max(2, int(math.hypot(bx - ax, by - ay) / grid.cell) * 2)
        for s in range(steps + 1):
            t = s / steps
            _plot(img, ax + t * (bx - ax), ay + t * (by - ay), color, grid)


def _plot(img, x, y, color, grid: GridSpec, size=0):
    ix = int(math.floor((x - grid.x_range[0]) / grid.cell))
    iy = int(math.floor((y - grid.y_range[0]) / grid.cell))
    for dx in range(-size, size + 1):
        for dy in range(-size, size + 1):
            if 0 <= ix + dx < img.shape[0] and 0 <= iy + dy < img.shape[1]:
                img[ix + dx, iy + dy] = color


def _write_ppm(path, img):
    with open(path, "wb") as f:
        f.write(f"P6\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        f.write(np.flip(img, axis=0).astype(np.uint8).tobytes())


def cmd_render(config: RunConfig, dataset_path, tracklets_path, out_dir, svg=False):
    from .track import load_tracklets

    _prepare_out(out_dir, config)
    dataset = import_dataset(dataset_path)
    records = load_tracklets(tracklets_path) if tracklets_path else []
    by_frame = {}
    track_centers = {}
    for r in records:
        by_frame.setdefault(r.frame, []).append(r)
        track_centers.setdefault(r.track_id, {})[r.frame] = (r.box.cx, r.box.cy)
    grid = config.grid
    horizon = config.model.n_out
    for t in range(dataset.duration):
        pose = dataset.frames[t].pose
        occ = voxelize(dataset.frames[t].points, grid).max(axis=0)
        img = np.zeros((grid.nx, grid.ny, 3), dtype=np.uint8)
        img[occ > 0] = (90, 90, 90)
        for r in by_frame.get(t, []):
            color = _id_color(r.track_id)
            _draw_box(img, box_world_to_ego(r.box, pose), color, grid)
            # center dots for the current and upcoming positions of this track
            for h in range(horizon):
                c = track_centers.get(r.track_id, {}).get(t + h)
                if c is not None:
                    from .geom import RotatedBox

                    dot = box_world_to_ego(RotatedBox(c[0], c[1], 0.1, 0.1, 0.0), pose)
                    _plot(img, dot.cx, dot.cy, color, grid, size=1)
        _write_ppm(os.path.join(out_dir, f"frame_{t:04d}.ppm"), img)
        if svg:
            _write_svg(os.path.join(out_dir, f"frame_{t:04d}.svg"), img)
    return 0


def _write_svg(path, img):
    h, w, _ = img.shape
    with open(path, "w") as f:
        f.write(f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}">\n')
        f.write(f'<rect width="{w}" height="{h}" fill="black"/>\n')
        ys, xs = np.nonzero(img.sum(axis=2))
        for y, x in zip(ys, xs):
            r, g, b = img[y, x]
            f.write(f'<rect x="{x}" y="{h - 1 - y}" width="1" height="1" fill="rgb({r},{g},{b})"/>\n')
        f.write("</svg>\n")


def cmd_bench(config: RunConfig, dataset_path, out_dir):
    _prepare_out(out_dir, config)
    rng = np.random.default_rng(config.seed)
    # full-scale voxelization target: 144x80 m at 0.2 m, 29 height bins
    big = GridSpec(x_range=(-72.0, 72.0), y_range=(-40.0, 40.0), z_range=(-2.0, 3.8), cell=0.2)
    pts = np.column_stack(
        [
            rng.uniform(-72, 72, 100_000),
            rng.uniform(-40, 40, 100_000),
            rng.uniform(-2, 3.8, 100_000),
        ]
    )
    voxelize(pts, big)  # warm up
    t0 = time.perf_counter()
    reps = 5
    for _ in range(reps):
        voxelize(pts, big)
    vox_ms = (time.perf_counter() - t0) / reps * 1000.0

    model = Model(config.model, seed=config.seed)
    anchors = build_anchors(config.model)
    occ = np.zeros((config.model.n_in, config.grid.nz, config.grid.nx, config.grid.ny))
    from .voxel import InputTensor

    model.forward(InputTensor(occ))  # warm up
    t0 = time.perf_counter()
    for _ in range(3):
        model.forward(InputTensor(occ))
    fwd_ms = (time.perf_counter() - t0) / 3 * 1000.0

    report = {
        "voxelize_100k_720x400x29_ms": vox_ms,
        "forward_ms": fwd_ms,
        "num_anchors": len(anchors),
        "hardware": {
            "platform": platform.platform(),
            "processor": platform.processor() or platform.machine(),
            "python": platform.python_version(),
        },
        "version": __version__,
    }
    with open(os.path.join(out_dir, "bench.json"), "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")
    print(f"voxelize(100k pts, 720x400x29): {vox_ms:.2f} ms")
    print(f"forward pass: {fwd_ms:.2f} ms")
    return 0


# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="bevtrack", description=__doc__)
    p.add_argument("--config", help="run configuration file (JSON)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override one config key (dotted path), repeatable",
    )
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("generate", help="produce a synthetic dataset")
    for name in ("train", "ablate"):
        sp = sub.add_parser(name)
        sp.add_argument("dataset")
        if name == "ablate":
            sp.add_argument("--val-dataset")
    for name in ("eval", "track"):
        sp = sub.add_parser(name)
        sp.add_argument("dataset")
        sp.add_argument("checkpoint")
    sp = sub.add_parser("render")
    sp.add_argument("dataset")
    sp.add_argument("--tracklets")
    sp.add_argument("--svg", action="store_true")
    sp = sub.add_parser("bench")
    sp.add_argument("--dataset")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        config = load_run_config(args.config, seed=args.seed, assignments=args.set)
        if args.command == "generate":
            return cmd_generate(config, args.out)
        if args.command == "train":
            return cmd_train(config, args.dataset, args.out)
        if args.command == "eval":
            return cmd_eval(config, args.dataset, args.checkpoint, args.out)
        if args.command == "track":
            return cmd_track(config, args.dataset, args.checkpoint, args.out)
        if args.command == "ablate":
            return cmd_ablate(config, args.dataset, args.out, args.val_dataset)
        if args.command == "render":
            return cmd_render(config, args.dataset, args.tracklets, args.out, svg=args.svg)
        if args.command == "bench":
            return cmd_bench(config, args.dataset, args.out)
        raise ConfigError(f"unknown command {args.command}")
    except (ConfigError, FileNotFoundError, ValueError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
