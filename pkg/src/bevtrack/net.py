"""Anchor-based single-stage BEV network with early/late temporal fusion.

The trunk is a halved-width VGG-style stack of 10 convolutions in groups of
(2, 2, 3, 3) with 2x2 max-pooling after the first three groups (total stride
8). Late fusion replaces the leading convolutions of the first group with
unpadded-in-time 3D convolutions that collapse the temporal extent to 1;
early fusion collapses it immediately with a shared temporal weight vector.
Two sibling heads predict per-anchor vehicle probability and a 6-vector
regression code for the current frame and each future timestamp.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from .geom import RotatedBox, nms, wrap_angle
from .voxel import GridSpec, InputTensor

STRIDE = 8
GROUP_SIZES = (2, 2, 3, 3)
CODE_SIZE = 6  # (l_x, l_y, s_w, s_h, a_sin, a_cos)

# (size in meters, lateral:longitudinal aspect) for the predefined boxes;
# size is the area-equivalent side sqrt(w*h).
DEFAULT_ANCHOR_SPECS = (
    (5.0, 1.0),
    (5.0, 2.0),
    (5.0, 0.5),
    (5.0, 6.0),
    (5.0, 1.0 / 6.0),
    (8.0, 1.0),
)


@dataclass
class ModelConfig:
    grid: GridSpec
    n_in: int = 5
    n_out: int = 5
    fusion: str = "late"
    widths: tuple = (32, 64, 128, 256)
    head_width: int = 0  # 0 means "same as the last trunk width"
    anchor_specs: tuple = DEFAULT_ANCHOR_SPECS

    def __post_init__(self):
        if self.n_in < 1:
            raise ValueError("n_in must be >= 1")
        if self.n_out < 1:
            raise ValueError("n_out must be >= 1")
        if self.fusion not in ("early", "late"):
            raise ValueError(f"unknown fusion mode {self.fusion!r}")
        if len(self.widths) != len(GROUP_SIZES):
            raise ValueError(f"widths must have {len(GROUP_SIZES)} entries")
        if self.grid.nx % STRIDE or self.grid.ny % STRIDE:
            raise ValueError(
                f"grid {self.grid.nx}x{self.grid.ny} not divisible by total stride {STRIDE}"
            )
        if len(self.temporal_kernels()) > GROUP_SIZES[0]:
            raise ValueError(f"n_in={self.n_in} needs more temporal layers than the first group holds")
        self.widths = tuple(int(w) for w in self.widths)
        self.anchor_specs = tuple((float(s), float(r)) for s, r in self.anchor_specs)

    @property
    def num_anchors(self):
        return len(self.anchor_specs)

    @property
    def feat_shape(self):
        return self.grid.nx // STRIDE, self.grid.ny // STRIDE

    def temporal_kernels(self):
        """Kernel sizes of the late-fusion temporal-collapse layers."""
        kernels = []
        extent = self.n_in
        while extent > 1:
            k = min(3, extent)
            kernels.append(k)
            extent -= k - 1
        return tuple(kernels)

    def to_dict(self):
        d = asdict(self)
        d["grid"] = {
            "x_range": list(self.grid.x_range),
            "y_range": list(self.grid.y_range),
            "z_range": list(self.grid.z_range),
            "cell": self.grid.cell,
        }
        d["widths"] = list(self.widths)
        d["anchor_specs"] = [list(a) for a in self.anchor_specs]
        return d

    @classmethod
    def from_dict(cls, d):
        g = d["grid"]
        grid = GridSpec(
            x_range=tuple(g["x_range"]),
            y_range=tuple(g["y_range"]),
            z_range=tuple(g["z_range"]),
            cell=g["cell"],
        )
        return cls(
            grid=grid,
            n_in=d["n_in"],
            n_out=d["n_out"],
            fusion=d["fusion"],
            widths=tuple(d["widths"]),
            head_width=d.get("head_width", 0),
            anchor_specs=tuple(tuple(a) for a in d.get("anchor_specs", DEFAULT_ANCHOR_SPECS)),
        )


@dataclass
class AnchorGrid:
    """Predefined zero-heading boxes, one set of K per feature location."""

    boxes: list  # flat list of RotatedBox, index = (k * I + i) * J + j
    shape: tuple  # (K, I, J)

    def __len__(self):
        return len(self.boxes)

    def array(self):
        return np.array([[b.cx, b.cy, b.w, b.h] for b in self.boxes])


def build_anchors(config: ModelConfig):
    I, J = config.feat_shape
    cell = config.grid.cell * STRIDE
    x0, y0 = config.grid.x_range[0], config.grid.y_range[0]
    boxes = []
    for size, ratio in config.anchor_specs:
        w = size / math.sqrt(ratio)
        h = size * math.sqrt(ratio)
        for i in range(I):
            cx = x0 + (i + 0.5) * cell
            for j in range(J):
                cy = y0 + (j + 0.5) * cell
                boxes.append(RotatedBox(cx, cy, w, h, 0.0))
    return AnchorGrid(boxes=boxes, shape=(config.num_anchors, I, J))


@dataclass
class HeadOutput:
    cls: np.ndarray  # [K, I, J] probabilities
    reg: np.ndarray  # [K, n_out, 6, I, J]


@dataclass
class Detection:
    score: float
    boxes: list  # RotatedBox for the current frame and each future timestamp
    anchor_index: int = -1
    track_id: int = -1


@dataclass
class DetectionSet:
    frame: int
    detections: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# box <-> regression code


def encode_box(anchor: RotatedBox, gt: RotatedBox):
    """Regression code of a ground-truth box against an anchor."""
    return np.array(
        [
            (anchor.cx - gt.cx) / gt.w,
            (anchor.cy - gt.cy) / gt.h,
            math.log(anchor.w / gt.w),
            math.log(anchor.h / gt.h),
            math.sin(gt.theta),
            math.cos(gt.theta),
        ]
    )


def decode_box(anchor: RotatedBox, code):
    """Inverse of :func:`encode_box`; sizes decode first, then offsets."""
    lx, ly, sw, sh, asin, acos = (float(v) for v in code)
    w = anchor.w * math.exp(-sw)
    h = anchor.h * math.exp(-sh)
    cx = anchor.cx - lx * w
    cy = anchor.cy - ly * h
    theta = math.atan2(asin, acos)
    return RotatedBox(cx, cy, w, h, wrap_angle(theta))


# ---------------------------------------------------------------------------
# parameters


def _xavier(rng, shape, fan_in, fan_out):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def _conv_specs(config: ModelConfig):
    """(name, kind, shape) for every trunk convolution, in forward order."""
    z = config.grid.nz
    specs = []
    t_kernels = config.temporal_kernels() if config.fusion == "late" else ()
    in_ch = z
    for g, (n_convs, width) in enumerate(zip(GROUP_SIZES, config.widths), start=1):
        for c in range(1, n_convs + 1):
            name = f"g{g}.c{c}"
            if g == 1 and config.fusion == "late" and c <= len(t_kernels):
                kt = t_kernels[c - 1]
                specs.append((name, "conv3d", (width, in_ch, kt, 3, 3)))
            else:
                specs.append((name, "conv2d", (width, in_ch, 3, 3)))
            in_ch = width
    return specs


def init_params(config: ModelConfig, seed=0):
    """Deterministic parameter initialization for the given topology."""
    rng = np.random.default_rng(seed)
    params = {}
    if config.fusion == "early":
        params["temporal.w"] = _xavier(rng, (config.n_in,), config.n_in, 1)
    for name, kind, shape in _conv_specs(config):
        fan_in = int(np.prod(shape[1:]))
        fan_out = shape[0] * int(np.prod(shape[2:]))
        params[f"{name}.w"] = _xavier(rng, shape, fan_in, fan_out)
        params[f"{name}.b"] = np.zeros(shape[0])
    hw = config.head_width or config.widths[-1]
    k = config.num_anchors
    reg_ch = k * config.n_out * CODE_SIZE
    for branch, out_ch in (("cls", k), ("reg", reg_ch)):
        shape = (hw, config.widths[-1], 3, 3)
        params[f"head.{branch}.c.w"] = _xavier(
            rng, shape, int(np.prod(shape[1:])), shape[0] * 9
        )
        params[f"head.{branch}.c.b"] = np.zeros(hw)
        pshape = (out_ch, hw, 1, 1)
        params[f"head.{branch}.p.w"] = _xavier(rng, pshape, hw, out_ch)
        params[f"head.{branch}.p.b"] = np.zeros(out_ch)
    # bias the classification logits low so early hard-negative mining is stable
    params["head.cls.p.b"] -= 4.0
    return params


class Model:
    """Parameter container plus the forward pass for either fusion mode."""

    def __init__(self, config: ModelConfig, params=None, seed=0):
        self.config = config
        self.params = params if params is not None else init_params(config, seed)

    def forward(self, inp: InputTensor, tape=None):
        """Run the network; returns (HeadOutput, cls Tensor, reg Tensor).

        With a tape the returned Tensors stay differentiable for the loss;
        without one this is a plain inference pass.
        """
        cfg = self.config
        occ = inp.occupancy
        if occ.ndim != 4 or occ.shape[0] != cfg.n_in:
            raise ValueError(
                f"input must be [T={cfg.n_in}, Z, X, Y], got shape {occ.shape}"
            )
        if occ.shape[1] != cfg.grid.nz or occ.shape[2:] != (cfg.grid.nx, cfg.grid.ny):
            raise ValueError(f"input grid shape {occ.shape[1:]} does not match the config")

        own_tape = tape or T.Tape()
        p = {name: own_tape.parameter(name, v) for name, v in self.params.items()}

        if cfg.fusion == "early":
            x = T.temporal_group_conv(T.Tensor(occ), p["temporal.w"])
            collapse_left = 0
        else:
            collapse_left = len(cfg.temporal_kernels())
            if collapse_left == 0:  # n_in == 1 degenerates to a 2D-only trunk
                x = T.Tensor(occ[0])
            else:
                x = T.Tensor(np.ascontiguousarray(occ.transpose(1, 0, 2, 3)))

        for name, kind, _shape in _conv_specs(cfg):
            if kind == "conv3d":
                x = T.conv3d(x, p[f"{name}.w"], p[f"{name}.b"], spatial_pad=1)
                collapse_left -= 1
                if collapse_left == 0:
                    # temporal extent is 1 now; continue with 2D convolutions
                    x = T.reshape(x, (x.shape[0], x.shape[2], x.shape[3]))
            else:
                x = T.conv2d(x, p[f"{name}.w"], p[f"{name}.b"], stride=1, pad=1)
            x = T.relu(x)
            gpart, cpart = name.split(".")
            group, conv_idx = int(gpart[1:]), int(cpart[1:])
            if group <= 3 and conv_idx == GROUP_SIZES[group - 1]:
                x = T.maxpool2d(x, 2, 2)

        def head(branch):
            h = T.conv2d(x, p[f"head.{branch}.c.w"], p[f"head.{branch}.c.b"], pad=1)
            h = T.relu(h)
            return T.conv2d(h, p[f"head.{branch}.p.w"], p[f"head.{branch}.p.b"], pad=0)

        cls = T.sigmoid(head("cls"))
        I, J = cfg.feat_shape
        reg = T.reshape(head("reg"), (cfg.num_anchors, cfg.n_out, CODE_SIZE, I, J))
        out = HeadOutput(cls=cls.data.copy(), reg=reg.data.copy())
        return out, cls, reg


def decode(output: HeadOutput, anchors: AnchorGrid, frame=0, score_thr=0.5, nms_thr=0.1):
    """Threshold, decode and suppress; survivors keep their full forecasts."""
    if not (0.0 <= score_thr <= 1.0 and 0.0 <= nms_thr <= 1.0):
        raise ValueError("thresholds must lie in [0, 1]")
    K, I, J = anchors.shape
    n_out = output.reg.shape[1]
    flat_scores = output.cls.reshape(-1)
    candidates = []
    for idx in np.flatnonzero(flat_scores >= score_thr):
        k, i, j = np.unravel_index(idx, (K, I, J))
        anchor = anchors.boxes[idx]
        boxes = [decode_box(anchor, output.reg[k, t, :, i, j]) for t in range(n_out)]
        candidates.append(Detection(score=float(flat_scores[idx]), boxes=boxes, anchor_index=int(idx)))
    kept = nms([(d.boxes[0], d.score) for d in candidates], iou_thr=nms_thr)
    return DetectionSet(frame=frame, detections=[candidates[i] for i in kept])
