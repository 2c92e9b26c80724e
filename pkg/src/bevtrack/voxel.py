"""Point clouds to binary occupancy tensors, with ego-motion compensation.

Past frames are re-expressed in the newest frame's ego coordinates (planar
SE(2) motion), voxelized onto a fixed metric grid, and stacked along a
leading time axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geom import wrap_angle


@dataclass(frozen=True)
class Pose:
    """SE(2) ego pose in a fixed world frame."""

    tx: float
    ty: float
    yaw: float

    def __post_init__(self):
        object.__setattr__(self, "yaw", wrap_angle(self.yaw))


@dataclass
class LidarFrame:
    """One sweep: points in the frame's own ego coordinates plus the ego pose."""

    points: np.ndarray  # [N, 3] float64
    pose: Pose
    timestamp: int

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.points = pts


@dataclass(frozen=True)
class GridSpec:
    """Uniform metric grid; half-open bins [min, max) on every axis."""

    x_range: tuple
    y_range: tuple
    z_range: tuple
    cell: float

    def __post_init__(self):
        for name, (lo, hi) in (("x", self.x_range), ("y", self.y_range), ("z", self.z_range)):
            if hi <= lo:
                raise ValueError(f"{name}_range must have positive length")
        for name, (lo, hi) in (("x", self.x_range), ("y", self.y_range)):
            n = (hi - lo) / self.cell
            if abs(n - round(n)) > 1e-9:
                raise ValueError(f"{name}_range length must be an integer number of cells")

    @property
    def nx(self):
        return int(round((self.x_range[1] - self.x_range[0]) / self.cell))

    @property
    def ny(self):
        return int(round((self.y_range[1] - self.y_range[0]) / self.cell))

    @property
    def nz(self):
        return int(round((self.z_range[1] - self.z_range[0]) / self.cell))


@dataclass
class InputTensor:
    """4D binary occupancy [T, Z, X, Y]; the network input."""

    occupancy: np.ndarray


def transform_to_current(frame: LidarFrame, current_pose: Pose):
    """Map a frame's points into ``current_pose``'s ego coordinates.

    z is untouched: ego motion is modeled as planar.
    """
    pts = frame.points
    if pts.shape[0] == 0:
        return pts.copy()
    cf, sf = math.cos(frame.pose.yaw), math.sin(frame.pose.yaw)
    wx = cf * pts[:, 0] - sf * pts[:, 1] + frame.pose.tx
    wy = sf * pts[:, 0] + cf * pts[:, 1] + frame.pose.ty
    cc, sc = math.cos(current_pose.yaw), math.sin(current_pose.yaw)
    dx = wx - current_pose.tx
    dy = wy - current_pose.ty
    out = np.empty_like(pts)
    out[:, 0] = cc * dx + sc * dy
    out[:, 1] = -sc * dx + cc * dy
    out[:, 2] = pts[:, 2]
    return out


def voxelize(points, spec: GridSpec):
    """Binary occupancy [Z, X, Y]; out-of-range points are dropped."""
    grid = np.zeros((spec.nz, spec.nx, spec.ny))
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if pts.shape[0] == 0:
        return grid
    ix = np.floor((pts[:, 0] - spec.x_range[0]) / spec.cell).astype(np.int64)
    iy = np.floor((pts[:, 1] - spec.y_range[0]) / spec.cell).astype(np.int64)
    iz = np.floor((pts[:, 2] - spec.z_range[0]) / spec.cell).astype(np.int64)
    ok = (
        (ix >= 0) & (ix < spec.nx) & (iy >= 0) & (iy < spec.ny) & (iz >= 0) & (iz < spec.nz)
    )
    grid[iz[ok], ix[ok], iy[ok]] = 1.0
    return grid


def stack_temporal(frames, spec: GridSpec, n_expected=None):
    """Compensate, voxelize and stack the last n frames (oldest first)."""
    if not frames:
        raise ValueError("stack_temporal needs at least one frame")
    if n_expected is not None and len(frames) != n_expected:
        raise ValueError(f"expected {n_expected} frames, got {len(frames)}")
    current = frames[-1].pose
    slices = [voxelize(transform_to_current(f, current), spec) for f in frames]
    return InputTensor(occupancy=np.stack(slices, axis=0))
