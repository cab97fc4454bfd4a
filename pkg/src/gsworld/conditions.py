"""Sparse RGB/depth condition maps built by rigidly transforming a colored
point cloud and z-buffer-projecting it into a target camera.

Spatial conditions slide the camera along its right axis; temporal conditions
re-pose the camera by composing its extrinsics with a future ego pose. Maps
are deliberately sparse: one point per pixel, invalid pixels hold exactly 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .geometry import Pose
from .render import NEAR_PLANE
from .scene import CameraModel

CONDITION_PRESETS = {"low": (224, 400), "high": (424, 800)}  # (height, width)


@dataclass(frozen=True)
class ColoredPointCloud:
    positions: np.ndarray  # (n, 3) meters
    colors: np.ndarray     # (n, 3) in [0, 1]

    def __post_init__(self):
        p = np.asarray(self.positions, dtype=np.float64)
        c = np.asarray(self.colors, dtype=np.float64)
        if p.ndim != 2 or p.shape[1] != 3 or c.shape != p.shape:
            raise ValidationError("positions and colors must both be (n, 3)")
        if not (np.all(np.isfinite(p)) and np.all(np.isfinite(c))):
            raise ValidationError("point cloud contains non-finite values")
        if p.shape[0] and (c.min() < 0.0 or c.max() > 1.0):
            raise ValidationError("colors must lie in [0, 1]")
        object.__setattr__(self, "positions", p)
        object.__setattr__(self, "colors", c)

    def __len__(self) -> int:
        return self.positions.shape[0]


@dataclass(frozen=True)
class SparseConditionMap:
    rgb: np.ndarray    # (H, W, 3); 0 on invalid pixels
    depth: np.ndarray  # (H, W) meters; exactly 0 on invalid pixels
    valid: np.ndarray  # (H, W) bool

    def __post_init__(self):
        rgb = np.asarray(self.rgb, dtype=np.float64)
        depth = np.asarray(self.depth, dtype=np.float64)
        valid = np.asarray(self.valid, dtype=bool)
        if rgb.ndim != 3 or rgb.shape[2] != 3 or depth.shape != rgb.shape[:2] or valid.shape != depth.shape:
            raise ValidationError("rgb/depth/valid shapes do not agree")
        if np.any(depth[valid] <= 0.0):
            raise ValidationError("valid pixels must carry positive depth")
        if np.any(depth[~valid] != 0.0) or np.any(rgb[~valid] != 0.0):
            raise ValidationError("invalid pixels must hold the 0 sentinel")
        object.__setattr__(self, "rgb", rgb)
        object.__setattr__(self, "depth", depth)
        object.__setattr__(self, "valid", valid)


def transform_points(cloud: ColoredPointCloud, pose: Pose) -> ColoredPointCloud:
    """Rigid transform p' = R p + t; colors ride along unchanged."""
    if len(cloud) == 0:
        return cloud
    return ColoredPointCloud(positions=pose.apply(cloud.positions), colors=cloud.colors)


def project_points_zbuffer(cloud: ColoredPointCloud, cam: CameraModel) -> SparseConditionMap:
    """Pinhole-project the cloud keeping the nearest point per pixel.

    Points at or behind the near plane (0.01 m) are dropped; pixel assignment
    rounds to the nearest pixel center.
    """
    h, w = cam.height, cam.width
    rgb = np.zeros((h, w, 3))
    depth = np.zeros((h, w))
    valid = np.zeros((h, w), dtype=bool)
    if len(cloud) == 0:
        return SparseConditionMap(rgb=rgb, depth=depth, valid=valid)
    p_cam = cam.world_to_camera(cloud.positions)
    z = p_cam[:, 2]
    keep = z > NEAR_PLANE
    if not np.any(keep):
        return SparseConditionMap(rgb=rgb, depth=depth, valid=valid)
    p_cam, z, colors = p_cam[keep], z[keep], cloud.colors[keep]
    u = np.floor(cam.fx * p_cam[:, 0] / z + cam.cx + 0.5).astype(np.int64)
    v = np.floor(cam.fy * p_cam[:, 1] / z + cam.cy + 0.5).astype(np.int64)
    inside = (u >= 0) & (u < w) & (v >= 0) & (v < h)
    for ui, vi, zi, ci in zip(u[inside], v[inside], z[inside], colors[inside]):
        if not valid[vi, ui] or zi < depth[vi, ui]:
            depth[vi, ui] = zi
            rgb[vi, ui] = ci
            valid[vi, ui] = True
    return SparseConditionMap(rgb=rgb, depth=depth, valid=valid)


def build_spatial_condition(cloud: ColoredPointCloud, base_cam: CameraModel, lateral_shift_m: float) -> SparseConditionMap:
    """Condition for a laterally shifted view: camera moved by
    `lateral_shift_m` along its own +x (right) axis."""
    shift_world = float(lateral_shift_m) * base_cam.right_axis_world
    shifted = CameraModel(
        fx=base_cam.fx,
        fy=base_cam.fy,
        cx=base_cam.cx,
        cy=base_cam.cy,
        width=base_cam.width,
        height=base_cam.height,
        world_from_camera=Pose(
            translation=base_cam.world_from_camera.translation + shift_world,
            rotation=base_cam.world_from_camera.rotation,
        ),
    )
    return project_points_zbuffer(cloud, shifted)


def build_temporal_condition(cloud: ColoredPointCloud, base_cam: CameraModel, future_pose: Pose) -> SparseConditionMap:
    """Condition for a future frame: extrinsics composed with the predicted
    ego motion (future_pose expressed in the base camera frame)."""
    future_cam = CameraModel(
        fx=base_cam.fx,
        fy=base_cam.fy,
        cx=base_cam.cx,
        cy=base_cam.cy,
        width=base_cam.width,
        height=base_cam.height,
        world_from_camera=base_cam.world_from_camera.compose(future_pose),
    )
    return project_points_zbuffer(cloud, future_cam)


def unproject_depth(cond: SparseConditionMap, cam: CameraModel) -> ColoredPointCloud:
    """Lift valid pixels back to a world-space colored point cloud."""
    vs, us = np.nonzero(cond.valid)
    if vs.size == 0:
        return ColoredPointCloud(positions=np.zeros((0, 3)), colors=np.zeros((0, 3)))
    z = cond.depth[vs, us]
    x = (us - cam.cx) / cam.fx * z
    y = (vs - cam.cy) / cam.fy * z
    p_cam = np.stack([x, y, z], axis=1)
    return ColoredPointCloud(positions=cam.camera_to_world(p_cam), colors=cond.rgb[vs, us])
