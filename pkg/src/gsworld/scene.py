"""Domain types for language-augmented Gaussian scenes.

A scene is stored struct-of-arrays (positions, opacity logits, log-scales,
rotations, colors, language latents) because every consumer — renderer,
tokenizer, sampler — wants vectorized access. ``GaussianPrimitive`` is the
per-splat record view used at module boundaries.

Storage conventions (the rest of the package relies on these):
  * opacity is stored as a logit; consumers apply sigmoid at use;
  * scales are stored in log-space, true scale is ``exp(log_scale)``;
  * rotations are unit quaternions, qw-last;
  * colors are plain RGB in [0, 1] (no spherical harmonics);
  * language latents are ``lang_dim`` wide, optionally split into
    ``lang_levels`` equal blocks treated independently by distances.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .geometry import Pose, as_vec3, normalize_quaternion, quaternion_to_matrix


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def inverse_sigmoid(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p / (1.0 - p))


def covariance_from_scale_rotation(log_scale, rotation) -> np.ndarray:
    """World-space covariance Σ = R · diag(exp(s))² · Rᵀ of one splat.

    `log_scale` holds per-axis log standard deviations, so the eigenvalues of
    the result are exp(2·s) and the matrix is symmetric positive definite.
    """
    s = as_vec3(log_scale, "log_scale")
    q = normalize_quaternion(rotation)
    r = quaternion_to_matrix(q)
    cov = (r * np.exp(2.0 * s)) @ r.T
    # exact symmetry keeps downstream eigen/solve code honest
    return 0.5 * (cov + cov.T)


@dataclass(frozen=True)
class GaussianPrimitive:
    """One splat: (position, opacity logit, log-scale, rotation, color, language latent)."""

    position: np.ndarray
    opacity_logit: float
    log_scale: np.ndarray
    rotation: np.ndarray
    color: np.ndarray
    lang_latent: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "position", as_vec3(self.position, "position"))
        logit = float(self.opacity_logit)
        if not np.isfinite(logit):
            raise ValidationError("opacity_logit must be finite")
        object.__setattr__(self, "opacity_logit", logit)
        object.__setattr__(self, "log_scale", as_vec3(self.log_scale, "log_scale"))
        object.__setattr__(self, "rotation", normalize_quaternion(self.rotation, "rotation"))
        color = np.asarray(self.color, dtype=np.float64)
        if color.shape != (3,) or not np.all(np.isfinite(color)):
            raise ValidationError("color must be 3 finite values")
        if color.min() < 0.0 or color.max() > 1.0:
            raise ValidationError("color components must lie in [0, 1]")
        object.__setattr__(self, "color", color)
        lang = np.asarray(self.lang_latent, dtype=np.float64)
        if lang.ndim != 1 or lang.size < 1 or not np.all(np.isfinite(lang)):
            raise ValidationError("lang_latent must be a finite 1-d vector")
        object.__setattr__(self, "lang_latent", lang)

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.opacity_logit))

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale)

    def covariance(self) -> np.ndarray:
        return covariance_from_scale_rotation(self.log_scale, self.rotation)


@dataclass(frozen=True)
class Aabb:
    """Axis-aligned bounding box in meters."""

    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "min", as_vec3(self.min, "bounds min"))
        object.__setattr__(self, "max", as_vec3(self.max, "bounds max"))
        if np.any(self.max < self.min):
            raise ValidationError("bounds max must be >= min componentwise")

    def expanded(self, margin: float) -> "Aabb":
        return Aabb(self.min - margin, self.max + margin)

    def contains(self, points) -> bool:
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return bool(np.all(pts >= self.min) and np.all(pts <= self.max))


class GaussianScene:
    """Ordered collection of Gaussian primitives plus scene metadata.

    Immutable after construction; fitting produces a new scene via
    :meth:`with_lang`. All arrays are float64, copied and write-protected.
    """

    def __init__(
        self,
        positions,
        opacity_logits,
        log_scales,
        rotations,
        colors,
        lang,
        scene_id: str = "scene",
        bounds: Aabb | None = None,
        lang_levels: int = 1,
    ):
        self.positions = self._take(positions, (-1, 3), "positions")
        n = self.positions.shape[0]
        if n < 1:
            raise ValidationError("scene must contain at least one primitive")
        self.opacity_logits = self._take(opacity_logits, (n,), "opacity_logits")
        self.log_scales = self._take(log_scales, (n, 3), "log_scales")
        rot = self._take(rotations, (n, 4), "rotations")
        norms = np.linalg.norm(rot, axis=1)
        if np.any(norms < 0.5) or np.any(norms > 2.0):
            raise ValidationError("rotation norms outside tolerated band [0.5, 2]")
        rot = rot / norms[:, None]
        rot.flags.writeable = False
        self.rotations = rot
        self.colors = self._take(colors, (n, 3), "colors")
        if self.colors.min() < 0.0 or self.colors.max() > 1.0:
            raise ValidationError("colors must lie in [0, 1]")
        self.lang = self._take(lang, (n, -1), "lang")
        self.scene_id = str(scene_id)
        if lang_levels < 1 or self.lang_dim % lang_levels != 0:
            raise ValidationError(
                f"lang_levels={lang_levels} must divide lang_dim={self.lang_dim}"
            )
        self.lang_levels = int(lang_levels)
        if bounds is None:
            bounds = Aabb(self.positions.min(axis=0), self.positions.max(axis=0))
        self.bounds = bounds
        margin = 3.0 * float(np.exp(self.log_scales).max())
        if not bounds.expanded(margin).contains(self.positions):
            raise ValidationError(
                "primitives fall outside bounds expanded by 3 sigma of the largest scale"
            )

    @staticmethod
    def _take(values, shape, name) -> np.ndarray:
        arr = np.array(values, dtype=np.float64)
        want = tuple(shape)
        if len(want) != arr.ndim or any(w != -1 and w != s for w, s in zip(want, arr.shape)):
            raise ValidationError(f"{name} must have shape {want}, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValidationError(f"{name} contains non-finite values")
        arr.flags.writeable = False
        return arr

    @property
    def count(self) -> int:
        return self.positions.shape[0]

    def __len__(self) -> int:
        return self.count

    @property
    def lang_dim(self) -> int:
        return self.lang.shape[1]

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    def primitive(self, index: int) -> GaussianPrimitive:
        return GaussianPrimitive(
            position=self.positions[index],
            opacity_logit=self.opacity_logits[index],
            log_scale=self.log_scales[index],
            rotation=self.rotations[index],
            color=self.colors[index],
            lang_latent=self.lang[index],
        )

    @property
    def primitives(self) -> list[GaussianPrimitive]:
        return [self.primitive(i) for i in range(self.count)]

    @classmethod
    def from_primitives(
        cls,
        primitives,
        scene_id: str = "scene",
        bounds: Aabb | None = None,
        lang_levels: int = 1,
    ) -> "GaussianScene":
        prims = list(primitives)
        if not prims:
            raise ValidationError("scene must contain at least one primitive")
        dims = {p.lang_latent.shape[0] for p in prims}
        if len(dims) != 1:
            raise ValidationError(f"primitives disagree on lang_dim: {sorted(dims)}")
        return cls(
            positions=[p.position for p in prims],
            opacity_logits=[p.opacity_logit for p in prims],
            log_scales=[p.log_scale for p in prims],
            rotations=[p.rotation for p in prims],
            colors=[p.color for p in prims],
            lang=[p.lang_latent for p in prims],
            scene_id=scene_id,
            bounds=bounds,
            lang_levels=lang_levels,
        )

    def with_lang(self, lang) -> "GaussianScene":
        """Copy of the scene with replaced language latents (geometry untouched)."""
        return GaussianScene(
            positions=self.positions,
            opacity_logits=self.opacity_logits,
            log_scales=self.log_scales,
            rotations=self.rotations,
            colors=self.colors,
            lang=lang,
            scene_id=self.scene_id,
            bounds=self.bounds,
            lang_levels=self.lang_levels,
        )

    def permuted(self, order) -> "GaussianScene":
        idx = np.asarray(order, dtype=np.int64)
        return GaussianScene(
            positions=self.positions[idx],
            opacity_logits=self.opacity_logits[idx],
            log_scales=self.log_scales[idx],
            rotations=self.rotations[idx],
            colors=self.colors[idx],
            lang=self.lang[idx],
            scene_id=self.scene_id,
            bounds=self.bounds,
            lang_levels=self.lang_levels,
        )


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera: intrinsics in pixels plus a camera-to-world pose."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    world_from_camera: Pose = field(default_factory=Pose)

    def __post_init__(self):
        for name in ("fx", "fy", "cx", "cy"):
            v = float(getattr(self, name))
            if not np.isfinite(v):
                raise ValidationError(f"{name} must be finite")
            object.__setattr__(self, name, v)
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))
        if self.fx <= 0 or self.fy <= 0:
            raise ValidationError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValidationError("image size must be at least 1x1")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValidationError("principal point must lie inside the image")

    def world_to_camera(self, points) -> np.ndarray:
        """Map world points (3,) or (N,3) into the camera frame (+z forward)."""
        inv = self.world_from_camera.inverse()
        return inv.apply(points)

    def camera_to_world(self, points) -> np.ndarray:
        return self.world_from_camera.apply(points)

    @property
    def right_axis_world(self) -> np.ndarray:
        """Camera +x expressed in world coordinates."""
        return self.world_from_camera.matrix[:, 0]

    def to_json_dict(self) -> dict:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
            "world_from_camera": {
                "translation": self.world_from_camera.translation.tolist(),
                "rotation": self.world_from_camera.rotation.tolist(),
            },
        }

    @staticmethod
    def from_json_dict(data: dict) -> "CameraModel":
        try:
            pose_data = data.get("world_from_camera", {})
            pose = Pose(
                translation=pose_data.get("translation", [0.0, 0.0, 0.0]),
                rotation=pose_data.get("rotation", [0.0, 0.0, 0.0, 1.0]),
            )
            return CameraModel(
                fx=data["fx"],
                fy=data["fy"],
                cx=data["cx"],
                cy=data["cy"],
                width=data["width"],
                height=data["height"],
                world_from_camera=pose,
            )
        except KeyError as exc:
            raise ValidationError(f"camera json missing field {exc}") from exc
