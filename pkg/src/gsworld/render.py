"""Tile-based forward rasterization of color, depth and language channels,
plus gradient-based fitting of per-splat language latents.

The compositing model is the standard front-to-back alpha blend: per pixel v,
splats sorted by camera depth contribute alpha_i * prod_{j<i}(1 - alpha_j)
with alpha_i = sigmoid(opacity_logit_i) * exp(-0.5 * d^T cov2d^{-1} d),
clamped to [0, 0.99]. The language channel uses exactly the same weights as
color, which is what makes latent fitting a linear problem in the latents.

Determinism contract: outputs are identical for any tile size in {8, 16, 32}
and any thread count, because tiles partition pixels and per-pixel compositing
order is the global depth order restricted to contributing splats.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import NumericError, ValidationError
from .nn import Adam
from .scene import CameraModel, GaussianPrimitive, GaussianScene, covariance_from_scale_rotation, sigmoid

NEAR_PLANE = 0.01          # meters; splats at or behind are culled
COV2D_REGULARIZER = 0.3    # pixels^2 added to the 2D covariance diagonal
ALPHA_MAX = 0.99           # standard 3DGS opacity clamp
FOOTPRINT_SIGMAS = 3.0     # square footprint half-side in image-space sigmas
_DEGENERATE_DET = 1e-12

VALID_TILE_SIZES = (8, 16, 32)


@dataclass(frozen=True)
class Splat2D:
    """A Gaussian projected into the image plane."""

    mean2d: np.ndarray      # (2,) pixels
    cov2d: np.ndarray       # (2,2) pixels^2, regularized
    depth: float            # camera-frame z, meters
    source_index: int

    @property
    def radius(self) -> float:
        """Half-side of the square footprint (FOOTPRINT_SIGMAS * largest sigma)."""
        a, b, c = self.cov2d[0, 0], self.cov2d[0, 1], self.cov2d[1, 1]
        mid = 0.5 * (a + c)
        lam_max = mid + math.sqrt(max(0.25 * (a - c) ** 2 + b * b, 0.0))
        return FOOTPRINT_SIGMAS * math.sqrt(max(lam_max, 0.0))


@dataclass
class RenderOutput:
    color: np.ndarray       # (H, W, 3) in [0, 1]
    lang: np.ndarray        # (H, W, d)
    depth: np.ndarray       # (H, W) meters, 0 where nothing hit
    weight_sum: np.ndarray  # (H, W) accumulated alpha weights in [0, 1]
    skipped: int = 0        # splats dropped for degenerate 2D covariance


def project_gaussian(prim: GaussianPrimitive, cam: CameraModel, source_index: int = 0) -> Splat2D | None:
    """EWA projection of one splat; None when culled.

    Culls happen when camera-frame z <= the near plane or when the square
    3-sigma footprint misses every pixel center. The returned covariance is
    J W Sigma W^T J^T (J the perspective Jacobian, W the world-to-camera
    rotation) plus the 0.3 px^2 diagonal regularizer.
    """
    p_cam = cam.world_to_camera(prim.position)
    x, y, z = p_cam
    if z <= NEAR_PLANE:
        return None
    u = cam.fx * x / z + cam.cx
    v = cam.fy * y / z + cam.cy
    jac = np.array(
        [
            [cam.fx / z, 0.0, -cam.fx * x / (z * z)],
            [0.0, cam.fy / z, -cam.fy * y / (z * z)],
        ]
    )
    world_to_cam_rot = cam.world_from_camera.matrix.T
    cov_world = covariance_from_scale_rotation(prim.log_scale, prim.rotation)
    t = jac @ world_to_cam_rot
    cov2d = t @ cov_world @ t.T + COV2D_REGULARIZER * np.eye(2)
    cov2d = 0.5 * (cov2d + cov2d.T)
    splat = Splat2D(mean2d=np.array([u, v]), cov2d=cov2d, depth=float(z), source_index=source_index)
    r = splat.radius
    if u + r < 0.0 or u - r > cam.width - 1 or v + r < 0.0 or v - r > cam.height - 1:
        return None
    return splat


def _project_scene(scene: GaussianScene, cam: CameraModel):
    """Project every primitive; returns visible splats depth-sorted plus the
    degenerate-covariance tally."""
    splats = []
    skipped = 0
    for i in range(scene.count):
        s = project_gaussian(scene.primitive(i), cam, source_index=i)
        if s is None:
            continue
        det = float(np.linalg.det(s.cov2d))
        if not np.isfinite(det) or det < _DEGENERATE_DET:
            skipped += 1
            continue
        splats.append(s)
    splats.sort(key=lambda s: (s.depth, s.source_index))
    return splats, skipped


def _splat_alpha(splat: Splat2D, opacity: float, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Alpha of one splat on the pixel grid xs (columns) x ys (rows)."""
    a, b, c = splat.cov2d[0, 0], splat.cov2d[0, 1], splat.cov2d[1, 1]
    det = a * c - b * b
    inv_a, inv_b, inv_c = c / det, -b / det, a / det
    dx = xs[None, :] - splat.mean2d[0]
    dy = ys[:, None] - splat.mean2d[1]
    power = -0.5 * (inv_a * dx * dx + 2.0 * inv_b * dx * dy + inv_c * dy * dy)
    return np.minimum(opacity * np.exp(power), ALPHA_MAX)


def _composite_tile(scene, splats, x0, x1, y0, y1, record_weights=False):
    """Front-to-back composite of `splats` (already depth-sorted) over the
    pixel block [x0, x1) x [y0, y1). Returns per-tile buffers."""
    th, tw = y1 - y0, x1 - x0
    d = scene.lang_dim
    color = np.zeros((th, tw, 3))
    lang = np.zeros((th, tw, d))
    depth = np.zeros((th, tw))
    trans = np.ones((th, tw))
    weights = [[[] for _ in range(tw)] for _ in range(th)] if record_weights else None
    opacities = scene.opacities
    for splat in splats:
        r = splat.radius
        u, v = splat.mean2d
        # pixel-center footprint test: |x - u| <= r, |y - v| <= r
        cx0 = max(x0, math.ceil(u - r))
        cx1 = min(x1 - 1, math.floor(u + r))
        cy0 = max(y0, math.ceil(v - r))
        cy1 = min(y1 - 1, math.floor(v + r))
        if cx0 > cx1 or cy0 > cy1:
            continue
        xs = np.arange(cx0, cx1 + 1, dtype=np.float64)
        ys = np.arange(cy0, cy1 + 1, dtype=np.float64)
        alpha = _splat_alpha(splat, float(opacities[splat.source_index]), xs, ys)
        sub = (slice(cy0 - y0, cy1 - y0 + 1), slice(cx0 - x0, cx1 - x0 + 1))
        contrib = trans[sub] * alpha
        i = splat.source_index
        color[sub] += contrib[:, :, None] * scene.colors[i]
        lang[sub] += contrib[:, :, None] * scene.lang[i]
        depth[sub] += contrib * splat.depth
        trans[sub] = trans[sub] * (1.0 - alpha)
        if record_weights:
            for ry in range(cy0, cy1 + 1):
                for rx in range(cx0, cx1 + 1):
                    w = contrib[ry - cy0, rx - cx0]
                    if w > 0.0:
                        weights[ry - y0][rx - x0].append((i, float(w)))
    return color, lang, depth, 1.0 - trans, weights


def _tile_jobs(width, height, tile_size):
    for y0 in range(0, height, tile_size):
        for x0 in range(0, width, tile_size):
            yield x0, min(x0 + tile_size, width), y0, min(y0 + tile_size, height)


def render(scene: GaussianScene, cam: CameraModel, tile_size: int = 16, num_threads: int = 1) -> RenderOutput:
    """Rasterize color, language, depth and weight_sum images."""
    if tile_size not in VALID_TILE_SIZES:
        raise ValidationError(f"tile_size must be one of {VALID_TILE_SIZES}, got {tile_size}")
    if num_threads < 1:
        raise ValidationError("num_threads must be >= 1")
    splats, skipped = _project_scene(scene, cam)
    h, w = cam.height, cam.width
    out = RenderOutput(
        color=np.zeros((h, w, 3)),
        lang=np.zeros((h, w, scene.lang_dim)),
        depth=np.zeros((h, w)),
        weight_sum=np.zeros((h, w)),
        skipped=skipped,
    )

    # pre-bucket splats per tile by square footprint overlap
    jobs = list(_tile_jobs(w, h, tile_size))
    buckets = []
    for x0, x1, y0, y1 in jobs:
        tile_splats = [
            s
            for s in splats
            if s.mean2d[0] + s.radius >= x0
            and s.mean2d[0] - s.radius <= x1 - 1
            and s.mean2d[1] + s.radius >= y0
            and s.mean2d[1] - s.radius <= y1 - 1
        ]
        buckets.append(tile_splats)

    def run(job_index):
        x0, x1, y0, y1 = jobs[job_index]
        return job_index, _composite_tile(scene, buckets[job_index], x0, x1, y0, y1)

    if num_threads == 1:
        results = map(run, range(len(jobs)))
    else:
        with ThreadPoolExecutor(max_workers=num_threads) as pool:
            results = list(pool.map(run, range(len(jobs))))
    for job_index, (color, lang, depth, wsum, _) in results:
        x0, x1, y0, y1 = jobs[job_index]
        out.color[y0:y1, x0:x1] = color
        out.lang[y0:y1, x0:x1] = lang
        out.depth[y0:y1, x0:x1] = depth
        out.weight_sum[y0:y1, x0:x1] = wsum
    return out


def render_weights(scene: GaussianScene, cam: CameraModel) -> list:
    """Per-pixel compositing weights w_i(v) = alpha_i * prod_{j<i}(1 - alpha_j).

    Returns an H x W nested list; each cell is a list of (source_index, weight)
    pairs in compositing order. These are the linear coefficients of the
    language channel: lang(v) = sum_i w_i(v) * lang_latent_i.
    """
    splats, _ = _project_scene(scene, cam)
    _, _, _, _, weights = _composite_tile(scene, splats, 0, cam.width, 0, cam.height, record_weights=True)
    return weights


def _weight_matrix(scene: GaussianScene, cam: CameraModel) -> np.ndarray:
    """Dense (H*W, N) matrix of compositing weights (desk-scale scenes)."""
    weights = render_weights(scene, cam)
    mat = np.zeros((cam.height * cam.width, scene.count))
    for y, row in enumerate(weights):
        for x, cell in enumerate(row):
            for idx, w in cell:
                mat[y * cam.width + x, idx] = w
    return mat


def _lang_distance_and_grad(pred, target, levels, kind, l2_weight):
    """Per-row language distance and its gradient w.r.t. pred.

    pred/target: (rows, lang_dim). The distance is summed over `levels` equal
    blocks. kind: "cosine_l2" (default, 1 - cos + l2_weight*||diff||^2),
    "cosine", or "l2" (0.5*||diff||^2).
    """
    rows, dim = pred.shape
    block = dim // levels
    dist = np.zeros(rows)
    grad = np.zeros_like(pred)
    for l in range(levels):
        sl = slice(l * block, (l + 1) * block)
        f, t = pred[:, sl], target[:, sl]
        diff = f - t
        if kind == "l2":
            dist += 0.5 * (diff * diff).sum(axis=1)
            grad[:, sl] += diff
            continue
        nf2 = (f * f).sum(axis=1)
        nt2 = (t * t).sum(axis=1)
        dot = (f * t).sum(axis=1)
        denom = np.sqrt(nf2 * nt2) + 1e-12
        dist += 1.0 - dot / denom
        # grad of (1 - cos) written as ((dot/|f|^2) f - t) / denom: the
        # numerator cancels bitwise at f == t, so a fixed point stays fixed
        ratio = dot / np.maximum(nf2, 1e-24)
        grad[:, sl] += (ratio[:, None] * f - t) / denom[:, None]
        if kind == "cosine_l2":
            dist += l2_weight * (diff * diff).sum(axis=1)
            grad[:, sl] += 2.0 * l2_weight * diff
    return dist, grad


MIN_FIT_COVERAGE = 1e-3


def fit_language_field(
    scene: GaussianScene,
    cameras: list,
    targets: list,
    iters: int = 500,
    lr: float = 0.05,
    threshold: float | None = None,
    distance: str = "cosine_l2",
    l2_weight: float = 0.1,
    min_coverage: float = MIN_FIT_COVERAGE,
):
    """Fit per-splat language latents against target feature maps.

    Geometry is frozen, so the compositing weights are computed once per
    camera and the rendered feature is linear in the latents. Optimizes with
    Adam; returns (updated scene, per-iteration loss list). Stops early when
    every covered pixel's distance falls below `threshold`.

    Pixels whose accumulated weight is below `min_coverage` are excluded:
    the rendered feature there is (near) zero, where the cosine part of the
    objective is scale-invariant noise with unbounded gradients.
    """
    if len(cameras) == 0:
        raise ValidationError("need at least one camera")
    if len(cameras) != len(targets):
        raise ValidationError("cameras and targets must pair up")
    if distance not in ("cosine_l2", "cosine", "l2"):
        raise ValidationError(f"unknown distance {distance!r}")
    mats, rows = [], []
    for cam, target in zip(cameras, targets):
        t = np.asarray(target, dtype=np.float64)
        if t.shape != (cam.height, cam.width, scene.lang_dim):
            raise ValidationError(
                f"target shape {t.shape} does not match camera "
                f"{(cam.height, cam.width, scene.lang_dim)}"
            )
        mat = _weight_matrix(scene, cam)
        covered = mat.sum(axis=1) > min_coverage
        mats.append(mat[covered])
        rows.append(t.reshape(-1, scene.lang_dim)[covered])
    a = np.vstack(mats)
    t = np.vstack(rows)
    if a.shape[0] == 0:
        raise ValidationError("no pixel is covered by any splat")

    lang = scene.lang.copy()
    opt = Adam(lr=lr)
    losses = []
    for _ in range(int(iters)):
        pred = a @ lang
        dist, grad_pred = _lang_distance_and_grad(pred, t, scene.lang_levels, distance, l2_weight)
        loss = float(dist.mean())
        if not np.isfinite(loss):
            raise NumericError("language fitting diverged to a non-finite loss")
        losses.append(loss)
        grad_lang = a.T @ (grad_pred / a.shape[0])
        # stationary-point cutoff: below float noise Adam's scale-free steps
        # would otherwise wander away from an exact fixed point
        if np.abs(grad_lang).max() < 1e-12:
            break
        opt.step([lang], [grad_lang])
        if threshold is not None and float(dist.max()) < threshold:
            break
    return scene.with_lang(lang), losses


def language_fit_gradient(
    scene: GaussianScene,
    cameras,
    targets,
    distance: str = "cosine_l2",
    l2_weight: float = 0.1,
    min_coverage: float = MIN_FIT_COVERAGE,
):
    """Analytic gradient of the fitting loss at the scene's current latents.

    Exposed for gradient verification; mirrors one fit_language_field step.
    Returns (loss, gradient array shaped like scene.lang).
    """
    mats, rows = [], []
    for cam, target in zip(cameras, targets):
        mat = _weight_matrix(scene, cam)
        covered = mat.sum(axis=1) > min_coverage
        mats.append(mat[covered])
        rows.append(np.asarray(target, dtype=np.float64).reshape(-1, scene.lang_dim)[covered])
    a = np.vstack(mats)
    t = np.vstack(rows)
    dist, grad_pred = _lang_distance_and_grad(a @ scene.lang, t, scene.lang_levels, distance, l2_weight)
    return float(dist.mean()), a.T @ (grad_pred / a.shape[0])


PSNR_CAP_DB = 99.0


def psnr(image_a, image_b) -> float:
    """Peak signal-to-noise ratio in dB for unit-range images, capped at 99."""
    a = np.asarray(image_a, dtype=np.float64)
    b = np.asarray(image_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValidationError(f"shape mismatch: {a.shape} vs {b.shape}")
    for img, name in ((a, "first"), (b, "second")):
        if img.min() < -1e-9 or img.max() > 1.0 + 1e-9:
            raise ValidationError(f"{name} image has values outside [0, 1]")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * math.log10(1.0 / mse), PSNR_CAP_DB)
