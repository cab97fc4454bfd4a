"""Shared scene builders and independent oracles.

The oracles here are deliberately written from scratch (per-pixel loops, no
tiling, explicit formulas) so they stay independent of the library paths they
check.
"""

import math

import numpy as np
import pytest

from gsworld import CameraModel, GaussianPrimitive, GaussianScene, project_gaussian
from gsworld.render import ALPHA_MAX
from gsworld.scene import inverse_sigmoid, sigmoid


def rand_quat(rng):
    q = rng.normal(size=4)
    return q / np.linalg.norm(q)


def random_scene(n, seed, lang_dim=3, spread=0.8, z_range=(0.8, 4.0)):
    """Generic random scene; depths are generic (no exact ties)."""
    r = np.random.default_rng(seed)
    prims = []
    for _ in range(n):
        q = r.normal(size=4)
        q /= np.linalg.norm(q)
        prims.append(
            GaussianPrimitive(
                position=[*r.uniform(-spread, spread, 2), r.uniform(*z_range)],
                opacity_logit=r.uniform(-2.0, 3.0),
                log_scale=np.log(r.uniform(0.02, 0.25, 3)),
                rotation=q,
                color=r.uniform(0, 1, 3),
                lang_latent=r.normal(size=lang_dim),
            )
        )
    return GaussianScene.from_primitives(prims, scene_id=f"random-{seed}")


def dense_scene(n, seed, lang_dim=3):
    """Well-posed fitting scene: large high-opacity splats and latents with a
    shared positive component so pixel mixtures never cancel to zero."""
    r = np.random.default_rng(seed)
    prims = []
    for _ in range(n):
        q = r.normal(size=4)
        q /= np.linalg.norm(q)
        lat = r.normal(size=lang_dim) * 0.5
        lat[0] = r.uniform(1.0, 2.0)
        prims.append(
            GaussianPrimitive(
                position=[*r.uniform(-0.7, 0.7, 2), r.uniform(1.6, 2.6)],
                opacity_logit=float(inverse_sigmoid(r.uniform(0.7, 0.95))),
                log_scale=np.log(r.uniform(0.08, 0.2, 3)),
                rotation=q,
                color=r.uniform(0, 1, 3),
                lang_latent=lat,
            )
        )
    return GaussianScene.from_primitives(prims, scene_id=f"dense-{seed}")


@pytest.fixture
def cam32():
    return CameraModel(fx=35.0, fy=35.0, cx=15.5, cy=15.5, width=32, height=32)


def naive_render(scene, cam):
    """Oracle: per-pixel full-sort compositor, no tiling.

    Returns (color, lang, depth, weight_sum) and must match the tiled
    renderer within float noise.
    """
    splats = []
    for i in range(scene.count):
        s = project_gaussian(scene.primitive(i), cam, source_index=i)
        if s is not None and np.linalg.det(s.cov2d) >= 1e-12:
            splats.append(s)
    splats.sort(key=lambda s: (s.depth, s.source_index))
    h, w, d = cam.height, cam.width, scene.lang_dim
    color = np.zeros((h, w, 3))
    lang = np.zeros((h, w, d))
    depth = np.zeros((h, w))
    wsum = np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            trans = 1.0
            for s in splats:
                radius = s.radius
                u, v = s.mean2d
                if abs(x - u) > radius or abs(y - v) > radius:
                    continue
                a, b, c = s.cov2d[0, 0], s.cov2d[0, 1], s.cov2d[1, 1]
                det = a * c - b * b
                dx, dy = x - u, y - v
                power = -0.5 * (c * dx * dx - 2 * b * dx * dy + a * dy * dy) / det
                alpha = min(sigmoid(scene.opacity_logits[s.source_index]) * math.exp(power), ALPHA_MAX)
                contrib = trans * alpha
                color[y, x] += contrib * scene.colors[s.source_index]
                lang[y, x] += contrib * scene.lang[s.source_index]
                depth[y, x] += contrib * s.depth
                trans *= 1.0 - alpha
            wsum[y, x] = 1.0 - trans
    return color, lang, depth, wsum


def margin_sample(model, rng, batch=2, margin=1e-3, min_recon_norm=0.05):
    """Draw an autoencoder input at which finite differences are meaningful:
    every ReLU pre-activation clears `margin` (the stencil never straddles a
    kink) and no reconstruction collapses to the origin (where the cosine
    term's gradient is unbounded)."""
    from gsworld.autoencoder import decode, encode
    from gsworld.nn import relu_margin

    while True:
        x = rng.normal(size=(batch, model.feature_dim))
        latent = encode(model, x)
        m = min(relu_margin(model.encoder, x), relu_margin(model.decoder, latent))
        recon = decode(model, latent)
        if m > margin and np.linalg.norm(recon, axis=-1).min() > min_recon_norm:
            return x


def projector_margin(proj, decoder, prim):
    """Smallest ReLU margin across all projector heads for one primitive."""
    from gsworld.nn import relu_margin
    from gsworld.tokenizer import HEAD_NAMES, _head_inputs

    inputs = _head_inputs(prim, proj, decoder)
    return min(relu_margin(proj.heads[name], inputs[name]) for name in HEAD_NAMES)


def pixel_alphas(scene, cam, x, y):
    """Oracle: the depth-ordered alphas of every splat touching pixel (x, y),
    with the matching language latents."""
    splats = []
    for i in range(scene.count):
        s = project_gaussian(scene.primitive(i), cam, source_index=i)
        if s is not None and np.linalg.det(s.cov2d) >= 1e-12:
            splats.append(s)
    splats.sort(key=lambda s: (s.depth, s.source_index))
    alphas, latents = [], []
    for s in splats:
        radius = s.radius
        u, v = s.mean2d
        if abs(x - u) > radius or abs(y - v) > radius:
            continue
        a, b, c = s.cov2d[0, 0], s.cov2d[0, 1], s.cov2d[1, 1]
        det = a * c - b * b
        dx, dy = x - u, y - v
        power = -0.5 * (c * dx * dx - 2 * b * dx * dy + a * dy * dy) / det
        alphas.append(min(sigmoid(scene.opacity_logits[s.source_index]) * math.exp(power), ALPHA_MAX))
        latents.append(scene.lang[s.source_index])
    return np.array(alphas), np.array(latents) if latents else np.zeros((0, scene.lang_dim))
