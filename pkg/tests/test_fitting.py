import numpy as np
import pytest

from gsworld import CameraModel, GaussianPrimitive, GaussianScene, fit_language_field, render
from gsworld.errors import ValidationError
from gsworld.render import _lang_distance_and_grad, _weight_matrix, language_fit_gradient
from gsworld.scene import inverse_sigmoid

from conftest import dense_scene


@pytest.fixture
def cam():
    return CameraModel(fx=40.0, fy=40.0, cx=15.5, cy=15.5, width=32, height=32)


def fd_gradient(scene, cams, targets, eps=1e-4, **kw):
    """Central finite differences of the fitting loss over every latent entry,
    with the (latent-independent) weight matrices cached."""
    mats, rows = [], []
    for c, t in zip(cams, targets):
        mat = _weight_matrix(scene, c)
        covered = mat.sum(axis=1) > 1e-3
        mats.append(mat[covered])
        rows.append(np.asarray(t, dtype=np.float64).reshape(-1, scene.lang_dim)[covered])
    a = np.vstack(mats)
    t = np.vstack(rows)

    def loss(lang):
        dist, _ = _lang_distance_and_grad(a @ lang, t, scene.lang_levels, kw.get("distance", "cosine_l2"), 0.1)
        return float(dist.mean())

    lang = scene.lang.copy()
    grad = np.zeros_like(lang)
    for i in range(lang.shape[0]):
        for j in range(lang.shape[1]):
            lang[i, j] += eps
            up = loss(lang)
            lang[i, j] -= 2 * eps
            down = loss(lang)
            lang[i, j] += eps
            grad[i, j] = (up - down) / (2 * eps)
    return grad


class TestFixedPoint:
    def test_self_render_targets_leave_latents_unchanged(self, cam):
        scene = dense_scene(10, seed=1)
        target = render(scene, cam).lang
        loss, grad = language_fit_gradient(scene, [cam], [target])
        # loss floor comes from the 1e-12 guard inside the cosine denominator
        assert loss < 1e-6
        assert np.abs(grad).max() < 1e-9
        fitted, _ = fit_language_field(scene, [cam], [target], iters=50, lr=0.05)
        assert np.abs(fitted.lang - scene.lang).max() < 1e-6


class TestUniqueSolution:
    def test_single_splat_single_pixel(self):
        # one opaque splat dominating one pixel: the rendered feature must
        # converge to the target g; the latent converges to g scaled by the
        # pixel weight (the 0.99 opacity clamp keeps the weight just below 1)
        cam = CameraModel(fx=100.0, fy=100.0, cx=1.0, cy=1.0, width=3, height=3)
        prim = GaussianPrimitive(
            position=[0, 0, 2.0],
            opacity_logit=20.0,  # saturates at the 0.99 clamp
            log_scale=np.log([0.05] * 3),
            rotation=[0, 0, 0, 1],
            color=[0.5, 0.5, 0.5],
            lang_latent=[0.3, -0.2, 0.9],
        )
        scene = GaussianScene.from_primitives([prim])
        weights = _weight_matrix(scene, cam)
        w_center = weights[1 * 3 + 1, 0]
        g = np.array([1.5, -0.7, 0.4])
        target = np.zeros((3, 3, 3))
        for y in range(3):
            for x in range(3):
                target[y, x] = weights[y * 3 + x, 0] * g  # consistent across the footprint
        fitted, losses = fit_language_field(scene, [cam], [target], iters=800, lr=0.05)
        rendered = render(fitted, cam).lang[1, 1]
        assert np.abs(rendered - w_center * g).max() < 1e-4
        assert np.abs(fitted.lang[0] - g).max() < 1e-4

    def test_distance_variants_accepted(self, cam):
        scene = dense_scene(5, seed=2)
        target = render(scene, cam).lang
        start = scene.with_lang(scene.lang + 0.05)
        for distance in ("cosine", "l2", "cosine_l2"):
            _, losses = fit_language_field(start, [cam], [target], iters=5, lr=0.01, distance=distance)
            assert len(losses) == 5
        with pytest.raises(ValidationError):
            fit_language_field(start, [cam], [target], iters=1, distance="manhattan")


class TestGradient:
    def test_matches_finite_differences(self, cam):
        scene = dense_scene(5, seed=9)
        target = render(dense_scene(5, seed=10), cam).lang
        _, grad = language_fit_gradient(scene, [cam], [target])
        fd = fd_gradient(scene, [cam], [target])
        denom = np.maximum(np.maximum(np.abs(fd), np.abs(grad)), 1e-6)
        assert (np.abs(fd - grad) / denom).max() < 1e-3


class TestConvergence:
    def test_recovers_hidden_latents(self, cam):
        hidden = dense_scene(50, seed=5)
        target = render(hidden, cam).lang
        start = hidden.with_lang(
            np.random.default_rng(1).normal(size=hidden.lang.shape) * 0.5 + np.array([1.0, 0.0, 0.0])
        )
        fitted, losses = fit_language_field(start, [cam], [target], iters=500, lr=0.05)
        assert losses[-1] < 1e-4
        # smoothed loss is non-increasing
        smooth = np.convolve(losses, np.ones(25) / 25, mode="valid")
        assert np.all(np.diff(smooth) < 1e-5)

    def test_threshold_stops_early(self, cam):
        scene = dense_scene(20, seed=6)
        target = render(scene, cam).lang
        start = scene.with_lang(scene.lang + 0.01)
        _, losses = fit_language_field(start, [cam], [target], iters=500, lr=0.05, threshold=1e-3)
        assert len(losses) < 500

    def test_multi_camera(self, cam):
        cam2 = CameraModel(
            fx=40.0, fy=40.0, cx=15.5, cy=15.5, width=32, height=32,
            world_from_camera=__import__("gsworld").Pose(translation=[0.2, 0.0, -0.3]),
        )
        hidden = dense_scene(20, seed=7)
        targets = [render(hidden, c).lang for c in (cam, cam2)]
        start = hidden.with_lang(hidden.lang + np.random.default_rng(2).normal(size=hidden.lang.shape) * 0.2)
        fitted, losses = fit_language_field(start, [cam, cam2], targets, iters=300, lr=0.05)
        assert losses[-1] < 1e-4


class TestValidation:
    def test_empty_camera_list(self):
        scene = dense_scene(3, seed=8)
        with pytest.raises(ValidationError):
            fit_language_field(scene, [], [], iters=1)

    def test_resolution_mismatch(self, cam):
        scene = dense_scene(3, seed=8)
        with pytest.raises(ValidationError):
            fit_language_field(scene, [cam], [np.zeros((8, 8, 3))], iters=1)


class TestMultiLevel:
    def test_block_distance_sums_over_levels(self, cam):
        # 2 levels x 3 dims: distance must equal the sum of per-block distances
        rng = np.random.default_rng(3)
        pred = rng.normal(size=(10, 6)) + 2.0
        target = rng.normal(size=(10, 6)) + 2.0
        total, _ = _lang_distance_and_grad(pred, target, 2, "cosine_l2", 0.1)
        left, _ = _lang_distance_and_grad(pred[:, :3], target[:, :3], 1, "cosine_l2", 0.1)
        right, _ = _lang_distance_and_grad(pred[:, 3:], target[:, 3:], 1, "cosine_l2", 0.1)
        assert np.allclose(total, left + right, atol=1e-12)

    def test_fit_multilevel_scene(self, cam):
        base = dense_scene(10, seed=4, lang_dim=6)
        scene = GaussianScene(
            base.positions,
            base.opacity_logits,
            base.log_scales,
            base.rotations,
            base.colors,
            base.lang + 1.0,  # keep both blocks away from zero norm
            scene_id=base.scene_id,
            lang_levels=2,
        )
        target = render(scene, cam).lang
        start = scene.with_lang(scene.lang + np.random.default_rng(5).normal(size=scene.lang.shape) * 0.1)
        fitted, losses = fit_language_field(start, [cam], [target], iters=300, lr=0.05)
        assert losses[-1] < 1e-4
