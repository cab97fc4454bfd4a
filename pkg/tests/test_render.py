import numpy as np
import pytest

from gsworld import (
    CameraModel,
    GaussianPrimitive,
    GaussianScene,
    project_gaussian,
    psnr,
    render,
    render_weights,
)
from gsworld.errors import ValidationError
from gsworld.scene import inverse_sigmoid

from conftest import naive_render, pixel_alphas, random_scene


def axis_prim(z=2.0, sigma=0.02, opacity=0.8, lang=(1.0, 2.0, 3.0)):
    return GaussianPrimitive(
        position=[0, 0, z],
        opacity_logit=float(inverse_sigmoid(opacity)),
        log_scale=np.log([sigma] * 3),
        rotation=[0, 0, 0, 1],
        color=[1, 0, 0],
        lang_latent=np.asarray(lang, dtype=float),
    )


@pytest.fixture
def cam100():
    return CameraModel(fx=100.0, fy=100.0, cx=16.0, cy=16.0, width=32, height=32)


class TestProjection:
    def test_axis_point_hits_principal_point(self, cam100):
        s = project_gaussian(axis_prim(), cam100)
        assert np.allclose(s.mean2d, [16.0, 16.0])
        # J = diag(fx/z, fy/z) -> (100/2 * 0.02)^2 = 1, plus the 0.3 regularizer
        assert np.allclose(np.diag(s.cov2d), [1.3, 1.3], atol=1e-12)
        assert abs(s.cov2d[0, 1]) < 1e-12

    def test_point_behind_camera_absent(self, cam100):
        assert project_gaussian(axis_prim(z=-1.0), cam100) is None

    def test_footprint_off_image_absent(self, cam100):
        prim = GaussianPrimitive(
            position=[100.0, 0, 2.0],
            opacity_logit=0.0,
            log_scale=np.log([0.01] * 3),
            rotation=[0, 0, 0, 1],
            color=[0, 0, 0],
            lang_latent=[0.0],
        )
        assert project_gaussian(prim, cam100) is None

    def test_mean_matches_pinhole_oracle(self):
        # oracle: direct pinhole projection of the world position
        rng = np.random.default_rng(0)
        from gsworld.geometry import Pose

        from conftest import rand_quat

        for _ in range(30):
            cam = CameraModel(
                fx=rng.uniform(30, 120),
                fy=rng.uniform(30, 120),
                cx=15.0,
                cy=14.0,
                width=32,
                height=32,
                world_from_camera=Pose(translation=rng.normal(size=3) * 0.2, rotation=rand_quat(rng)),
            )
            scene = random_scene(1, seed=int(rng.integers(1 << 30)))
            prim = scene.primitive(0)
            s = project_gaussian(prim, cam)
            if s is None:
                continue
            p_cam = cam.world_to_camera(prim.position)
            u = cam.fx * p_cam[0] / p_cam[2] + cam.cx
            v = cam.fy * p_cam[1] / p_cam[2] + cam.cy
            assert np.allclose(s.mean2d, [u, v], atol=1e-9)
            assert abs(s.depth - p_cam[2]) < 1e-12


class TestCompositing:
    def test_single_splat_center_pixel(self, cam100):
        scene = GaussianScene.from_primitives([axis_prim()])
        out = render(scene, cam100)
        assert np.allclose(out.lang[16, 16], 0.8 * np.array([1.0, 2.0, 3.0]), atol=1e-12)
        assert abs(out.weight_sum[16, 16] - 0.8) < 1e-12
        assert abs(out.depth[16, 16] - 0.8 * 2.0) < 1e-12

    def test_two_coincident_splats(self, cam100):
        # front alpha 0.5 with latent (1,1,1); back saturates at the 0.99
        # opacity clamp with latent (0,0,0): lang = (0.5, 0.5, 0.5),
        # weight_sum = 0.5 + 0.5 * 0.99
        front = axis_prim(z=2.0, opacity=0.5, lang=(1.0, 1.0, 1.0))
        back = GaussianPrimitive(
            position=[0, 0, 2.5],
            opacity_logit=20.0,
            log_scale=np.log([0.02] * 3),
            rotation=[0, 0, 0, 1],
            color=[0, 0, 0],
            lang_latent=[0.0, 0.0, 0.0],
        )
        out = render(GaussianScene.from_primitives([front, back]), cam100)
        assert np.allclose(out.lang[16, 16], [0.5, 0.5, 0.5], atol=1e-12)
        assert abs(out.weight_sum[16, 16] - (0.5 + 0.5 * 0.99)) < 1e-12

    def test_matches_naive_compositor(self, cam32):
        for seed in range(4):
            n = int(np.random.default_rng(seed).integers(5, 31))
            scene = random_scene(n, seed=seed)
            out = render(scene, cam32, tile_size=16)
            color, lang, depth, wsum = naive_render(scene, cam32)
            assert np.abs(out.color - color).max() < 1e-6
            assert np.abs(out.lang - lang).max() < 1e-6
            assert np.abs(out.depth - depth).max() < 1e-6
            assert np.abs(out.weight_sum - wsum).max() < 1e-6

    def test_tile_size_invalid(self, cam32):
        with pytest.raises(ValidationError):
            render(random_scene(3, seed=1), cam32, tile_size=7)

    def test_tiling_and_threading_transparent(self, cam32):
        scene = random_scene(25, seed=9)
        base = render(scene, cam32, tile_size=16)
        for tile in (8, 32):
            out = render(scene, cam32, tile_size=tile)
            for field in ("color", "lang", "depth", "weight_sum"):
                assert np.abs(getattr(out, field) - getattr(base, field)).max() < 1e-6
        threaded = render(scene, cam32, tile_size=16, num_threads=4)
        for field in ("color", "lang", "depth", "weight_sum"):
            assert np.abs(getattr(threaded, field) - getattr(base, field)).max() < 1e-6

    def test_storage_order_irrelevant(self, cam32):
        scene = random_scene(20, seed=11)
        base = render(scene, cam32)
        permuted = render(scene.permuted(np.random.default_rng(0).permutation(scene.count)), cam32)
        assert np.abs(base.color - permuted.color).max() < 1e-6
        assert np.abs(base.lang - permuted.lang).max() < 1e-6

    def test_conservation_identity(self, cam32):
        scene = random_scene(18, seed=13)
        out = render(scene, cam32)
        rng = np.random.default_rng(1)
        for _ in range(40):
            x, y = int(rng.integers(32)), int(rng.integers(32))
            alphas, _ = pixel_alphas(scene, cam32, x, y)
            expected = 1.0 - np.prod(1.0 - alphas) if alphas.size else 0.0
            assert abs(out.weight_sum[y, x] - expected) < 1e-6

    def test_lang_within_convex_envelope(self, cam32):
        # weights are nonnegative and sum below 1, so the language output
        # lies in the convex hull of the contributing latents and zero
        scene = random_scene(18, seed=14)
        out = render(scene, cam32)
        rng = np.random.default_rng(2)
        for _ in range(40):
            x, y = int(rng.integers(32)), int(rng.integers(32))
            _, latents = pixel_alphas(scene, cam32, x, y)
            if latents.shape[0] == 0:
                assert np.all(out.lang[y, x] == 0.0)
                continue
            lo = np.minimum(latents.min(axis=0), 0.0) - 1e-9
            hi = np.maximum(latents.max(axis=0), 0.0) + 1e-9
            assert np.all(out.lang[y, x] >= lo) and np.all(out.lang[y, x] <= hi)

    def test_linearity_in_latents(self, cam32):
        scene = random_scene(10, seed=15)
        rng = np.random.default_rng(3)
        f = rng.normal(size=scene.lang.shape)
        g = rng.normal(size=scene.lang.shape)
        a, b = 0.7, -1.3
        combined = render(scene.with_lang(a * f + b * g), cam32).lang
        separate = a * render(scene.with_lang(f), cam32).lang + b * render(scene.with_lang(g), cam32).lang
        assert np.abs(combined - separate).max() < 1e-6


class TestRenderWeights:
    def test_single_splat_weight(self, cam100):
        scene = GaussianScene.from_primitives([axis_prim()])
        weights = render_weights(scene, cam100)
        cell = dict(weights[16][16])
        assert set(cell) == {0}
        assert abs(cell[0] - 0.8) < 1e-12

    def test_two_splat_weights(self, cam100):
        front = axis_prim(z=2.0, opacity=0.5)
        back = axis_prim(z=2.5, opacity=0.8, lang=(0.0, 0.0, 0.0))
        scene = GaussianScene.from_primitives([front, back])
        cell = dict(render_weights(scene, cam100)[16][16])
        assert abs(cell[0] - 0.5) < 1e-12
        assert abs(cell[1] - 0.5 * 0.8) < 1e-12

    def test_weights_recompose_lang_channel(self, cam32):
        scene = random_scene(15, seed=17)
        out = render(scene, cam32)
        weights = render_weights(scene, cam32)
        recomposed = np.zeros_like(out.lang)
        for y in range(32):
            for x in range(32):
                for idx, w in weights[y][x]:
                    recomposed[y, x] += w * scene.lang[idx]
        assert np.abs(recomposed - out.lang).max() < 1e-6

    def test_weights_sum_to_weight_sum(self, cam32):
        scene = random_scene(15, seed=18)
        out = render(scene, cam32)
        weights = render_weights(scene, cam32)
        for y in range(0, 32, 5):
            for x in range(0, 32, 5):
                total = sum(w for _, w in weights[y][x])
                assert abs(total - out.weight_sum[y, x]) < 1e-9
                assert all(w >= 0.0 for _, w in weights[y][x])


class TestPsnr:
    def test_identical_capped(self):
        img = np.random.default_rng(0).uniform(0, 1, (8, 8, 3))
        assert psnr(img, img) == 99.0

    def test_known_value(self):
        assert abs(psnr(np.zeros((4, 4)), np.full((4, 4), 0.1)) - 20.0) < 1e-12

    def test_matches_direct_formula(self):
        rng = np.random.default_rng(1)
        a = rng.uniform(0, 1, (6, 6, 3))
        b = rng.uniform(0, 1, (6, 6, 3))
        expected = 10.0 * np.log10(1.0 / np.mean((a - b) ** 2))
        assert abs(psnr(a, b) - expected) < 1e-9

    def test_shape_mismatch(self):
        with pytest.raises(ValidationError):
            psnr(np.zeros((4, 4)), np.zeros((4, 5)))

    def test_range_validation(self):
        with pytest.raises(ValidationError):
            psnr(np.full((2, 2), 1.5), np.zeros((2, 2)))
