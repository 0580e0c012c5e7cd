import numpy as np
import pytest

import gsavatar.rasterizer as rast
from gsavatar.errors import ValidationError
from gsavatar.gaussians import make_gaussian_set
from gsavatar.scene import look_at_camera

from reference_impls import brute_force_render, central_difference, fd_close, random_scene


def scene_set(rng, count, **kwargs):
    centers, colors, opacities, scales, quats = random_scene(rng, count, **kwargs)
    return make_gaussian_set(centers, colors=colors, opacities=opacities,
                             scales=scales, rotations=quats)


def small_camera(width=24, height=24, fx=60.0, fy=60.0, az=20.0, el=5.0):
    return look_at_camera(az, el, 5.0, fx=fx, fy=fy, width=width, height=height)


class TestForward:
    def test_matches_brute_force_oracle(self, rng, backend):
        for trial in range(10):
            count = int(rng.integers(1, 40))
            gs = scene_set(rng, count)
            cam = look_at_camera(float(rng.uniform(0, 360)), float(rng.uniform(-60, 60)),
                                 5.0, fx=70, fy=70, width=24, height=24)
            bg = rng.uniform(0, 1, 3)
            out = rast.render(gs, cam, background=bg, config=rast.EXACT_CONFIG,
                              dtype=np.float64, backend=backend)
            ref_img, ref_trans = brute_force_render(
                gs.centers, gs.colors, gs.opacities, gs.scales, gs.rotations, cam, bg)
            assert np.max(np.abs(out.image.data - ref_img)) < 1e-6
            assert np.max(np.abs(out.alpha.data[:, :, 0] - (1 - ref_trans))) < 1e-6

    def test_empty_scene_is_background(self, backend):
        gs = make_gaussian_set(np.zeros((1, 3)) + [0, 0, -50.0])  # culled
        cam = small_camera()
        out = rast.render(gs, cam, background=[0.2, 0.4, 0.6], backend=backend)
        assert np.allclose(out.image.data, [0.2, 0.4, 0.6])
        assert np.allclose(out.alpha.data, 0.0)

    def test_alpha_clamp_caps_opaque_splat(self, backend):
        # one huge opaque splat: its center pixel must composite exactly
        # 0.99 * color + 0.01 * background
        gs = make_gaussian_set(np.zeros((1, 3)), colors=[[1.0, 0.0, 0.0]],
                               scales=[[2.0, 2.0, 2.0]], opacities=[1.0])
        cam = small_camera(az=0.0, el=0.0)
        out = rast.render(gs, cam, background=[0.0, 0.0, 1.0],
                          config=rast.EXACT_CONFIG, dtype=np.float64, backend=backend)
        cy, cx = cam.height // 2, cam.width // 2
        assert out.image.data[cy, cx, 0] == pytest.approx(0.99, abs=1e-9)
        assert out.image.data[cy, cx, 2] == pytest.approx(0.01, abs=1e-9)

    def test_skip_threshold_drops_faint_splats(self, backend):
        # alpha below 1/255 everywhere: fast mode drops it, exact keeps it
        gs = make_gaussian_set(np.zeros((1, 3)), colors=[[1.0, 1.0, 1.0]],
                               scales=[[0.3, 0.3, 0.3]], opacities=[1e-3])
        cam = small_camera(az=0.0, el=0.0)
        fast = rast.render(gs, cam, dtype=np.float64, backend=backend)
        exact = rast.render(gs, cam, dtype=np.float64, config=rast.EXACT_CONFIG,
                            backend=backend)
        assert np.all(fast.image.data == 0.0)
        assert np.max(exact.image.data) > 0.0

    def test_termination_freezes_transmittance(self, backend):
        # identical stacked splats, each multiplying T by 0.1: after four the
        # fifth would reach 1e-5 < 1e-4 and must not be applied
        n = 8
        centers = np.zeros((n, 3))
        centers[:, 2] = np.linspace(0.0, 0.2, n)  # nearest first toward camera
        alpha = 0.9 / 0.99  # large Gaussian gives alpha straight from opacity
        gs = make_gaussian_set(centers, colors=np.ones((n, 3)),
                               scales=np.full((n, 3), 4.0),
                               opacities=np.full(n, alpha * 0.99))
        cam = small_camera(az=0.0, el=0.0)
        cfg = rast.RasterizerConfig(alpha_clamp=0.999999)
        out = rast.render(gs, cam, background=[1.0, 1.0, 1.0], dtype=np.float64,
                          config=cfg, backend=backend)
        cy, cx = cam.height // 2, cam.width // 2
        # T after 4 splats = 0.1^4 = 1e-4 exactly (within float variation of
        # the Gaussian tail); the pixel then terminates
        t_remaining = 1.0 - out.alpha.data[cy, cx, 0]
        assert t_remaining == pytest.approx(1e-4, rel=5e-3)

    def test_attribute_channels(self, rng, backend):
        gs = scene_set(rng, 6)
        gs.visibility[:3] = 1
        cam = small_camera()
        normal = rast.render(gs, cam, attribute="normal", backend=backend)
        assert normal.image.channels == 3
        vis = rast.render(gs, cam, attribute="visibility", backend=backend)
        assert vis.image.channels == 1
        assert vis.image.data.min() >= 0.0 and vis.image.data.max() <= 1.0
        with pytest.raises(ValidationError):
            rast.render(gs, cam, attribute="depth", backend=backend)

    def test_render_is_deterministic(self, rng, backend):
        gs = scene_set(rng, 25)
        cam = small_camera()
        a = rast.render(gs, cam, dtype=np.float64, backend=backend)
        b = rast.render(gs, cam, dtype=np.float64, backend=backend)
        assert a.image.data.tobytes() == b.image.data.tobytes()

    def test_float32_path_close_to_float64(self, rng, backend):
        gs = scene_set(rng, 20)
        cam = small_camera()
        lo = rast.render(gs, cam, dtype=np.float32, backend=backend)
        hi = rast.render(gs, cam, dtype=np.float64, backend=backend)
        assert lo.image.data.dtype == np.float32
        assert np.max(np.abs(lo.image.data.astype(np.float64) - hi.image.data)) < 1e-3


class TestBackendEquivalence:
    @pytest.mark.parametrize("exact", [True, False])
    def test_backends_agree(self, rng, exact):
        try:
            from gsavatar.rasterizer import _kernels  # noqa: F401
        except ImportError:
            pytest.skip("compiled backend not built")
        cfg = rast.EXACT_CONFIG if exact else rast.DEFAULT_CONFIG
        for _ in range(5):
            gs = scene_set(rng, 30)
            cam = small_camera(az=float(rng.uniform(0, 360)))
            g = rng.normal(size=(cam.height, cam.width, 3))
            outs = {}
            for backend in ("compiled", "python"):
                out = rast.render(gs, cam, background=0.3, dtype=np.float64,
                                  config=cfg, backend=backend)
                grads = rast.render_backward(out.state, g)
                outs[backend] = (out, grads)
            a, ga = outs["compiled"]
            b, gb = outs["python"]
            assert np.max(np.abs(a.image.data - b.image.data)) < 1e-10
            assert np.max(np.abs(ga.d_centers - gb.d_centers)) < 1e-8
            assert np.max(np.abs(ga.d_scales - gb.d_scales)) < 1e-8
            assert np.max(np.abs(ga.d_colors - gb.d_colors)) < 1e-8
            assert np.max(np.abs(ga.d_opacities - gb.d_opacities)) < 1e-8


class TestBackward:
    @pytest.mark.parametrize("exact", [True, False])
    def test_fd_gradients(self, rng, backend, exact):
        cfg = rast.EXACT_CONFIG if exact else rast.DEFAULT_CONFIG
        gs = scene_set(rng, 10, max_opacity=0.95)
        cam = small_camera(width=16, height=16, fx=40, fy=40)
        g = rng.normal(size=(16, 16, 3))

        def value():
            out = rast.render(gs, cam, background=0.25, dtype=np.float64,
                              config=cfg, backend=backend)
            return float(np.sum(out.image.data * g))

        out = rast.render(gs, cam, background=0.25, dtype=np.float64,
                          config=cfg, backend=backend)
        grads = rast.render_backward(out.state, g)
        grads.validate(gs)
        eps = 1e-6
        checks = 0
        for i in range(gs.count):
            for j in range(3):
                for arr, ana in [(gs.centers, grads.d_centers[i, j]),
                                 (gs.scales, grads.d_scales[i, j]),
                                 (gs.colors, grads.d_colors[i, j])]:
                    fd = central_difference(value, arr, (i, j), eps)
                    assert fd_close(fd, ana, rtol=1e-4, atol=1e-6), \
                        f"param fd={fd} analytic={ana} at gaussian {i} comp {j}"
                    checks += 1
            fd = central_difference(value, gs.opacities, (i,), eps)
            assert fd_close(fd, grads.d_opacities[i], rtol=1e-4, atol=1e-6)
            checks += 1
        assert checks == gs.count * 10

    def test_normal_attribute_gradient(self, rng, backend):
        gs = scene_set(rng, 6)
        cam = small_camera(width=16, height=16, fx=40, fy=40)
        g = rng.normal(size=(16, 16, 3))

        out = rast.render(gs, cam, attribute="normal", dtype=np.float64,
                          config=rast.EXACT_CONFIG, backend=backend)
        grads = rast.render_backward(out.state, g)
        assert grads.d_normals is not None

        def value():
            o = rast.render(gs, cam, attribute="normal", dtype=np.float64,
                            config=rast.EXACT_CONFIG, backend=backend)
            return float(np.sum(o.image.data * g))

        # normals enter compositing linearly, so FD matches even though the
        # perturbed vector is no longer unit length
        for i in (0, 3, 5):
            fd = central_difference(value, gs.normals, (i, 1), 1e-6)
            assert fd_close(fd, grads.d_normals[i, 1], rtol=1e-5, atol=1e-7)

    def test_grad_shape_mismatch_raises(self, rng, backend):
        gs = scene_set(rng, 4)
        cam = small_camera()
        out = rast.render(gs, cam, backend=backend)
        with pytest.raises(ValidationError):
            rast.render_backward(out.state, np.zeros((4, 4, 3)))

    def test_background_gets_no_parameter_gradient(self, backend):
        # gradient flows only through rendered splats: a gaussian fully
        # behind the camera contributes nothing
        gs = make_gaussian_set(np.array([[0.0, 0.0, -20.0]]))
        cam = small_camera()
        out = rast.render(gs, cam, dtype=np.float64, backend=backend)
        grads = rast.render_backward(out.state, np.ones((cam.height, cam.width, 3)))
        assert np.all(grads.d_centers == 0)
        assert np.all(grads.d_opacities == 0)


class TestVisibility:
    def test_pixel_owner_prefers_nearest(self, backend):
        centers = np.array([[0.0, 0.0, -0.5], [0.0, 0.0, 0.5]])  # first nearer
        gs = make_gaussian_set(centers, opacities=[1.0, 1.0],
                               scales=np.full((2, 3), 0.3))
        cam = small_camera(az=0.0, el=0.0)
        owner = rast.pixel_owner(gs, cam, backend=backend)
        cy, cx = cam.height // 2, cam.width // 2
        assert owner[cy, cx] == 0
        assert np.all(owner[owner >= 0] == 0)  # occluded splat owns nothing

    def test_faint_splats_never_own(self, backend):
        gs = make_gaussian_set(np.zeros((1, 3)), opacities=[0.4],
                               scales=np.full((1, 3), 0.3))
        cam = small_camera(az=0.0, el=0.0)
        owner = rast.pixel_owner(gs, cam, backend=backend)
        assert np.all(owner == -1)  # max alpha 0.4 never exceeds 0.5

    def test_mark_visibility_unions_cameras(self, backend):
        centers = np.array([[0.0, 0.0, -0.5], [0.0, 0.0, 0.5]])
        gs = make_gaussian_set(centers, opacities=[1.0, 1.0],
                               scales=np.full((2, 3), 0.25))
        front = look_at_camera(0.0, 0.0, 5.0, fx=60, fy=60, width=24, height=24)
        back = look_at_camera(180.0, 0.0, 5.0, fx=60, fy=60, width=24, height=24)
        flags_front = rast.mark_visibility(gs, front, backend=backend)
        assert list(flags_front) == [1, 0]
        flags_both = rast.mark_visibility(gs, [front, back], backend=backend)
        assert list(flags_both) == [1, 1]

    def test_posed_centers_substitution(self, backend):
        gs = make_gaussian_set(np.array([[10.0, 0.0, 0.0]]), opacities=[1.0],
                               scales=np.full((1, 3), 0.3))
        cam = small_camera(az=0.0, el=0.0)
        assert list(rast.mark_visibility(gs, cam, backend=backend)) == [0]
        moved = np.zeros((1, 3), dtype=np.float32)
        assert list(rast.mark_visibility(gs, cam, posed_centers=moved,
                                         backend=backend)) == [1]


class TestBackendSelection:
    def test_active_backend_reported(self):
        assert rast.active_backend() in ("compiled", "python")

    def test_get_kernels_by_name(self):
        from gsavatar.rasterizer import _kernels_py
        assert rast.get_kernels("python") is _kernels_py
        with pytest.raises(ValidationError):
            rast.get_kernels("cuda")
