import numpy as np
import pytest

from voxloc.exceptions import NoIntersection, OutOfFrustum
from voxloc.geometry import CameraIntrinsics, Ray, project
from voxloc.renderer import (
    render_patch,
    render_ray,
    render_rays_batch,
    render_visible,
    sample_ray,
)
from voxloc.voxel import VoxelLandmark, VoxelMap, inverse_density_activation

from conftest import lookat
from test_voxel import scalar_trilinear_reference


def make_voxel(rng, resolution=3, channels=4, center=None, side=None,
               density_scale=1.0):
    center = rng.standard_normal(3) * 0.2 if center is None else np.asarray(center)
    side = rng.uniform(0.5, 1.5) if side is None else side
    return VoxelLandmark(
        center=center,
        side=side,
        resolution=resolution,
        desc_nodes=rng.standard_normal((resolution,) * 3 + (channels,)),
        density_nodes=rng.standard_normal((resolution,) * 3) * density_scale,
        track_id=0,
    )


def ray_at_voxel(rng, voxel, jitter=0.1):
    origin = voxel.center + rng.standard_normal(3) * 4.0
    d = voxel.center - origin + rng.standard_normal(3) * jitter * voxel.side
    d /= np.linalg.norm(d)
    return Ray(origin, d)


def naive_render_reference(voxel, ray, n_samples, density_shift=0.0):
    """Straightforward per-sample loop mirroring the compositing equations."""
    from voxloc.geometry import ray_box_intersect

    hit = ray_box_intersect(ray, voxel.center, voxel.side)
    assert hit is not None
    t_near, t_far = hit
    delta = (t_far - t_near) / n_samples
    descriptor = np.zeros(voxel.channels)
    transmittance = 1.0
    opacity = 0.0
    for k in range(n_samples):
        t = t_near + (k + 0.5) * delta
        p = np.asarray(ray.origin) + t * np.asarray(ray.direction)
        raw = scalar_trilinear_reference(voxel.density_nodes[..., None],
                                         voxel.center, voxel.side, p)[0]
        d = scalar_trilinear_reference(voxel.desc_nodes, voxel.center,
                                       voxel.side, p)
        sigma = np.log1p(np.exp(-abs(raw + density_shift)))
        sigma += max(raw + density_shift, 0.0)
        alpha = 1.0 - np.exp(-sigma * delta)
        w = transmittance * alpha
        descriptor = descriptor + w * d
        opacity += w
        transmittance *= 1.0 - alpha
    return descriptor, opacity


def constant_voxel(sigma_delta, n_samples, descriptor, side=1.0):
    """Constant lattices tuned so each midpoint sample has sigma*delta fixed."""
    delta = side / n_samples  # central chord along an axis
    sigma = sigma_delta / delta
    raw = inverse_density_activation(sigma)
    C = len(descriptor)
    return VoxelLandmark(np.zeros(3), side, 3,
                         np.broadcast_to(descriptor, (3, 3, 3, C)).copy(),
                         np.full((3, 3, 3), raw), 0)


class TestRenderRay:
    def test_transparent_medium(self):
        rng = np.random.default_rng(0)
        voxel = make_voxel(rng)
        voxel.density_nodes[:] = -60.0  # softplus(-60) ~ 1e-26
        descriptor, opacity = render_ray(voxel, ray_at_voxel(rng, voxel), 8)
        assert np.max(np.abs(descriptor)) < 1e-12
        assert opacity < 1e-12

    def test_single_sample_closed_form(self):
        d = np.array([0.2, -1.0, 0.5, 2.0])
        voxel = constant_voxel(np.log(2.0), 1, d)
        out, opacity = render_ray(voxel, Ray([0, 0, -5], [0, 0, 1.0]), 1)
        assert np.max(np.abs(out - 0.5 * d)) < 1e-12
        assert abs(opacity - 0.5) < 1e-12

    def test_two_sample_closed_form(self):
        d = np.array([1.0, -0.5])
        voxel = constant_voxel(np.log(2.0), 2, d)
        out, opacity = render_ray(voxel, Ray([0, 0, -5], [0, 0, 1.0]), 2)
        assert np.max(np.abs(out - 0.75 * d)) < 1e-12
        assert abs(opacity - 0.75) < 1e-12

    def test_miss_raises(self):
        rng = np.random.default_rng(1)
        voxel = make_voxel(rng, center=[0, 0, 0], side=0.5)
        with pytest.raises(NoIntersection):
            render_ray(voxel, Ray([5.0, 0, -5], [0, 0, 1.0]), 4)

    def test_matches_naive_reference(self):
        rng = np.random.default_rng(2)
        worst = 0.0
        for _ in range(300):
            voxel = make_voxel(rng, resolution=int(rng.integers(2, 5)),
                               channels=int(rng.integers(2, 6)),
                               density_scale=rng.uniform(0.5, 3.0))
            ray = ray_at_voxel(rng, voxel)
            n = int(rng.integers(1, 12))
            got_d, got_o = render_ray(voxel, ray, n)
            ref_d, ref_o = naive_render_reference(voxel, ray, n)
            worst = max(worst, np.max(np.abs(got_d - ref_d)), abs(got_o - ref_o))
        assert worst < 1e-6

    def test_weights_form_partition(self):
        from voxloc.renderer import composite
        from voxloc.voxel import density_activation

        rng = np.random.default_rng(3)
        for _ in range(100):
            voxel = make_voxel(rng, density_scale=rng.uniform(0.2, 5.0))
            ray = ray_at_voxel(rng, voxel)
            samples = sample_ray(voxel, ray, 8)
            sigma = density_activation(samples.raw_density)
            _, opacity, alphas, trans = composite(
                sigma[None], np.array([samples.delta]),
                samples.descriptors[None])
            weights = (trans * alphas)[0]
            assert np.all(weights >= 0)
            assert weights.sum() <= 1.0 + 1e-12
            assert 0.0 <= opacity[0] <= 1.0 + 1e-12

    def test_output_in_opacity_scaled_sample_bounds(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            voxel = make_voxel(rng)
            ray = ray_at_voxel(rng, voxel)
            samples = sample_ray(voxel, ray, 6)
            d, opacity = render_ray(voxel, ray, 6)
            lo = opacity * samples.descriptors.min(axis=0)
            hi = opacity * samples.descriptors.max(axis=0)
            assert np.all(d >= np.minimum(lo, hi) - 1e-12)
            assert np.all(d <= np.maximum(lo, hi) + 1e-12)

    def test_homogeneous_medium_refinement_consistency(self):
        d = np.array([0.7, -0.2, 0.1])
        voxel = constant_voxel(0.3, 1, d)
        ray = Ray([0, 0, -5], [0, 0, 1.0])
        r = {n: render_ray(voxel, ray, n)[0] for n in (4, 8, 16)}
        d48 = np.linalg.norm(r[4] - r[8])
        d416 = np.linalg.norm(r[4] - r[16])
        assert d48 < 1e-12
        assert d416 <= d48 * (1 + 1e-6) + 1e-12

    def test_sample_positions_ordered(self):
        rng = np.random.default_rng(5)
        voxel = make_voxel(rng)
        ray = ray_at_voxel(rng, voxel)
        samples = sample_ray(voxel, ray, 8)
        ts = (samples.positions - np.asarray(ray.origin)) @ np.asarray(ray.direction)
        assert np.all(np.diff(ts) > 0)
        assert samples.delta == pytest.approx(ts[1] - ts[0])


class TestRenderPatch:
    def intr(self):
        return CameraIntrinsics(300.0, 300.0, 160.0, 120.0, 320, 240)

    def test_s1_equals_center_ray(self):
        rng = np.random.default_rng(6)
        voxel = make_voxel(rng, center=[0.0, 0.0, 0.0], side=0.4)
        pose = lookat([0.0, 0.0, -3.0])
        intr = self.intr()
        patch = render_patch(voxel, pose, intr, 1, 8)
        pix = project(pose, intr, voxel.center)
        from voxloc.geometry import ray_through_pixel

        ray = ray_through_pixel(pose, intr, np.floor(pix + 0.5))
        want, _ = render_ray(voxel, ray, 8)
        assert np.max(np.abs(patch[0, 0] - want)) < 1e-12

    def test_missing_rays_are_zero(self):
        rng = np.random.default_rng(7)
        # Tiny cube far away: corner rays of a wide patch miss it.
        voxel = make_voxel(rng, center=[0.0, 0.0, 0.0], side=0.02)
        pose = lookat([0.0, 0.0, -3.0])
        patch = render_patch(voxel, pose, self.intr(), 9, 4)
        norms = np.linalg.norm(patch, axis=2)
        assert norms[0, 0] == 0.0 and norms[-1, -1] == 0.0
        assert norms[4, 4] > 0.0

    def test_out_of_frustum(self):
        rng = np.random.default_rng(8)
        voxel = make_voxel(rng, center=[0.0, 0.0, 0.0], side=0.3)
        pose = lookat([0.0, 0.0, 3.0], target=[0.0, 0.0, 10.0])
        with pytest.raises(OutOfFrustum):
            render_patch(voxel, pose, self.intr(), 7, 4)

    def test_margin_violation(self):
        rng = np.random.default_rng(9)
        voxel = make_voxel(rng, center=[0.0, 0.0, 0.0], side=0.3)
        intr = self.intr()
        # Aim so the center lands within ceil(S/2) of the left border.
        pose = lookat([2.1133, 0.0, -4.0], target=[2.1133, 0.0, 0.0])
        pix = project(pose, intr, voxel.center)
        assert 0 <= pix[0] < 4
        with pytest.raises(OutOfFrustum):
            render_patch(voxel, pose, intr, 7, 4)


class TestRenderVisible:
    def intr(self):
        return CameraIntrinsics(300.0, 300.0, 160.0, 120.0, 320, 240)

    def map_of(self, voxels):
        return VoxelMap(voxels=voxels, intrinsics=self.intr(),
                        channels=voxels[0].channels, patch_size=7)

    def test_camera_facing_away_gives_empty(self):
        rng = np.random.default_rng(10)
        vmap = self.map_of([make_voxel(rng, center=[0, 0, 0], side=0.3)])
        pose = lookat([0.0, 0.0, -3.0], target=[0.0, 0.0, -10.0])
        assert render_visible(vmap, pose, 4) == []

    def test_single_voxel_feature_at_projection(self):
        rng = np.random.default_rng(11)
        voxel = make_voxel(rng, center=[0.1, -0.05, 0.0], side=0.3)
        voxel.density_nodes[:] = 5.0  # clearly opaque
        vmap = self.map_of([voxel])
        pose = lookat([0.0, 0.0, -3.0])
        feats = render_visible(vmap, pose, 8)
        assert len(feats) == 1
        f = feats[0]
        assert np.allclose(f.pixel, project(pose, self.intr(), voxel.center))
        assert np.array_equal(f.world_point, voxel.center)
        assert f.opacity >= 0.1

    def test_opacity_threshold_drops_empty_voxels(self):
        rng = np.random.default_rng(12)
        opaque = make_voxel(rng, center=[0.2, 0.0, 0.0], side=0.3)
        opaque.density_nodes[:] = 5.0
        empty = make_voxel(rng, center=[-0.2, 0.0, 0.0], side=0.3)
        empty.density_nodes[:] = -60.0
        empty.track_id = 1
        vmap = self.map_of([opaque, empty])
        feats = render_visible(vmap, lookat([0.0, 0.0, -3.0]), 8,
                               opacity_min=0.1)
        assert [f.landmark_id for f in feats] == [0]

    def test_batch_matches_scalar(self):
        rng = np.random.default_rng(13)
        voxel = make_voxel(rng)
        origins = voxel.center + rng.standard_normal((30, 3)) * 3.0
        dirs = voxel.center - origins + rng.standard_normal((30, 3)) * 0.05
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        rendered, opacity, hit = render_rays_batch(voxel, origins, dirs, 6)
        for i in range(30):
            if not hit[i]:
                assert np.all(rendered[i] == 0.0)
                continue
            want_d, want_o = render_ray(voxel, Ray(origins[i], dirs[i]), 6)
            assert np.max(np.abs(rendered[i] - want_d)) < 1e-12
            assert abs(opacity[i] - want_o) < 1e-12
