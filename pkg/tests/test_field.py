"""Field primitives: camera, trilinear sampling, transfer function, opacity."""

import numpy as np
import pytest

from conftest import rel_err
from voldiff.errors import InvalidParameterError
from voldiff.field import (
    EPS_ALPHA,
    DensityVolume,
    Ray,
    SphericalCamera,
    TransferFunction,
    camera_from_sphere,
    camera_gradients,
    opacity_from_density,
    tf_gradients,
    tf_sample,
    trilinear_gradients,
    trilinear_sample,
)


def _cam(lon, lat, radius=2.0, **kw):
    kw.setdefault("fov_y_deg", 30.0)
    kw.setdefault("width", 5)
    kw.setdefault("height", 5)
    return SphericalCamera(lon, lat, radius, **kw)


class TestCameraFromSphere:
    def test_front_pose(self):
        origin, direction = camera_from_sphere(_cam(0.0, 0.0), 2, 2)
        np.testing.assert_allclose(origin, [2.0, 0.0, 0.0], atol=1e-12)
        np.testing.assert_allclose(direction, [-1.0, 0.0, 0.0], atol=1e-12)

    def test_quarter_turn(self):
        origin, _ = camera_from_sphere(_cam(90.0, 0.0), 2, 2)
        np.testing.assert_allclose(origin, [0.0, 0.0, 2.0], atol=1e-12)

    def test_diagonal_latitude(self):
        origin, _ = camera_from_sphere(_cam(0.0, 45.0, radius=np.sqrt(2.0)), 2, 2)
        np.testing.assert_allclose(origin, [1.0, 1.0, 0.0], atol=1e-12)

    def test_eye_stays_on_sphere(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            cam = _cam(rng.uniform(0, 360), rng.uniform(-89, 89),
                       radius=rng.uniform(0.5, 5.0))
            origin, direction = camera_from_sphere(cam, 1, 3)
            assert abs(np.linalg.norm(origin - cam.center) - cam.radius) < 1e-6 * cam.radius
            assert abs(np.linalg.norm(direction) - 1.0) < 1e-9

    def test_pole_exclusion(self):
        with pytest.raises(InvalidParameterError):
            _cam(0.0, 90.0)
        with pytest.raises(InvalidParameterError):
            _cam(0.0, -89.9995)

    def test_uv_bounds(self):
        with pytest.raises(InvalidParameterError):
            camera_from_sphere(_cam(0.0, 0.0), 5, 0)

    def test_vectorized_pixels(self):
        u = np.arange(5.0)
        v = np.zeros(5)
        origin, direction = camera_from_sphere(_cam(10.0, 20.0), u, v)
        assert origin.shape == (5, 3) and direction.shape == (5, 3)
        np.testing.assert_allclose(np.linalg.norm(direction, axis=-1), 1.0, atol=1e-12)


class TestCameraGradients:
    def test_longitude_direction_at_front_pose(self):
        j_o, _ = camera_gradients(_cam(0.0, 0.0), 2, 2)
        expected = 2.0 * (np.pi / 180.0) * np.array([0.0, 0.0, 1.0])
        np.testing.assert_allclose(j_o[:, 0], expected, atol=1e-12)

    def test_latitude_direction_at_front_pose(self):
        j_o, _ = camera_gradients(_cam(0.0, 0.0), 2, 2)
        expected = 2.0 * (np.pi / 180.0) * np.array([0.0, 1.0, 0.0])
        np.testing.assert_allclose(j_o[:, 1], expected, atol=1e-12)

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(11)
        h = 1e-4
        for _ in range(10):
            lon = rng.uniform(0, 360)
            lat = rng.uniform(-70, 70)
            radius = rng.uniform(1.0, 3.0)
            u, v = rng.integers(0, 5, 2)
            j_o, j_d = camera_gradients(_cam(lon, lat, radius), u, v)
            for idx, (dl, db) in enumerate(((h, 0.0), (0.0, h))):
                op, dp = camera_from_sphere(_cam(lon + dl, lat + db, radius), u, v)
                om, dm = camera_from_sphere(_cam(lon - dl, lat - db, radius), u, v)
                fd_o = (op - om) / (2 * h)
                fd_d = (dp - dm) / (2 * h)
                assert rel_err(j_o[:, idx], fd_o, floor=1e-9) < 1e-5
                assert rel_err(j_d[:, idx], fd_d, floor=1e-9) < 1e-5


class TestRay:
    def test_unit_direction_enforced(self):
        with pytest.raises(InvalidParameterError):
            Ray(np.zeros(3), np.array([1.0, 1.0, 0.0]))

    def test_parameterization(self):
        r = Ray(np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0]))
        np.testing.assert_allclose(r.at(2.5), [1.0, 2.5, 0.0])


class TestTrilinearSample:
    def test_reproduces_node_values(self, rng):
        vol = DensityVolume(rng.uniform(0, 1, (4, 5, 6)))
        xs, ys, zs = vol.node_coords()
        for _ in range(30):
            i, j, k = (rng.integers(0, n) for n in vol.dims)
            p = np.array([xs[i], ys[j], zs[k]])
            assert trilinear_sample(vol, p) == pytest.approx(vol.values[i, j, k], abs=1e-12)

    def test_constant_cell(self):
        vol = DensityVolume(np.full((4, 4, 4), 0.7))
        rng = np.random.default_rng(1)
        pts = rng.uniform(-0.45, 0.45, (100, 3))
        np.testing.assert_allclose(trilinear_sample(vol, pts), 0.7, atol=1e-12)

    def test_quarter_fraction_along_x(self):
        vals = np.zeros((2, 2, 2))
        vals[1, :, :] = 1.0
        vol = DensityVolume(vals, [0.0, 0.0, 0.0], [1.0, 1.0, 1.0])
        # node centers at x=0.25 and 0.75; a quarter of the cell is x=0.375
        p = np.array([0.375, 0.5, 0.5])
        assert trilinear_sample(vol, p) == pytest.approx(0.25, abs=1e-12)

    def test_outside_box_is_zero(self):
        vol = DensityVolume(np.full((4, 4, 4), 0.9))
        assert trilinear_sample(vol, np.array([0.51, 0.0, 0.0])) == 0.0
        assert trilinear_sample(vol, np.array([0.0, -0.7, 0.0])) == 0.0

    def test_exact_on_multilinear_fields(self, rng):
        # grid sampled from a multilinear function is reproduced exactly
        vol = DensityVolume(np.zeros((5, 5, 5)))
        xs, ys, zs = vol.node_coords()
        gx, gy, gz = np.meshgrid(xs, ys, zs, indexing="ij")
        field = lambda x, y, z: 0.2 + 0.3 * x + 0.25 * y + 0.1 * z + 0.2 * x * y * z
        vol = DensityVolume(field(gx, gy, gz))
        pts = rng.uniform(-0.49, 0.49, (200, 3))
        inner = np.all(np.abs(pts) <= 0.5 - 1.0 / 5 / 2, axis=1)  # inside node hull
        got = trilinear_sample(vol, pts[inner])
        want = field(*pts[inner].T)
        assert rel_err(got, want) < 1e-6


class TestTrilinearGradients:
    def test_constant_field_zero_spatial(self):
        vol = DensityVolume(np.full((4, 4, 4), 0.5))
        spatial, _, _ = trilinear_gradients(vol, np.array([0.1, -0.2, 0.05]))
        np.testing.assert_allclose(spatial, 0.0, atol=1e-15)

    def test_partition_of_unity(self, rng):
        vol = DensityVolume(rng.uniform(0, 1, (6, 6, 6)))
        pts = rng.uniform(-0.4, 0.4, (50, 3))
        _, weights, _ = trilinear_gradients(vol, pts)
        np.testing.assert_allclose(weights.sum(axis=-1), 1.0, atol=1e-12)

    def test_index_ramp_gradient(self):
        # values increase by 1/(X-1) per node step along x
        X = 5
        vals = np.broadcast_to(
            (np.arange(X) / (X - 1))[:, None, None], (X, X, X)
        ).copy()
        vol = DensityVolume(vals)
        spacing = vol.voxel_size[0]
        expected = (1.0 / (X - 1)) / spacing
        spatial, _, _ = trilinear_gradients(vol, np.array([0.05, 0.1, -0.1]))
        np.testing.assert_allclose(spatial, [expected, 0.0, 0.0], atol=1e-9)

    def test_matches_finite_differences(self, rng):
        vol = DensityVolume(rng.uniform(0.1, 0.9, (6, 6, 6)))
        h = 1e-6
        count = 0
        for _ in range(150):
            p = rng.uniform(-0.42, 0.42, 3)
            spatial, weights, idx = trilinear_gradients(vol, p)
            for axis in range(3):
                e = np.zeros(3)
                e[axis] = h
                fd = (trilinear_sample(vol, p + e) - trilinear_sample(vol, p - e)) / (2 * h)
                assert abs(spatial[axis] - fd) / max(abs(fd), 1e-6) < 1e-4
            # voxel weights against finite differences on a random corner
            c = rng.integers(0, 8)
            vp = vol.values.copy(); vp.ravel()[idx[c]] += h
            vm = vol.values.copy(); vm.ravel()[idx[c]] -= h
            fdw = (trilinear_sample(DensityVolume(vp), p)
                   - trilinear_sample(DensityVolume(vm), p)) / (2 * h)
            assert abs(weights[c] - fdw) < 1e-6
            count += 1
        assert count >= 100

    def test_outside_box_all_zero(self):
        vol = DensityVolume(np.full((4, 4, 4), 0.5))
        spatial, weights, _ = trilinear_gradients(vol, np.array([0.6, 0.0, 0.0]))
        assert not spatial.any() and not weights.any()


class TestTfSample:
    def test_clamp_to_edge_low(self, small_tf):
        np.testing.assert_allclose(tf_sample(small_tf, 0.0), small_tf.texels[0])

    def test_clamp_to_edge_high(self, small_tf):
        np.testing.assert_allclose(tf_sample(small_tf, 1.0), small_tf.texels[-1])

    def test_two_texel_midpoint(self):
        tf = TransferFunction([[0.0, 0.2, 0.4, 1.0], [1.0, 0.6, 0.0, 3.0]])
        np.testing.assert_allclose(tf_sample(tf, 0.5),
                                   0.5 * (tf.texels[0] + tf.texels[1]))

    def test_output_is_convex_combination(self, small_tf, rng):
        d = rng.uniform(0, 1, 100)
        out = tf_sample(small_tf, d)
        lo = small_tf.texels.min(axis=0)
        hi = small_tf.texels.max(axis=0)
        assert np.all(out >= lo - 1e-12) and np.all(out <= hi + 1e-12)

    def test_single_texel(self):
        tf = TransferFunction([[0.1, 0.2, 0.3, 0.4]])
        np.testing.assert_allclose(tf_sample(tf, 0.37), tf.texels[0])


class TestTfGradients:
    def test_clamp_region_zero_slope(self):
        tf = TransferFunction(np.random.default_rng(0).uniform(0, 1, (4, 4)))
        slope, _, _ = tf_gradients(tf, 0.05)  # below first center 0.125
        np.testing.assert_allclose(slope, 0.0)

    def test_weights_sum_to_one(self, small_tf, rng):
        d = rng.uniform(0, 1, 50)
        _, weights, _ = tf_gradients(small_tf, d)
        assert np.all(weights >= 0)
        np.testing.assert_allclose(weights.sum(axis=-1), 1.0, atol=1e-12)

    def test_two_texel_midpoint_weights(self):
        tf = TransferFunction([[0.0, 0.0, 0.0, 0.0], [1.0, 1.0, 1.0, 1.0]])
        _, weights, idx = tf_gradients(tf, 0.5)
        np.testing.assert_allclose(weights, [0.5, 0.5])
        np.testing.assert_array_equal(idx, [0, 1])

    def test_matches_finite_differences_away_from_kinks(self, small_tf, rng):
        R = small_tf.resolution
        h = 1e-7
        for _ in range(120):
            d = rng.uniform(0.5 / R + 1e-3, 1 - 0.5 / R - 1e-3)
            # skip texel-center kinks
            if abs((d * R - 0.5) - round(d * R - 0.5)) < 1e-3:
                continue
            slope, _, _ = tf_gradients(small_tf, d)
            fd = (tf_sample(small_tf, d + h) - tf_sample(small_tf, d - h)) / (2 * h)
            assert rel_err(slope, fd) < 1e-6


class TestOpacity:
    def test_zero_absorption(self):
        alpha, _ = opacity_from_density(0.0, 0.5)
        assert alpha == 0.0

    def test_half_life(self):
        alpha, _ = opacity_from_density(np.log(2.0), 1.0)
        assert alpha == pytest.approx(0.5, abs=1e-12)

    def test_clamp_at_high_absorption(self):
        alpha, dalpha = opacity_from_density(1e9, 1.0)
        assert alpha == 1.0 - EPS_ALPHA
        assert dalpha == 0.0

    def test_monotone_in_tau_and_dt(self):
        taus = np.linspace(0, 20, 40)
        a1, _ = opacity_from_density(taus, 0.3)
        assert np.all(np.diff(a1) >= 0)
        a_small, _ = opacity_from_density(2.0, 0.1)
        a_big, _ = opacity_from_density(2.0, 0.4)
        assert a_big > a_small
        assert np.all(a1 <= 1.0 - EPS_ALPHA) and np.all(a1 >= 0.0)

    def test_derivative_matches_finite_differences(self, rng):
        for _ in range(50):
            tau = rng.uniform(0.1, 5.0)
            dt = rng.uniform(0.01, 0.5)
            _, dalpha = opacity_from_density(tau, dt)
            h = 1e-6
            fd = (opacity_from_density(tau + h, dt)[0]
                  - opacity_from_density(tau - h, dt)[0]) / (2 * h)
            assert abs(dalpha - fd) / abs(fd) < 1e-8
