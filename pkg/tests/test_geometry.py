"""Cameras, homographies, and the view graph.

Homography correctness is checked against direct projection: sample points
on the plane, project them through both cameras, and demand the warp map
one pixel set onto the other.
"""

import numpy as np
import pytest

from planesplat.geometry import (Camera, build_view_graph, compute_homography,
                                 pixel_ray, project, relative_pose,
                                 sample_neighbor, world_to_camera)

from conftest import make_camera


def rotation_from_axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    K = np.array([[0, -axis[2], axis[1]],
                  [axis[2], 0, -axis[0]],
                  [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * K @ K


class TestCamera:
    def test_rejects_non_orthonormal_rotation(self):
        R = np.eye(3)
        R[0, 0] = 1.001
        with pytest.raises(ValueError):
            make_camera(R=R)

    def test_rejects_reflection(self):
        R = np.diag([1.0, 1.0, -1.0])
        with pytest.raises(ValueError):
            make_camera(R=R)

    def test_rejects_tiny_images(self):
        with pytest.raises(ValueError):
            make_camera(size=4)

    def test_rejects_negative_focal(self):
        K = np.array([[-100.0, 0, 32], [0, 100.0, 32], [0, 0, 1]])
        with pytest.raises(ValueError):
            Camera(K=K, R_c=np.eye(3), T_c=np.zeros(3), width=64, height=64)


class TestWorldToCamera:
    def test_identity_pose(self):
        cam = make_camera()
        assert np.allclose(world_to_camera(cam, [0, 0, 5]), [0, 0, 5])

    def test_pure_translation(self):
        cam = make_camera(T=[1, 0, 0])
        assert np.allclose(world_to_camera(cam, [1, 0, 5]), [0, 0, 5])

    def test_round_trip_random_pose(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            R = rotation_from_axis_angle(rng.normal(size=3), rng.uniform(0, np.pi))
            cam = make_camera(R=R, T=rng.normal(size=3))
            p = rng.normal(size=3)
            q = cam.R_c @ world_to_camera(cam, p) + cam.T_c
            assert np.max(np.abs(q - p)) < 1e-12


class TestPixelRay:
    def test_principal_point_is_optical_axis(self):
        cam = make_camera()
        r = pixel_ray(cam, [(cam.width - 1) / 2, (cam.height - 1) / 2])
        assert np.allclose(r, [0, 0, 1])

    def test_one_focal_length_offset(self):
        K = np.array([[100.0, 0, 50.0], [0, 100.0, 50.0], [0, 0, 1.0]])
        cam = Camera(K=K, R_c=np.eye(3), T_c=np.zeros(3), width=101, height=101)
        assert np.allclose(pixel_ray(cam, [150, 50]), [1, 0, 1])

    def test_inversion_oracle(self):
        K = np.array([[123.0, 0.5, 31.0], [0, 117.0, 29.5], [0, 0, 1.0]])
        cam = Camera(K=K, R_c=np.eye(3), T_c=np.zeros(3), width=64, height=64)
        rng = np.random.default_rng(1)
        for _ in range(20):
            u, v = rng.uniform(0, 63, 2)
            r = pixel_ray(cam, [u, v])
            back = cam.K @ r
            assert np.max(np.abs(back - [u, v, 1.0])) < 1e-12

    def test_ray_grid_matches_pixel_ray(self):
        cam = make_camera(size=16)
        rays = cam.ray_grid()
        for (v, u) in [(0, 0), (7, 3), (15, 15)]:
            assert np.allclose(rays[v, u], pixel_ray(cam, [u, v]), atol=1e-14)


def plane_points_camera_frame(n_unit, d, rng, count=5):
    """Random points x with n.x = d in the reference camera frame."""
    n_unit = np.asarray(n_unit, dtype=float)
    pts = []
    basis = np.linalg.svd(n_unit[None, :])[2][1:]  # two vectors orthogonal to n
    for _ in range(count):
        x = d * n_unit + basis.T @ rng.uniform(-0.5, 0.5, 2)
        pts.append(x)
    return np.array(pts)


class TestHomography:
    def test_identity_view_pair(self):
        cam = make_camera()
        H = compute_homography(cam, cam, np.array([0, 0, -1.0]), -5.0)
        Hn = H.H / H.H[2, 2]
        assert np.allclose(Hn, np.eye(3), atol=1e-12)

    def test_rejects_degenerate_plane(self):
        cam = make_camera()
        assert compute_homography(cam, cam, np.array([0, 0, -1.0]), 0.0) is None

    @pytest.mark.parametrize("tilt_deg", [0.0, 30.0])
    def test_point_projection_oracle(self, tilt_deg):
        """Project plane points through both cameras; the homography must map
        the reference pixels onto the neighbor pixels."""
        rng = np.random.default_rng(42 + int(tilt_deg))
        ref = make_camera()
        R = rotation_from_axis_angle([0, 1, 0], np.radians(8.0))
        nbr = make_camera(R=R, T=[0.4, 0.05, 0.0], image_id=1)

        tilt = rotation_from_axis_angle([1, 0, 0], np.radians(tilt_deg))
        n_ref = tilt @ np.array([0, 0, -1.0])  # camera-facing plane normal
        x0 = np.array([0, 0, 5.0])             # plane passes through this point
        d = float(n_ref @ x0)

        pts_ref = plane_points_camera_frame(n_ref, d, rng)
        H = compute_homography(ref, nbr, n_ref, d)
        for x_ref in pts_ref:
            x_world = ref.R_c @ x_ref + ref.T_c
            p_ref, zr = project(ref, x_world)
            p_nbr, zn = project(nbr, x_world)
            assert zr > 0 and zn > 0
            warped = H.apply(p_ref)
            assert np.max(np.abs(warped - p_nbr)) < 1e-9

    def test_forward_backward_round_trip(self):
        """H_nr H_rn is the identity on pixels of a consistent plane."""
        ref = make_camera()
        R = rotation_from_axis_angle([1, 1, 0], np.radians(5.0))
        nbr = make_camera(R=R, T=[0.3, -0.1, 0.05], image_id=1)
        n_ref = np.array([0.2, -0.1, -1.0])
        n_ref /= np.linalg.norm(n_ref)
        d_ref = float(n_ref @ [0, 0, 4.0])
        # same plane expressed in the neighbor frame
        n_world = ref.R_c @ n_ref
        x_on = ref.R_c @ (d_ref * n_ref) + ref.T_c
        n_nbr = nbr.R_c.T @ n_world
        d_nbr = float(n_nbr @ (nbr.R_c.T @ (x_on - nbr.T_c)))
        H_rn = compute_homography(ref, nbr, n_ref, d_ref)
        H_nr = compute_homography(nbr, ref, n_nbr, d_nbr)
        M = H_nr.H @ H_rn.H
        M /= M[2, 2]
        for p in ([31.5, 31.5], [10.0, 50.0], [60.0, 5.0]):
            q = M @ np.array([p[0], p[1], 1.0])
            q = q[:2] / q[2]
            assert np.max(np.abs(q - p)) < 1e-8


def ring_cameras(n, radius, look_z=5.0):
    cams = []
    for i in range(n):
        th = 2 * np.pi * i / n
        T = np.array([radius * np.cos(th), radius * np.sin(th), 0.0])
        cams.append(make_camera(T=T, image_id=i))
    return cams


class TestViewGraph:
    def test_below_minimum_baseline(self):
        cams = [make_camera(image_id=0), make_camera(image_id=1)]
        g = build_view_graph(cams)
        assert g.neighbor_ids(0) == [] and g.neighbor_ids(1) == []

    def test_paper_thresholds_accept(self):
        # baseline 0.5, relative angle 10 degrees: mutual neighbors
        R = rotation_from_axis_angle([0, 1, 0], np.radians(10.0))
        cams = [make_camera(image_id=0), make_camera(R=R, T=[0.5, 0, 0], image_id=1)]
        g = build_view_graph(cams)
        assert g.neighbor_ids(0) == [1] and g.neighbor_ids(1) == [0]

    def test_paper_thresholds_reject_angle(self):
        R = rotation_from_axis_angle([0, 1, 0], np.radians(45.0))
        cams = [make_camera(image_id=0), make_camera(R=R, T=[0.5, 0, 0], image_id=1)]
        g = build_view_graph(cams)
        assert g.neighbor_ids(0) == []

    def test_reject_long_baseline(self):
        cams = [make_camera(image_id=0), make_camera(T=[2.0, 0, 0], image_id=1)]
        g = build_view_graph(cams)
        assert g.neighbor_ids(0) == []

    def test_sorted_by_angle_then_distance_and_truncated(self):
        cams = [make_camera(image_id=0)]
        # same angle, increasing distance
        for i, dist in enumerate([0.8, 0.2, 0.5], start=1):
            cams.append(make_camera(T=[dist, 0, 0], image_id=i))
        # larger angle, short distance: sorts after the zero-angle ones
        R = rotation_from_axis_angle([0, 1, 0], np.radians(20.0))
        cams.append(make_camera(R=R, T=[0.1, 0, 0], image_id=4))
        g = build_view_graph(cams, max_neighbors=3)
        assert g.neighbor_ids(0) == [2, 3, 1]
        assert all(len(v) <= 3 for v in g.neighbors.values())
        assert all(i not in v for i, v in g.neighbors.items())

    def test_empty_list_is_legitimate(self):
        cams = [make_camera(image_id=0), make_camera(T=[9.0, 0, 0], image_id=1)]
        g = build_view_graph(cams)
        assert g.neighbor_ids(0) == []


class TestSampleNeighbor:
    def test_singleton(self):
        cams = [make_camera(image_id=0), make_camera(T=[0.5, 0, 0], image_id=1)]
        g = build_view_graph(cams)
        rng = np.random.default_rng(0)
        assert all(sample_neighbor(g, 0, rng) == 1 for _ in range(10))

    def test_empty(self):
        cams = [make_camera(image_id=0), make_camera(image_id=1)]
        g = build_view_graph(cams)
        assert sample_neighbor(g, 0, np.random.default_rng(0)) is None

    def test_uniformity_multinomial(self):
        """10^4 draws over 4 neighbors: each frequency within 5 sigma of 1/4."""
        cams = [make_camera(image_id=0)]
        for i in range(1, 5):
            cams.append(make_camera(T=[0.2 + 0.05 * i, 0, 0], image_id=i))
        g = build_view_graph(cams)
        rng = np.random.default_rng(7)
        n = 10_000
        counts = np.zeros(5)
        for _ in range(n):
            counts[sample_neighbor(g, 0, rng)] += 1
        p = 0.25
        sigma = np.sqrt(n * p * (1 - p))
        assert counts[0] == 0
        assert np.all(np.abs(counts[1:] - n * p) < 5 * sigma)

    def test_deterministic_under_seed(self):
        cams = [make_camera(image_id=0)]
        for i in range(1, 4):
            cams.append(make_camera(T=[0.3 + 0.1 * i, 0, 0], image_id=i))
        g = build_view_graph(cams)
        draws1 = [sample_neighbor(g, 0, np.random.default_rng(3)) for _ in range(1)]
        draws2 = [sample_neighbor(g, 0, np.random.default_rng(3)) for _ in range(1)]
        assert draws1 == draws2
