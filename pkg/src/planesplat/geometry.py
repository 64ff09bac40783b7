"""Cameras, projections, plane-induced homographies, and the training view graph.

Pose convention: every camera stores its camera-to-world rotation ``R_c``
(columns are the camera axes expressed in world coordinates; the third
column is the forward/optical axis) and its center ``T_c`` in world units.
World-to-camera is derived on demand:  x_cam = R_c^T (x_world - T_c).

Pixel convention: continuous coordinates with pixel centers at integer
positions, (0, 0) being the center of the top-left pixel.
"""

from dataclasses import dataclass

import numpy as np

# Planes closer to the camera center than this are degenerate: the induced
# homography blows up, so callers mask the pixel instead.
EPS_PLANE_DIST = 1e-8


def _as_f64(a, shape, name):
    a = np.asarray(a, dtype=np.float64)
    if a.shape != shape:
        raise ValueError(f"{name} must have shape {shape}, got {a.shape}")
    return a


@dataclass(frozen=True)
class Camera:
    """Pinhole camera: intrinsics K plus camera-to-world pose (R_c, T_c)."""

    K: np.ndarray
    R_c: np.ndarray
    T_c: np.ndarray
    width: int
    height: int
    image_id: int = 0

    def __post_init__(self):
        object.__setattr__(self, "K", _as_f64(self.K, (3, 3), "K"))
        object.__setattr__(self, "R_c", _as_f64(self.R_c, (3, 3), "R_c"))
        object.__setattr__(self, "T_c", _as_f64(self.T_c, (3,), "T_c"))
        if self.width < 8 or self.height < 8:
            raise ValueError("image dimensions must be at least 8x8")
        R = self.R_c
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-9):
            raise ValueError("R_c is not orthonormal")
        if np.linalg.det(R) < 0:
            raise ValueError("R_c must have determinant +1")
        K = self.K
        if K[1, 0] != 0 or K[2, 0] != 0 or K[2, 1] != 0:
            raise ValueError("K must be upper triangular")
        if K[0, 0] <= 0 or K[1, 1] <= 0:
            raise ValueError("focal lengths must be positive")
        if abs(K[2, 2] - 1.0) > 1e-12:
            raise ValueError("K[2,2] must be 1")

    @property
    def fx(self):
        return self.K[0, 0]

    @property
    def fy(self):
        return self.K[1, 1]

    @property
    def cx(self):
        return self.K[0, 2]

    @property
    def cy(self):
        return self.K[1, 2]

    @property
    def forward(self):
        """Optical axis direction in world coordinates."""
        return self.R_c[:, 2]

    def ray_grid(self):
        """Camera-frame ray directions K^-1 (u, v, 1) for every pixel, shape (H, W, 3)."""
        u = np.arange(self.width, dtype=np.float64)
        v = np.arange(self.height, dtype=np.float64)
        uu, vv = np.meshgrid(u, v)
        rays = np.empty((self.height, self.width, 3))
        Kinv = np.linalg.inv(self.K)
        rays[..., 0] = Kinv[0, 0] * uu + Kinv[0, 1] * vv + Kinv[0, 2]
        rays[..., 1] = Kinv[1, 1] * vv + Kinv[1, 2]
        rays[..., 2] = 1.0
        return rays


def world_to_camera(camera, point):
    """Map a world point into the camera frame: R_c^T (p - T_c)."""
    point = np.asarray(point, dtype=np.float64)
    return camera.R_c.T @ (point - camera.T_c)


def camera_to_world(camera, point):
    point = np.asarray(point, dtype=np.float64)
    return camera.R_c @ point + camera.T_c


def pixel_ray(camera, pixel):
    """Camera-frame ray K^-1 (u, v, 1) through a pixel; unnormalized, z = 1."""
    u, v = float(pixel[0]), float(pixel[1])
    return np.linalg.inv(camera.K) @ np.array([u, v, 1.0])


def project(camera, point_world):
    """Project a world point to pixel coordinates. Returns (pixel, depth_z)."""
    t = world_to_camera(camera, point_world)
    p = camera.K @ t
    return p[:2] / p[2], t[2]


@dataclass(frozen=True)
class Homography:
    """3x3 map from homogeneous reference pixels to neighbor pixels."""

    H: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "H", _as_f64(self.H, (3, 3), "H"))
        if not np.all(np.isfinite(self.H)):
            raise ValueError("homography entries must be finite")
        if np.linalg.norm(self.H) == 0:
            raise ValueError("homography must be nonzero")

    def apply(self, pixel):
        """Warp a single pixel; returns None when it maps to the plane at infinity."""
        p = self.H @ np.array([pixel[0], pixel[1], 1.0])
        if abs(p[2]) < 1e-15:
            return None
        return p[:2] / p[2]


def relative_pose(ref, nbr):
    """(R_rn, T_rn) such that x_nbr = R_rn x_ref + T_rn for camera-frame points."""
    R_rn = nbr.R_c.T @ ref.R_c
    T_rn = nbr.R_c.T @ (ref.T_c - nbr.T_c)
    return R_rn, T_rn


def compute_homography(ref, nbr, n_r, d_r):
    """Plane-induced homography between pixels of two views.

    ``n_r`` is the plane normal and ``d_r`` the signed plane distance in the
    reference camera frame, with the plane written {x : n_r^T x = d_r}; the
    pair (n_r, d_r) may be jointly sign-flipped without changing the result.
    For front-facing geometry the blended normal points at the camera and
    d_r is negative, which is why the t-term carries the sign it does: with
    the plane rewritten as n^T x + d' = 0 (d' = -d_r) this is the classic
    K_n (R - T n^T / d') K_r^-1.

    Returns None when |d_r| is below EPS_PLANE_DIST (plane through the
    camera center); callers should mask that pixel.
    """
    d_r = float(d_r)
    if abs(d_r) <= EPS_PLANE_DIST:
        return None
    n_r = np.asarray(n_r, dtype=np.float64)
    R_rn, T_rn = relative_pose(ref, nbr)
    H = nbr.K @ (R_rn + np.outer(T_rn, n_r) / d_r) @ np.linalg.inv(ref.K)
    return Homography(H=H)


@dataclass
class ViewGraph:
    """Per-image ordered neighbor lists for multi-view regularization."""

    neighbors: dict
    max_neighbors: int
    max_angle_deg: float
    min_dist: float
    max_dist: float

    def neighbor_ids(self, image_id):
        return self.neighbors.get(image_id, [])


def build_view_graph(cameras, max_neighbors=8, max_angle_deg=30.0,
                     min_dist=0.01, max_dist=1.5):
    """Select neighbor frames per camera by optical-axis angle and baseline.

    A candidate qualifies when the angle between forward axes is at most
    ``max_angle_deg`` and the center distance lies in [min_dist, max_dist].
    Candidates are sorted by (angle, distance) and truncated to
    ``max_neighbors``.  Lists may legitimately be empty.
    """
    if len(cameras) < 2:
        raise ValueError("need at least 2 cameras")
    neighbors = {}
    for ref in cameras:
        cands = []
        for other in cameras:
            if other.image_id == ref.image_id:
                continue
            dist = float(np.linalg.norm(other.T_c - ref.T_c))
            if dist < min_dist or dist > max_dist:
                continue
            cosang = float(np.clip(np.dot(ref.forward, other.forward), -1.0, 1.0))
            angle = np.degrees(np.arccos(cosang))
            if angle > max_angle_deg:
                continue
            cands.append((angle, dist, other.image_id))
        cands.sort()
        neighbors[ref.image_id] = [c[2] for c in cands[:max_neighbors]]
    return ViewGraph(neighbors=neighbors, max_neighbors=max_neighbors,
                     max_angle_deg=max_angle_deg, min_dist=min_dist,
                     max_dist=max_dist)


def sample_neighbor(graph, ref_id, rng):
    """Uniform draw from the reference frame's neighbor list; None when empty."""
    ids = graph.neighbor_ids(ref_id)
    if not ids:
        return None
    return ids[int(rng.integers(len(ids)))]
