"""The optimizable flattened-Gaussian scene representation.

Each Gaussian carries a position, a unit quaternion (orientation), three
log-scales, an opacity logit, a base RGB color, and optionally degree-1
spherical-harmonic coefficients.  The axis with the smallest scale acts
as the surface normal once the flattening term has squeezed it down.
"""

from dataclasses import dataclass

import numpy as np

from . import ply_io

SH_C1 = 0.4886025119029199  # degree-1 real spherical harmonic constant


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def logit(p):
    return np.log(p / (1.0 - p))


@dataclass
class GaussianCloud:
    positions: np.ndarray       # (N, 3) world
    rotations: np.ndarray       # (N, 4) quaternions (w, x, y, z)
    log_scales: np.ndarray      # (N, 3)
    opacity_logits: np.ndarray  # (N,)
    colors: np.ndarray          # (N, 3) base RGB in [0, 1]
    sh1: np.ndarray = None      # optional (N, 3, 3): [coeff m, channel]

    def __post_init__(self):
        # own every parameter array: the optimizer mutates them in place
        self.positions = np.array(self.positions, dtype=np.float64, ndmin=2)
        self.rotations = np.array(self.rotations, dtype=np.float64, ndmin=2)
        self.log_scales = np.array(self.log_scales, dtype=np.float64, ndmin=2)
        self.opacity_logits = np.array(self.opacity_logits, dtype=np.float64,
                                       ndmin=1)
        self.colors = np.array(self.colors, dtype=np.float64, ndmin=2)
        if self.sh1 is not None:
            self.sh1 = np.array(self.sh1, dtype=np.float64)
        n = len(self.positions)
        assert self.rotations.shape == (n, 4)
        assert self.log_scales.shape == (n, 3)
        assert self.opacity_logits.shape == (n,)
        assert self.colors.shape == (n, 3)

    def __len__(self):
        return len(self.positions)

    @property
    def scales(self):
        return np.exp(self.log_scales)

    @property
    def opacities(self):
        return sigmoid(self.opacity_logits)

    def unit_quaternions(self):
        q = self.rotations
        return q / np.linalg.norm(q, axis=1, keepdims=True)

    def normalize_quaternions(self):
        """Renormalize in place; called after every optimizer step."""
        self.rotations /= np.linalg.norm(self.rotations, axis=1, keepdims=True)

    def copy(self):
        return GaussianCloud(
            positions=self.positions.copy(),
            rotations=self.rotations.copy(),
            log_scales=self.log_scales.copy(),
            opacity_logits=self.opacity_logits.copy(),
            colors=self.colors.copy(),
            sh1=None if self.sh1 is None else self.sh1.copy(),
        )


def quat_to_rot(q):
    """Unit quaternions (..., 4) in (w, x, y, z) order to rotation matrices (..., 3, 3)."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def rotation_matrices(cloud):
    return quat_to_rot(cloud.unit_quaternions())


def covariance(cloud, i):
    """3x3 covariance R S S^T R^T of Gaussian i; PSD with eigenvalues = squared scales."""
    R = quat_to_rot(cloud.unit_quaternions()[i])
    s = cloud.scales[i]
    return (R * s**2) @ R.T


def normal_axes(cloud):
    """Index of the smallest-scale axis per Gaussian (ties -> lowest index)."""
    return np.argmin(cloud.log_scales, axis=1)


def gaussian_normal(cloud, i, view_dir, camera):
    """Camera-frame unit normal of Gaussian i, oriented against the view direction.

    ``view_dir`` is the world-frame unit vector from camera toward the
    Gaussian.  The smallest-scale axis is ambiguous up to sign; the sign is
    chosen so the camera-frame normal has negative dot product with the
    viewing direction (front-facing).
    """
    k = int(np.argmin(cloud.log_scales[i]))
    R = quat_to_rot(cloud.unit_quaternions()[i])
    axis = R[:, k]
    view_dir = np.asarray(view_dir, dtype=np.float64)
    if np.dot(axis, view_dir) > 0:
        axis = -axis
    return camera.R_c.T @ axis


def plane_distance(cloud, i, camera):
    """Signed distance of Gaussian i's plane from the camera center.

    d_i = (R_c^T (mu_i - T_c))^T (R_c^T n_i): the plane n^T x = d holds for
    the camera-frame Gaussian center, so d and n stay jointly consistent.
    """
    mu_cam = camera.R_c.T @ (cloud.positions[i] - camera.T_c)
    view = cloud.positions[i] - camera.T_c
    nrm = np.linalg.norm(view)
    view = view / nrm if nrm > 0 else camera.forward
    n_cam = gaussian_normal(cloud, i, view, camera)
    return float(mu_cam @ n_cam)


def flatten_loss(cloud):
    """Mean over Gaussians of the smallest scale, with gradient into log-scales.

    The gradient flows only to the argmin log-scale of each Gaussian
    (lowest axis index on ties).
    """
    s = cloud.scales
    k = normal_axes(cloud)
    n = len(cloud)
    smin = s[np.arange(n), k]
    grad = np.zeros_like(cloud.log_scales)
    grad[np.arange(n), k] = smin / n  # d exp(ls)/d ls = s
    return float(np.mean(smin)), grad


def view_colors(cloud, camera, with_grad=False):
    """Per-Gaussian RGB for this view: base color plus optional degree-1 SH.

    Colors are clamped to [0, 1] before blending.  When ``with_grad`` is
    set, also returns the clamp gate and the SH direction terms needed by
    the backward pass.
    """
    c = cloud.colors.copy()
    dirs = None
    r = None
    if cloud.sh1 is not None:
        d = cloud.positions - camera.T_c[None, :]
        r = np.linalg.norm(d, axis=1)
        r = np.maximum(r, 1e-12)
        dirs = d / r[:, None]
        x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
        basis = np.stack([-y, z, -x], axis=1) * SH_C1  # (N, 3)
        c = c + np.einsum("nm,nmc->nc", basis, cloud.sh1)
    gate = (c > 0.0) & (c < 1.0)
    c = np.clip(c, 0.0, 1.0)
    if with_grad:
        return c, gate, dirs, r
    return c


def normals_and_distances(cloud, camera):
    """Vectorized camera-frame normals and plane distances for every Gaussian.

    Returns (n_cam (N,3), d (N,), axes (N,), signs (N,)).
    """
    k = normal_axes(cloud)
    R = rotation_matrices(cloud)
    n = len(cloud)
    axis_world = R[np.arange(n), :, k]  # (N, 3) column k of each R
    view = cloud.positions - camera.T_c[None, :]
    sign = np.where(np.einsum("ni,ni->n", axis_world, view) > 0, -1.0, 1.0)
    n_world = axis_world * sign[:, None]
    n_cam = n_world @ camera.R_c  # row-vector form of R_c^T n
    mu_cam = (cloud.positions - camera.T_c[None, :]) @ camera.R_c
    d = np.einsum("ni,ni->n", mu_cam, n_cam)
    return n_cam, d, k, sign


# -- checkpoint serialization -------------------------------------------------

def save_ply(cloud, path):
    """Binary PLY checkpoint with one vertex per Gaussian."""
    cols = {
        "x": cloud.positions[:, 0], "y": cloud.positions[:, 1], "z": cloud.positions[:, 2],
        "rot_w": cloud.rotations[:, 0].astype(np.float32),
        "rot_x": cloud.rotations[:, 1].astype(np.float32),
        "rot_y": cloud.rotations[:, 2].astype(np.float32),
        "rot_z": cloud.rotations[:, 3].astype(np.float32),
    }
    cols["x"] = cols["x"].astype(np.float32)
    cols["y"] = cols["y"].astype(np.float32)
    cols["z"] = cols["z"].astype(np.float32)
    for j in range(3):
        cols[f"log_scale_{j}"] = cloud.log_scales[:, j].astype(np.float32)
    cols["opacity_logit"] = cloud.opacity_logits.astype(np.float32)
    for j, ch in enumerate("rgb"):
        cols[f"color_{ch}"] = cloud.colors[:, j].astype(np.float32)
    if cloud.sh1 is not None:
        flat = cloud.sh1.reshape(len(cloud), 9)
        for j in range(9):
            cols[f"sh1_{j}"] = flat[:, j].astype(np.float32)
    ply_io.write_ply(path, [("vertex", cols)], binary=True)


def load_ply(path):
    data = ply_io.read_ply(path)
    if "vertex" not in data:
        raise ValueError(f"{path}: checkpoint has no vertex element")
    v = data["vertex"]
    try:
        positions = np.stack([v["x"], v["y"], v["z"]], axis=1)
        rotations = np.stack([v["rot_w"], v["rot_x"], v["rot_y"], v["rot_z"]], axis=1)
        log_scales = np.stack([v[f"log_scale_{j}"] for j in range(3)], axis=1)
        opacity = v["opacity_logit"]
        colors = np.stack([v[f"color_{ch}"] for ch in "rgb"], axis=1)
    except KeyError as e:
        raise ValueError(f"{path}: missing checkpoint property {e}") from e
    sh1 = None
    if "sh1_0" in v:
        sh1 = np.stack([v[f"sh1_{j}"] for j in range(9)], axis=1).reshape(-1, 3, 3)
    return GaussianCloud(positions=positions, rotations=rotations,
                         log_scales=log_scales, opacity_logits=opacity,
                         colors=colors, sh1=sh1)
