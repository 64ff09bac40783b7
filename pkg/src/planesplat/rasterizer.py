"""Software tile rasterizer for flattened Gaussians.

Produces per-pixel color, blended normal (camera frame, NOT renormalized),
blended plane distance, ray-plane depth, the legacy z-blended depth, and
accumulated opacity.  The ray-plane depth divides the blended distance map
by (blended normal . pixel ray); keeping the normal unnormalized is what
makes the accumulation weights cancel exactly for a single Gaussian.

backward() provides analytic reverse-mode gradients of all maps with
respect to every Gaussian parameter; it is validated against central
finite differences in the test suite.
"""

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .gaussians import quat_to_rot, view_colors, normals_and_distances, SH_C1


@dataclass
class RasterConfig:
    z_near: float = 0.01
    tile: int = 16
    t_stop: float = 1e-4       # stop blending once transmittance falls below
    alpha_max: float = 0.99
    dilation: float = 0.3      # low-pass added to the 2D covariance diagonal
    footprint_sigma: float = 3.0
    eps_den: float = 1e-6      # |blended normal . ray| below this -> invalid depth
    alpha_min: float = 0.5     # accumulation below this -> invalid depth


DEFAULT_CONFIG = RasterConfig()


@dataclass
class RenderMaps:
    color: np.ndarray          # (H, W, 3)
    normal: np.ndarray         # (H, W, 3) camera frame, unnormalized blend
    distance: np.ndarray       # (H, W) blended plane distance
    depth: np.ndarray          # (H, W) ray-plane depth, 0 where invalid
    depth_valid: np.ndarray    # (H, W) bool
    depth_zblend: np.ndarray   # (H, W) legacy z blend
    alpha: np.ndarray          # (H, W) accumulated opacity
    cache: dict = field(default_factory=dict, repr=False)  # forward state for backward()


@dataclass
class ParamGradients:
    positions: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray
    sh1: np.ndarray = None
    da: float = 0.0            # exposure gradients for the rendered image
    db: float = 0.0
    densify_abs: np.ndarray = None   # summed |d mean2d| per Gaussian
    seen: np.ndarray = None          # Gaussians that reached the rasterizer

    @staticmethod
    def zeros(cloud):
        n = len(cloud)
        return ParamGradients(
            positions=np.zeros((n, 3)),
            rotations=np.zeros((n, 4)),
            log_scales=np.zeros((n, 3)),
            opacity_logits=np.zeros(n),
            colors=np.zeros((n, 3)),
            sh1=None if cloud.sh1 is None else np.zeros((n, 3, 3)),
            densify_abs=np.zeros(n),
            seen=np.zeros(n, dtype=bool),
        )

    def add_(self, other):
        self.positions += other.positions
        self.rotations += other.rotations
        self.log_scales += other.log_scales
        self.opacity_logits += other.opacity_logits
        self.colors += other.colors
        if self.sh1 is not None and other.sh1 is not None:
            self.sh1 += other.sh1
        self.da += other.da
        self.db += other.db
        if other.densify_abs is not None:
            self.densify_abs += other.densify_abs
        if other.seen is not None:
            self.seen |= other.seen
        return self


@dataclass
class MapGradients:
    """Per-pixel upstream gradients for backward(); None means zero."""
    color: np.ndarray = None
    normal: np.ndarray = None
    distance: np.ndarray = None
    depth: np.ndarray = None
    zblend: np.ndarray = None
    alpha: np.ndarray = None


def _project_all(cloud, camera, cfg):
    """Cull + project every Gaussian. Returns None when nothing survives."""
    R_w = camera.R_c.T
    t_all = (cloud.positions - camera.T_c[None, :]) @ camera.R_c  # camera frame
    keep = t_all[:, 2] > cfg.z_near
    idx = np.nonzero(keep)[0]
    if idx.size == 0:
        return None

    t = t_all[idx]
    x, y, z = t[:, 0], t[:, 1], t[:, 2]
    fx, fy, cx, cy = camera.fx, camera.fy, camera.cx, camera.cy
    mean2d = np.stack([fx * x / z + cx, fy * y / z + cy], axis=1)

    J = np.zeros((idx.size, 2, 3))
    J[:, 0, 0] = fx / z
    J[:, 0, 2] = -fx * x / z**2
    J[:, 1, 1] = fy / z
    J[:, 1, 2] = -fy * y / z**2
    M = J @ R_w[None, :, :]

    qhat = cloud.unit_quaternions()[idx]
    R = quat_to_rot(qhat)
    s = np.exp(cloud.log_scales[idx])
    Sigma = np.einsum("nij,nj,nkj->nik", R, s**2, R)
    cov2d = np.einsum("nij,njk,nlk->nil", M, Sigma, M)
    cov2d[:, 0, 0] += cfg.dilation
    cov2d[:, 1, 1] += cfg.dilation

    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    conic = np.stack([c / det, -b / det, a / det], axis=1)
    mid = 0.5 * (a + c)
    lam_max = mid + np.sqrt(np.maximum((0.5 * (a - c))**2 + b * b, 0.0))
    radius = np.ceil(cfg.footprint_sigma * np.sqrt(lam_max))

    on = ((mean2d[:, 0] + radius >= 0) & (mean2d[:, 0] - radius <= camera.width - 1)
          & (mean2d[:, 1] + radius >= 0) & (mean2d[:, 1] - radius <= camera.height - 1))
    if not np.any(on):
        return None
    sel = np.nonzero(on)[0]

    return {
        "idx": idx[sel], "t": t[sel], "mean2d": mean2d[sel],
        "cov2d": cov2d[sel], "conic": conic[sel], "radius": radius[sel],
        "J": J[sel], "M": M[sel], "R": R[sel], "s": s[sel], "qhat": qhat[sel],
        "Sigma": Sigma[sel], "R_w": R_w,
    }


def project_gaussian(cloud, i, camera, cfg=DEFAULT_CONFIG):
    """2D mean, dilated 2D covariance, and camera z of one Gaussian.

    Returns None when the center is behind z_near or the 3-sigma footprint
    misses the image entirely.
    """
    sub = cloud.copy()
    sub.positions = cloud.positions[i:i + 1]
    sub.rotations = cloud.rotations[i:i + 1]
    sub.log_scales = cloud.log_scales[i:i + 1]
    sub.opacity_logits = cloud.opacity_logits[i:i + 1]
    sub.colors = cloud.colors[i:i + 1]
    if cloud.sh1 is not None:
        sub.sh1 = cloud.sh1[i:i + 1]
    p = _project_all(sub, camera, cfg)
    if p is None:
        return None
    return p["mean2d"][0], p["cov2d"][0], float(p["t"][0, 2])


def _tile_bins(mean2d, radius, order, width, height, tile):
    """CSR contributor lists per tile; contributors appear in depth order."""
    n_tx = (width + tile - 1) // tile
    n_ty = (height + tile - 1) // tile
    mx = mean2d[order, 0]
    my = mean2d[order, 1]
    r = radius[order]
    tx0 = np.clip(np.floor((mx - r) / tile).astype(np.int64), 0, n_tx - 1)
    tx1 = np.clip(np.floor((mx + r) / tile).astype(np.int64), 0, n_tx - 1)
    ty0 = np.clip(np.floor((my - r) / tile).astype(np.int64), 0, n_ty - 1)
    ty1 = np.clip(np.floor((my + r) / tile).astype(np.int64), 0, n_ty - 1)
    counts = (tx1 - tx0 + 1) * (ty1 - ty0 + 1)
    total = int(counts.sum())
    rep = np.repeat(np.arange(order.size), counts)
    start = np.concatenate([[0], np.cumsum(counts)[:-1]])
    local = np.arange(total) - np.repeat(start, counts)
    w = (tx1 - tx0 + 1)[rep]
    tiles_x = tx0[rep] + local % w
    tiles_y = ty0[rep] + local // w
    tile_id = tiles_y * n_tx + tiles_x
    # lexsort: primary tile id, secondary depth position (rep is already depth order)
    perm = np.lexsort((rep, tile_id))
    tile_id = tile_id[perm]
    entries = rep[perm]  # positions into the sorted arrays
    offsets = np.zeros(n_tx * n_ty + 1, dtype=np.int64)
    np.add.at(offsets, tile_id + 1, 1)
    offsets = np.cumsum(offsets)
    return offsets, entries


def render(cloud, camera, cfg=DEFAULT_CONFIG):
    """Render all maps by front-to-back alpha blending in per-tile depth order."""
    H, W = camera.height, camera.width
    maps = RenderMaps(
        color=np.zeros((H, W, 3)), normal=np.zeros((H, W, 3)),
        distance=np.zeros((H, W)), depth=np.zeros((H, W)),
        depth_valid=np.zeros((H, W), dtype=bool), depth_zblend=np.zeros((H, W)),
        alpha=np.zeros((H, W)),
    )
    rays = camera.ray_grid()
    maps.cache = {"camera": camera, "cfg": cfg, "rays": rays, "proj": None}
    if len(cloud) == 0:
        return maps
    proj = _project_all(cloud, camera, cfg)
    if proj is None:
        return maps

    idx = proj["idx"]
    n_cam_all, d_all, axes_all, signs_all = normals_and_distances(cloud, camera)
    colors_all, gate, dirs, rnorm = view_colors(cloud, camera, with_grad=True)

    order = np.argsort(proj["t"][:, 2], kind="stable")
    srt = {k: proj[k][order] for k in
           ("idx", "t", "mean2d", "cov2d", "conic", "radius", "J", "M",
            "R", "s", "qhat", "Sigma")}
    srt["R_w"] = proj["R_w"]
    colors_v = colors_all[srt["idx"]]
    normals_v = n_cam_all[srt["idx"]]
    dists_v = d_all[srt["idx"]]
    zs_v = srt["t"][:, 2]

    offsets, entries = _tile_bins(proj["mean2d"], proj["radius"], order, W, H, cfg.tile)

    opac = 1.0 / (1.0 + np.exp(-cloud.opacity_logits[srt["idx"]]))
    _kernels.forward_blend(
        offsets, entries, srt["mean2d"], srt["conic"], opac,
        colors_v, normals_v, dists_v, zs_v,
        W, H, cfg.tile, cfg.t_stop, cfg.alpha_max,
        maps.color, maps.normal, maps.distance, maps.depth_zblend, maps.alpha)

    denom = np.einsum("hwc,hwc->hw", maps.normal, rays)
    valid = (np.abs(denom) >= cfg.eps_den) & (maps.alpha >= cfg.alpha_min)
    depth = np.zeros((H, W))
    np.divide(maps.distance, denom, out=depth, where=valid)
    valid &= depth > 0  # planes behind the camera are not usable geometry
    depth[~valid] = 0.0
    maps.depth = depth
    maps.depth_valid = valid

    maps.cache.update({
        "proj": srt, "offsets": offsets, "entries": entries, "opac": opac,
        "colors_v": colors_v, "normals_v": normals_v, "dists_v": dists_v,
        "zs_v": zs_v, "denom": denom, "gate": gate, "dirs": dirs,
        "rnorm": rnorm, "n_axes": axes_all, "n_signs": signs_all,
    })
    return maps


# quaternion->rotation partial derivatives; rows follow (w, x, y, z)
def _dR_dq(qhat):
    w, x, y, z = qhat[:, 0], qhat[:, 1], qhat[:, 2], qhat[:, 3]
    n = qhat.shape[0]
    D = np.zeros((n, 4, 3, 3))
    zero = np.zeros(n)
    D[:, 0] = 2 * np.stack([
        np.stack([zero, -z, y], 1),
        np.stack([z, zero, -x], 1),
        np.stack([-y, x, zero], 1)], axis=1)
    D[:, 1] = 2 * np.stack([
        np.stack([zero, y, z], 1),
        np.stack([y, -2 * x, -w], 1),
        np.stack([z, w, -2 * x], 1)], axis=1)
    D[:, 2] = 2 * np.stack([
        np.stack([-2 * y, x, w], 1),
        np.stack([x, zero, z], 1),
        np.stack([-w, z, -2 * y], 1)], axis=1)
    D[:, 3] = 2 * np.stack([
        np.stack([-2 * z, -w, x], 1),
        np.stack([w, -2 * z, y], 1),
        np.stack([x, y, zero], 1)], axis=1)
    return D


def backward(cloud, camera, maps, loss_grads, cfg=None):
    """Analytic gradients of the rendered maps with respect to cloud parameters.

    ``maps`` must come from render() on the same cloud/camera.  The
    unbiased-depth gradient is folded into the distance and normal paths
    through the quotient rule before the blending reverse pass.
    """
    cfg = cfg or maps.cache["cfg"]
    grads = ParamGradients.zeros(cloud)
    srt = maps.cache.get("proj")
    if srt is None:
        return grads
    H, W = camera.height, camera.width

    def as_map(g, shape):
        return np.zeros(shape) if g is None else np.asarray(g, dtype=np.float64)

    g_color = as_map(loss_grads.color, (H, W, 3))
    g_normal = as_map(loss_grads.normal, (H, W, 3)).copy()
    g_dist = as_map(loss_grads.distance, (H, W)).copy()
    g_z = as_map(loss_grads.zblend, (H, W))
    g_alpha = as_map(loss_grads.alpha, (H, W))

    if loss_grads.depth is not None:
        v = maps.depth_valid
        gd = np.where(v, np.asarray(loss_grads.depth, dtype=np.float64), 0.0)
        denom = maps.cache["denom"]
        rays = maps.cache["rays"]
        with np.errstate(divide="ignore", invalid="ignore"):
            g_dist += np.where(v, gd / denom, 0.0)
            scale = np.where(v, -gd * maps.distance / denom**2, 0.0)
        g_normal += scale[..., None] * rays

    m = len(srt["idx"])
    d_mean2d = np.zeros((m, 2))
    d_conic = np.zeros((m, 3))
    d_opac = np.zeros(m)
    d_color = np.zeros((m, 3))
    d_normal = np.zeros((m, 3))
    d_dist = np.zeros(m)
    d_z = np.zeros(m)
    densify = np.zeros(m)

    _kernels.backward_blend(
        maps.cache["offsets"], maps.cache["entries"],
        srt["mean2d"], srt["conic"], maps.cache["opac"],
        maps.cache["colors_v"], maps.cache["normals_v"],
        maps.cache["dists_v"], maps.cache["zs_v"],
        W, H, cfg.tile, cfg.t_stop, cfg.alpha_max,
        g_color, g_normal, g_dist, g_z, g_alpha,
        d_mean2d, d_conic, d_opac, d_color, d_normal, d_dist, d_z,
        densify)

    # conic (A, B, C) -> full 2D covariance gradient: dCov = -K G K
    GK = np.empty((m, 2, 2))
    GK[:, 0, 0] = d_conic[:, 0]
    GK[:, 0, 1] = GK[:, 1, 0] = 0.5 * d_conic[:, 1]
    GK[:, 1, 1] = d_conic[:, 2]
    Kfull = np.empty((m, 2, 2))
    Kfull[:, 0, 0] = srt["conic"][:, 0]
    Kfull[:, 0, 1] = Kfull[:, 1, 0] = srt["conic"][:, 1]
    Kfull[:, 1, 1] = srt["conic"][:, 2]
    d_cov = -np.einsum("nij,njk,nkl->nil", Kfull, GK, Kfull)

    M = srt["M"]
    Sigma = srt["Sigma"]
    d_Sigma = np.einsum("nji,njk,nkl->nil", M, d_cov, M)
    d_M = 2.0 * np.einsum("nij,njk,nkl->nil", d_cov, M, Sigma)
    d_J = np.einsum("nij,kj->nik", d_M, srt["R_w"])

    t = srt["t"]
    x, y, z = t[:, 0], t[:, 1], t[:, 2]
    fx, fy = camera.fx, camera.fy
    d_t = np.zeros((m, 3))
    d_t[:, 0] = d_J[:, 0, 2] * (-fx / z**2)
    d_t[:, 1] = d_J[:, 1, 2] * (-fy / z**2)
    d_t[:, 2] = (d_J[:, 0, 0] * (-fx / z**2) + d_J[:, 0, 2] * (2 * fx * x / z**3)
                 + d_J[:, 1, 1] * (-fy / z**2) + d_J[:, 1, 2] * (2 * fy * y / z**3))
    d_t[:, 0] += d_mean2d[:, 0] * fx / z
    d_t[:, 1] += d_mean2d[:, 1] * fy / z
    d_t[:, 2] += -d_mean2d[:, 0] * fx * x / z**2 - d_mean2d[:, 1] * fy * y / z**2
    d_t[:, 2] += d_z

    # plane distance d = t . n_cam feeds both the center and the normal
    n_cam = maps.cache["normals_v"]
    d_t += d_dist[:, None] * n_cam
    d_ncam = d_normal + d_dist[:, None] * t

    # rotation gradient: covariance term + normal column term
    s2 = srt["s"] ** 2
    R = srt["R"]
    d_R = 2.0 * np.einsum("nij,njk,nk->nik", d_Sigma, R, s2)
    d_logs = 2.0 * s2 * np.einsum("nji,njk,nki->ni", R, d_Sigma, R)

    sidx = srt["idx"]
    axes = maps.cache["n_axes"][sidx]
    signs = maps.cache["n_signs"][sidx]
    d_axis_world = signs[:, None] * (d_ncam @ camera.R_c.T)
    rows = np.arange(m)
    d_R[rows, :, axes] += d_axis_world

    Dq = _dR_dq(srt["qhat"])
    d_qhat = np.einsum("nij,ncij->nc", d_R, Dq)
    qraw = cloud.rotations[sidx]
    qn = np.linalg.norm(qraw, axis=1)
    qhat = srt["qhat"]
    d_q = (d_qhat - qhat * np.einsum("nc,nc->n", d_qhat, qhat)[:, None]) / qn[:, None]

    d_mu = d_t @ camera.R_c.T

    # color chain: clamp gate, then optional SH (direction depends on position)
    gate = maps.cache["gate"][sidx]
    dc = d_color * gate
    d_base = dc
    if cloud.sh1 is None:
        d_sh1 = None
    else:
        sh = cloud.sh1[sidx]
        dirs = maps.cache["dirs"][sidx]
        rn = maps.cache["rnorm"][sidx]
        xd, yd, zd = dirs[:, 0], dirs[:, 1], dirs[:, 2]
        basis_jac = np.zeros((m, 3, 3))  # d basis_m / d dir_j
        basis_jac[:, 0, 1] = -SH_C1
        basis_jac[:, 1, 2] = SH_C1
        basis_jac[:, 2, 0] = -SH_C1
        d_basis = np.einsum("nc,nmc->nm", dc, sh)
        d_dir = np.einsum("nm,nmj->nj", d_basis, basis_jac)
        proj_perp = np.eye(3)[None] - dirs[:, :, None] * dirs[:, None, :]
        d_mu += np.einsum("nij,nj->ni", proj_perp, d_dir) / rn[:, None]
        basis = np.stack([-yd, zd, -xd], axis=1) * SH_C1
        d_sh1 = basis[:, :, None] * dc[:, None, :]

    o = maps.cache["opac"]
    d_logit = d_opac * o * (1.0 - o)

    np.add.at(grads.positions, sidx, d_mu)
    np.add.at(grads.rotations, sidx, d_q)
    np.add.at(grads.log_scales, sidx, d_logs)
    np.add.at(grads.opacity_logits, sidx, d_logit)
    np.add.at(grads.colors, sidx, d_base)
    if d_sh1 is not None:
        np.add.at(grads.sh1, sidx, d_sh1)
    np.add.at(grads.densify_abs, sidx, densify)
    grads.seen[sidx] = True
    return grads
