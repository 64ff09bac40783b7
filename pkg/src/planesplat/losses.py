"""Training objectives and their gradients with respect to the rendered maps.

Every loss returns its scalar value together with per-pixel gradient
arrays; the trainer sums those into MapGradients and runs the rasterizer
backward pass once per view.  Occlusion weights in the multi-view terms
are detached: gradients flow through the projection error, never through
the weight.
"""

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
SSIM_WIN = 11
SSIM_SIGMA = 1.5

GRAY_WEIGHTS = np.array([0.299, 0.587, 0.114])

_EPS_DIST = 1e-8      # |blended distance| below this: plane through camera center
_EPS_VAR = 1e-12      # patch variance below this counts as textureless


@dataclass
class ExposureParams:
    """Per-image affine brightness model exp(a) * I + b; initialized to zero."""
    a: np.ndarray
    b: np.ndarray

    @staticmethod
    def zeros(n_images):
        return ExposureParams(a=np.zeros(n_images), b=np.zeros(n_images))


@dataclass
class LossWeights:
    lam: float = 0.2          # SSIM mix inside the image loss
    flatten: float = 100.0    # smallest-scale penalty
    sv_geom: float = 0.015    # single-view normal consistency
    mv_rgb: float = 0.15      # multi-view NCC photometric
    mv_geom: float = 0.03     # multi-view forward-backward projection

    def __post_init__(self):
        for f in (self.lam, self.flatten, self.sv_geom, self.mv_rgb, self.mv_geom):
            if f < 0:
                raise ValueError("loss weights must be non-negative")


def grayscale(image):
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        return image
    return image @ GRAY_WEIGHTS


def edge_weight(gray):
    """(1 - normalized gradient magnitude)^2 of an image; 1 on flat regions."""
    gy, gx = np.gradient(gray)
    mag = np.sqrt(gx**2 + gy**2)
    m = mag.max()
    if m > 0:
        mag = mag / m
    return (1.0 - mag) ** 2


# -- SSIM ----------------------------------------------------------------------

def _gauss1d(win=SSIM_WIN, sigma=SSIM_SIGMA):
    r = np.arange(win) - (win - 1) / 2.0
    k = np.exp(-0.5 * (r / sigma) ** 2)
    return k / k.sum()


def _reflect_indices(n, pad):
    return np.pad(np.arange(n), pad, mode="reflect")


def _corr_valid(x, k):
    out = sliding_window_view(x, len(k), axis=0) @ k
    out = sliding_window_view(out, len(k), axis=1) @ k
    return out


def _corr_valid_adjoint(g, k):
    """Adjoint of _corr_valid: zero-pad and correlate with the reversed kernel."""
    p = len(k) - 1
    gz = np.pad(g, ((p, p), (p, p)))
    kr = k[::-1]
    out = sliding_window_view(gz, len(k), axis=0) @ kr
    out = sliding_window_view(out, len(k), axis=1) @ kr
    return out


def _ssim_channel(x, y, k, pad, need_grad):
    iy = _reflect_indices(x.shape[0], pad)
    ix = _reflect_indices(x.shape[1], pad)
    xp = x[np.ix_(iy, ix)]
    yp = y[np.ix_(iy, ix)]
    mx = _corr_valid(xp, k)
    my = _corr_valid(yp, k)
    sxx = _corr_valid(xp * xp, k) - mx * mx
    syy = _corr_valid(yp * yp, k) - my * my
    sxy = _corr_valid(xp * yp, k) - mx * my
    A1 = 2 * mx * my + SSIM_C1
    A2 = 2 * sxy + SSIM_C2
    B1 = mx * mx + my * my + SSIM_C1
    B2 = sxx + syy + SSIM_C2
    s = (A1 * A2) / (B1 * B2)
    if not need_grad:
        return s, None
    npix = s.size
    gs = np.full_like(s, 1.0 / npix)  # mean over this channel's pixels
    ds_dmx = gs * (2 * my * A2 / (B1 * B2) - 2 * mx * A1 * A2 / (B1 * B1 * B2))
    ds_dsxx = gs * (-A1 * A2 / (B1 * B2 * B2))
    ds_dsxy = gs * (2 * A1 / (B1 * B2))
    d_mx = ds_dmx - 2 * mx * ds_dsxx - my * ds_dsxy
    g_pad = (_corr_valid_adjoint(d_mx, k)
             + 2 * xp * _corr_valid_adjoint(ds_dsxx, k)
             + yp * _corr_valid_adjoint(ds_dsxy, k))
    g = np.zeros_like(x)
    IY = np.broadcast_to(iy[:, None], g_pad.shape)
    IX = np.broadcast_to(ix[None, :], g_pad.shape)
    np.add.at(g, (IY, IX), g_pad)
    return s, g


def ssim(a, b, with_grad=False):
    """Mean local SSIM with an 11x11 Gaussian window (sigma 1.5).

    Windows are taken at every pixel with reflect padding at the borders;
    the result is symmetric in its arguments and 1 for identical images.
    With ``with_grad`` also returns d(ssim)/da.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    assert a.shape == b.shape, "ssim inputs must have equal shapes"
    k = _gauss1d()
    pad = SSIM_WIN // 2
    if a.ndim == 2:
        a = a[..., None]
        b = b[..., None]
        squeeze = True
    else:
        squeeze = False
    vals = []
    grads = np.zeros_like(a) if with_grad else None
    nch = a.shape[2]
    for c in range(nch):
        s, g = _ssim_channel(a[..., c], b[..., c], k, pad, with_grad)
        vals.append(s.mean())
        if with_grad:
            grads[..., c] = g / nch
    value = float(np.mean(vals))
    if not with_grad:
        return value
    if squeeze:
        grads = grads[..., 0]
    return value, grads


# -- exposure-compensated image loss -------------------------------------------

def exposure_adjust(rendered, a, b):
    """exp(a) * I + b, the per-image brightness compensation."""
    return np.exp(a) * np.asarray(rendered, dtype=np.float64) + b


@dataclass
class ImageLossResult:
    value: float
    d_rendered: np.ndarray
    da: float
    db: float
    used_exposure: bool
    ssim_value: float


def image_loss(rendered, gt, a=0.0, b=0.0, lam=0.2, use_exposure=False):
    """(1-lam) L1 + lam (1-SSIM) with the structural-similarity exposure switch.

    The SSIM term always compares the raw render to ground truth.  The L1
    term uses the exposure-adjusted render only when the raw render is
    already structurally close (SSIM loss below 0.5); the switch itself
    carries no gradient.
    """
    rendered = np.asarray(rendered, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    assert rendered.shape == gt.shape, "image/gt shape mismatch"
    ssim_value, dssim = ssim(rendered, gt, with_grad=True)
    ssim_loss = 1.0 - ssim_value

    branch = bool(use_exposure and ssim_loss < 0.5)
    adjusted = exposure_adjust(rendered, a, b) if branch else rendered
    diff = adjusted - gt
    l1 = float(np.mean(np.abs(diff)))
    value = (1.0 - lam) * l1 + lam * ssim_loss

    sgn = np.sign(diff) / diff.size
    da = db = 0.0
    if branch:
        ea = np.exp(a)
        d_rend = (1.0 - lam) * sgn * ea
        da = float((1.0 - lam) * np.sum(sgn * rendered) * ea)
        db = float((1.0 - lam) * np.sum(sgn))
    else:
        d_rend = (1.0 - lam) * sgn
    d_rend = d_rend - lam * dssim
    return ImageLossResult(value=value, d_rendered=d_rend, da=da, db=db,
                           used_exposure=branch, ssim_value=ssim_value)


# -- single-view local-plane consistency ----------------------------------------

@dataclass
class SingleViewResult:
    value: float
    d_depth: np.ndarray
    d_normal: np.ndarray
    count: int


def single_view_loss(maps, gt_image, camera=None, offset=1, weight=None):
    """Edge-aware consistency between the rendered normal and the normal of
    the local plane implied by neighboring depths.

    Four depths sampled up/down/left/right at ``offset`` pixels are
    back-projected along their pixel rays; the cross product of the two
    difference vectors gives the local-plane normal, compared to the
    renormalized blended normal under L1, weighted by
    (1 - normalized image gradient)^2 of the ground-truth image.
    """
    camera = camera or maps.cache["camera"]
    H, W = maps.depth.shape
    D = maps.depth
    V = maps.depth_valid
    rays = maps.cache.get("rays")
    if rays is None:
        rays = camera.ray_grid()
    if weight is None:
        weight = edge_weight(grayscale(gt_image))

    k = offset
    d_depth = np.zeros((H, W))
    d_normal = np.zeros((H, W, 3))

    mask = np.zeros((H, W), dtype=bool)
    mask[k:H - k, k:W - k] = True
    mask &= V
    for dy, dx in ((-k, 0), (k, 0), (0, -k), (0, k)):
        mask &= np.roll(np.roll(V, -dy, axis=0), -dx, axis=1)
    if not mask.any():
        return SingleViewResult(0.0, d_depth, d_normal, 0)

    pts = D[..., None] * rays
    P_up = np.roll(pts, k, axis=0)      # value from (y-k, x)
    P_dn = np.roll(pts, -k, axis=0)
    P_lf = np.roll(pts, k, axis=1)
    P_rt = np.roll(pts, -k, axis=1)
    e1 = P_dn - P_up                     # ~ +y tangent
    e2 = P_rt - P_lf                     # ~ +x tangent
    c = np.cross(e1, e2)                 # y cross x ~ -z: camera-facing
    cn = np.linalg.norm(c, axis=2)
    mask &= cn > 1e-12

    Nn = np.linalg.norm(maps.normal, axis=2)
    mask &= Nn > 1e-12
    if not mask.any():
        return SingleViewResult(0.0, d_depth, d_normal, 0)

    idx = np.nonzero(mask)
    n_d = c[idx] / cn[idx][:, None]
    n_hat = maps.normal[idx] / Nn[idx][:, None]
    diff = n_d - n_hat
    w = weight[idx]
    count = idx[0].size
    value = float(np.sum(w * np.sum(np.abs(diff), axis=1)) / count)

    sgn = np.sign(diff) * (w / count)[:, None]
    # renormalization jacobians are symmetric: (I - nn^T)/|raw|
    g_nhat = -sgn
    d_normal[idx] = (g_nhat - n_hat * np.einsum("pi,pi->p", g_nhat, n_hat)[:, None]) \
        / Nn[idx][:, None]
    g_c = (sgn - n_d * np.einsum("pi,pi->p", sgn, n_d)[:, None]) / cn[idx][:, None]
    g_e1 = np.cross(e2[idx], g_c)
    g_e2 = np.cross(g_c, e1[idx])

    yy, xx = idx
    for (sy, sx), g in (((-k, 0), -g_e1), ((k, 0), g_e1),
                        ((0, -k), -g_e2), ((0, k), g_e2)):
        py, px = yy + sy, xx + sx
        np.add.at(d_depth, (py, px), np.einsum("pi,pi->p", g, rays[py, px]))
    return SingleViewResult(value, d_depth, d_normal, count)


# -- multi-view geometric consistency -------------------------------------------

def _plane_ratio(maps):
    """Per-pixel n/d vector of the blended plane, with a usability mask.

    Only the ratio of the blended normal to the blended distance enters the
    plane-induced homography, so renormalizing the normal and rescaling the
    distance to match cancels out.
    """
    ok = maps.depth_valid & (np.abs(maps.distance) > _EPS_DIST)
    v = np.zeros_like(maps.normal)
    np.divide(maps.normal, maps.distance[..., None], out=v,
              where=ok[..., None])
    return v, ok


@dataclass
class MvGeomResult:
    value: float
    d_ref_normal: np.ndarray
    d_ref_dist: np.ndarray
    d_nbr_normal: np.ndarray
    d_nbr_dist: np.ndarray
    weight: np.ndarray    # detached occlusion weights, 0 where not contributing
    phi: np.ndarray       # forward-backward error, inf where not computed
    count: int


def multiview_geometric_loss(ref_maps, nbr_maps, ref_cam, nbr_cam, stride=1,
                             frozen_weight=None):
    """Forward-backward reprojection error through per-pixel plane homographies.

    phi is measured in reference pixels; the occlusion weight exp(-phi)
    (zero at phi >= 1) is detached.  The normalizer V counts pixels with
    positive weight.  Gradients reach both views' normal and distance maps.

    ``frozen_weight`` substitutes a precomputed weight map for the live
    exp(-phi) gate; finite-difference checks pass it so the differentiated
    function matches the detached-weight gradient this returns.
    """
    H, W = ref_maps.depth.shape
    Hn, Wn = nbr_maps.depth.shape
    out = MvGeomResult(0.0, np.zeros((H, W, 3)), np.zeros((H, W)),
                       np.zeros((Hn, Wn, 3)), np.zeros((Hn, Wn)),
                       np.zeros((H, W)), np.full((H, W), np.inf), 0)

    v_ref, ok_ref = _plane_ratio(ref_maps)
    v_nbr, ok_nbr = _plane_ratio(nbr_maps)
    grid = np.zeros((H, W), dtype=bool)
    grid[::stride, ::stride] = True
    sel = np.nonzero(grid & ok_ref)
    if sel[0].size == 0:
        return out

    rays = ref_maps.cache.get("rays")
    if rays is None:
        rays = ref_cam.ray_grid()
    y = rays[sel]                       # (P, 3)
    v = v_ref[sel]

    R_rn = nbr_cam.R_c.T @ ref_cam.R_c
    T_rn = nbr_cam.R_c.T @ (ref_cam.T_c - nbr_cam.T_c)
    A_rn = nbr_cam.K @ R_rn
    b_rn = nbr_cam.K @ T_rn
    R_nr = R_rn.T
    T_nr = -R_rn.T @ T_rn
    A_nr = ref_cam.K @ R_nr
    b_nr = ref_cam.K @ T_nr
    Kn_inv = np.linalg.inv(nbr_cam.K)

    # x on the plane satisfies v . x = 1 (v = N/dist), so the warp of the
    # homogeneous ray y is K_n (R_rn y + T_rn (v . y))
    U = y @ A_rn.T + np.einsum("pi,pi->p", v, y)[:, None] * b_rn
    keep = U[:, 2] > 1e-12
    pn = np.zeros((sel[0].size, 2))
    np.divide(U[:, :2], U[:, 2:3], out=pn, where=keep[:, None])
    keep &= ((pn[:, 0] >= 0) & (pn[:, 0] <= Wn - 1)
             & (pn[:, 1] >= 0) & (pn[:, 1] <= Hn - 1))
    q = np.rint(pn).astype(np.int64)
    q[:, 0] = np.clip(q[:, 0], 0, Wn - 1)
    q[:, 1] = np.clip(q[:, 1], 0, Hn - 1)
    keep &= ok_nbr[q[:, 1], q[:, 0]]
    if not keep.any():
        return out

    vn = v_nbr[q[:, 1], q[:, 0]]
    z = U @ Kn_inv.T
    B = z @ A_nr.T + np.einsum("pi,pi->p", vn, z)[:, None] * b_nr
    keep &= B[:, 2] > 1e-12
    if not keep.any():
        return out

    beta = np.zeros((sel[0].size, 2))
    np.divide(B[:, :2], B[:, 2:3], out=beta, where=keep[:, None])
    pr = np.stack([sel[1], sel[0]], axis=1).astype(np.float64)  # (u, v)
    delta = beta - pr
    phi = np.linalg.norm(delta, axis=1)
    if frozen_weight is None:
        w = np.where((phi < 1.0) & keep, np.exp(-phi), 0.0)
    else:
        w = np.where(keep, frozen_weight[sel], 0.0)
    contrib = w > 0
    Vcount = int(np.count_nonzero(contrib))
    out.phi[sel] = np.where(keep, phi, np.inf)
    out.weight[sel] = w
    if Vcount == 0:
        return out

    value = float(np.sum(w * phi) / Vcount)

    g_phi = np.where(contrib & (phi > 1e-15), w / Vcount, 0.0)
    g_beta = g_phi[:, None] * np.divide(delta, phi[:, None],
                                        out=np.zeros_like(delta),
                                        where=phi[:, None] > 1e-15)
    Bz = np.where(keep, B[:, 2], 1.0)
    gB = np.zeros((sel[0].size, 3))
    gB[:, 0] = g_beta[:, 0] / Bz
    gB[:, 1] = g_beta[:, 1] / Bz
    gB[:, 2] = -(g_beta[:, 0] * B[:, 0] + g_beta[:, 1] * B[:, 1]) / Bz**2

    g_vn = (gB @ b_nr)[:, None] * z
    Hnr_eff = (A_nr[None] + b_nr[None, :, None] * vn[:, None, :]) @ Kn_inv
    gU = np.einsum("pji,pj->pi", Hnr_eff, gB)
    g_v = (gU @ b_rn)[:, None] * y

    # plane-ratio chain: v = N / dist
    dist_r = ref_maps.distance[sel]
    out.d_ref_normal[sel] = g_v / dist_r[:, None]
    out.d_ref_dist[sel] = -np.einsum("pi,pi->p", g_v, v) / dist_r

    # rows outside `keep` carry zero gradient but garbage lookups; keep the
    # division well defined there
    dist_n = np.where(keep, nbr_maps.distance[q[:, 1], q[:, 0]], 1.0)
    gn_n = g_vn / dist_n[:, None]
    gd_n = -np.einsum("pi,pi->p", g_vn, vn) / dist_n
    np.add.at(out.d_nbr_normal, (q[:, 1], q[:, 0]), gn_n)
    np.add.at(out.d_nbr_dist, (q[:, 1], q[:, 0]), gd_n)

    out.value = value
    out.count = Vcount
    return out


# -- multi-view NCC photometric consistency --------------------------------------

def ncc(a, b):
    """Normalized cross correlation of two equally shaped patches; 0 when
    either patch has (near-)zero variance."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    u = a - a.mean()
    w = b - b.mean()
    suu = u @ u
    sww = w @ w
    if suu < _EPS_VAR or sww < _EPS_VAR:
        return 0.0
    return float((u @ w) / np.sqrt(suu * sww))


@dataclass
class MvPhotoResult:
    value: float
    d_ref_normal: np.ndarray
    d_ref_dist: np.ndarray
    count: int


def _bilinear(img, u, v):
    """Sample with corner data for the gradient. u, v arrays of equal shape."""
    Himg, Wimg = img.shape
    x0 = np.clip(np.floor(u).astype(np.int64), 0, Wimg - 2)
    y0 = np.clip(np.floor(v).astype(np.int64), 0, Himg - 2)
    fu = u - x0
    fv = v - y0
    i00 = img[y0, x0]
    i01 = img[y0, x0 + 1]
    i10 = img[y0 + 1, x0]
    i11 = img[y0 + 1, x0 + 1]
    val = (i00 * (1 - fu) * (1 - fv) + i01 * fu * (1 - fv)
           + i10 * (1 - fu) * fv + i11 * fu * fv)
    dval_du = (1 - fv) * (i01 - i00) + fv * (i11 - i10)
    dval_dv = (1 - fu) * (i10 - i00) + fu * (i11 - i01)
    return val, dval_du, dval_dv


def multiview_photometric_loss(ref_gray, nbr_gray, ref_maps, ref_cam, nbr_cam,
                               weight=None, stride=1, patch=7):
    """NCC dissimilarity of plane-warped grayscale patches.

    Each contributing reference pixel warps its patch into the neighbor
    image through its own plane homography (bilinear sampling) and pays
    w * (1 - NCC).  ``weight`` is the detached occlusion map from the
    geometric pass; gradients flow only into the reference view's plane
    parameters.  Pixels whose patch leaves either image are skipped;
    zero-variance patches contribute w * 1.
    """
    ref_gray = np.asarray(ref_gray, dtype=np.float64)
    nbr_gray = np.asarray(nbr_gray, dtype=np.float64)
    H, W = ref_maps.depth.shape
    Hn, Wn = nbr_gray.shape
    out = MvPhotoResult(0.0, np.zeros((H, W, 3)), np.zeros((H, W)), 0)

    v_ref, ok_ref = _plane_ratio(ref_maps)
    m = patch // 2
    grid = np.zeros((H, W), dtype=bool)
    grid[::stride, ::stride] = True
    grid[:m, :] = grid[H - m:, :] = False
    grid[:, :m] = grid[:, W - m:] = False
    use = grid & ok_ref
    if weight is not None:
        use &= weight > 0
    sel = np.nonzero(use)
    P = sel[0].size
    if P == 0:
        return out
    wsel = np.ones(P) if weight is None else weight[sel]

    v = v_ref[sel]
    du, dv = np.meshgrid(np.arange(-m, m + 1), np.arange(-m, m + 1))
    du = du.ravel()
    dv = dv.ravel()
    npx = du.size

    uu = sel[1][:, None] + du[None, :]
    vv = sel[0][:, None] + dv[None, :]
    a_patch = ref_gray[vv, uu]                               # (P, npx)

    Kinv = np.linalg.inv(ref_cam.K)
    y = np.empty((P, npx, 3))
    y[..., 0] = Kinv[0, 0] * uu + Kinv[0, 1] * vv + Kinv[0, 2]
    y[..., 1] = Kinv[1, 1] * vv + Kinv[1, 2]
    y[..., 2] = 1.0

    R_rn = nbr_cam.R_c.T @ ref_cam.R_c
    T_rn = nbr_cam.R_c.T @ (ref_cam.T_c - nbr_cam.T_c)
    A_rn = nbr_cam.K @ R_rn
    b_rn = nbr_cam.K @ T_rn

    U = y @ A_rn.T + np.einsum("pki,pi->pk", y, v)[..., None] * b_rn
    keep = np.all(U[..., 2] > 1e-12, axis=1)
    Uz = np.where(U[..., 2] > 1e-12, U[..., 2], 1.0)
    pu = U[..., 0] / Uz
    pv = U[..., 1] / Uz
    keep &= np.all((pu >= 0) & (pu <= Wn - 1) & (pv >= 0) & (pv <= Hn - 1), axis=1)
    if not keep.any():
        return out

    b_patch, db_du, db_dv = _bilinear(nbr_gray, pu, pv)

    u_c = a_patch - a_patch.mean(axis=1, keepdims=True)
    w_c = b_patch - b_patch.mean(axis=1, keepdims=True)
    suu = np.einsum("pk,pk->p", u_c, u_c)
    sww = np.einsum("pk,pk->p", w_c, w_c)
    suw = np.einsum("pk,pk->p", u_c, w_c)
    textured = (suu > _EPS_VAR) & (sww > _EPS_VAR)
    denom = np.sqrt(np.where(textured, suu * sww, 1.0))
    nccs = np.where(textured, suw / denom, 0.0)
    nccs = np.where(keep, nccs, 0.0)

    contrib = keep
    Vcount = int(np.count_nonzero(contrib))
    if Vcount == 0:
        return out
    value = float(np.sum(wsel[contrib] * (1.0 - nccs[contrib])) / Vcount)

    g_ncc = np.where(contrib & textured, -wsel / Vcount, 0.0)
    g_w = (g_ncc / denom)[:, None] * u_c \
        - (g_ncc * nccs / np.where(textured, sww, 1.0))[:, None] * w_c
    g_b = g_w - g_w.mean(axis=1, keepdims=True)

    g_pu = g_b * db_du
    g_pv = g_b * db_dv
    gU = np.empty_like(U)
    gU[..., 0] = g_pu / Uz
    gU[..., 1] = g_pv / Uz
    gU[..., 2] = -(g_pu * U[..., 0] + g_pv * U[..., 1]) / Uz**2
    s_off = gU @ b_rn                                      # (P, npx)
    g_v = np.einsum("pk,pki->pi", s_off, y)

    dist_r = ref_maps.distance[sel]
    out.d_ref_normal[sel] = g_v / dist_r[:, None]
    out.d_ref_dist[sel] = -np.einsum("pi,pi->p", g_v, v) / dist_r
    out.value = value
    out.count = Vcount
    return out


def total_loss(rgb, flatten, sv_geom, mv_rgb, mv_geom, weights):
    """L = L_rgb + w_flatten * L_s + w2 L_sv + w3 L_mvrgb + w4 L_mvgeom."""
    return (rgb + weights.flatten * flatten + weights.sv_geom * sv_geom
            + weights.mv_rgb * mv_rgb + weights.mv_geom * mv_geom)
