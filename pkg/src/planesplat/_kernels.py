"""Numba kernels for the tile rasterizer's per-pixel blending loops.

Everything else (projection, covariance chain rules, map assembly) stays
in vectorized numpy; only the inherently sequential front-to-back alpha
compositing and its reverse pass live here.  Kernels are single-threaded
so results are bit-reproducible.
"""

import math

import numpy as np
from numba import njit

# Contributions with alpha below this are dropped; in f64 they are lost to
# rounding anyway and skipping keeps backward stacks short.
ALPHA_SKIP = 1e-12


@njit(cache=True)
def forward_blend(tile_offsets, tile_ids, means2d, conics, opac,
                  colors, normals, dists, zs,
                  width, height, tile, t_stop, alpha_max,
                  out_color, out_normal, out_dist, out_z, out_alpha):
    n_tx = (width + tile - 1) // tile
    n_tiles = tile_offsets.shape[0] - 1
    for t in range(n_tiles):
        ty = t // n_tx
        tx = t - ty * n_tx
        x0 = tx * tile
        y0 = ty * tile
        x1 = min(x0 + tile, width)
        y1 = min(y0 + tile, height)
        lo = tile_offsets[t]
        hi = tile_offsets[t + 1]
        if hi == lo:
            continue
        for py in range(y0, y1):
            for px in range(x0, x1):
                T = 1.0
                c0 = 0.0; c1 = 0.0; c2 = 0.0
                n0 = 0.0; n1 = 0.0; n2 = 0.0
                dd = 0.0
                zz = 0.0
                for k in range(lo, hi):
                    if T < t_stop:
                        break
                    g = tile_ids[k]
                    dx = px - means2d[g, 0]
                    dy = py - means2d[g, 1]
                    power = (-0.5 * (conics[g, 0] * dx * dx + conics[g, 2] * dy * dy)
                             - conics[g, 1] * dx * dy)
                    if power > 0.0:
                        continue
                    a = opac[g] * math.exp(power)
                    if a > alpha_max:
                        a = alpha_max
                    if a < ALPHA_SKIP:
                        continue
                    w = a * T
                    c0 += w * colors[g, 0]
                    c1 += w * colors[g, 1]
                    c2 += w * colors[g, 2]
                    n0 += w * normals[g, 0]
                    n1 += w * normals[g, 1]
                    n2 += w * normals[g, 2]
                    dd += w * dists[g]
                    zz += w * zs[g]
                    T *= 1.0 - a
                out_color[py, px, 0] = c0
                out_color[py, px, 1] = c1
                out_color[py, px, 2] = c2
                out_normal[py, px, 0] = n0
                out_normal[py, px, 1] = n1
                out_normal[py, px, 2] = n2
                out_dist[py, px] = dd
                out_z[py, px] = zz
                out_alpha[py, px] = 1.0 - T


@njit(cache=True)
def backward_blend(tile_offsets, tile_ids, means2d, conics, opac,
                   colors, normals, dists, zs,
                   width, height, tile, t_stop, alpha_max,
                   g_color, g_normal, g_dist, g_z, g_alpha,
                   d_mean2d, d_conic, d_opac, d_color, d_normal, d_dist, d_z,
                   densify_abs):
    """Reverse pass of forward_blend.

    Upstream per-pixel gradients (g_*) are turned into per-Gaussian
    gradients with respect to the 2D mean, the packed conic (A, B, C),
    the effective opacity, and the blended attributes.  densify_abs
    accumulates the per-pixel L2 norm of the 2D mean gradient
    (absolute accumulation, not the norm of the sum).
    """
    n_tx = (width + tile - 1) // tile
    n_tiles = tile_offsets.shape[0] - 1
    for t in range(n_tiles):
        ty = t // n_tx
        tx = t - ty * n_tx
        x0 = tx * tile
        y0 = ty * tile
        x1 = min(x0 + tile, width)
        y1 = min(y0 + tile, height)
        lo = tile_offsets[t]
        hi = tile_offsets[t + 1]
        if hi == lo:
            continue
        cap = hi - lo
        st_g = np.empty(cap, dtype=np.int64)
        st_a = np.empty(cap, dtype=np.float64)
        st_w = np.empty(cap, dtype=np.float64)
        st_G = np.empty(cap, dtype=np.float64)
        for py in range(y0, y1):
            for px in range(x0, x1):
                # replay forward to collect the active contributor stack
                T = 1.0
                m = 0
                for k in range(lo, hi):
                    if T < t_stop:
                        break
                    g = tile_ids[k]
                    dx = px - means2d[g, 0]
                    dy = py - means2d[g, 1]
                    power = (-0.5 * (conics[g, 0] * dx * dx + conics[g, 2] * dy * dy)
                             - conics[g, 1] * dx * dy)
                    if power > 0.0:
                        continue
                    G = math.exp(power)
                    a = opac[g] * G
                    if a > alpha_max:
                        a = alpha_max
                    if a < ALPHA_SKIP:
                        continue
                    st_g[m] = g
                    st_a[m] = a
                    st_w[m] = a * T
                    st_G[m] = G
                    m += 1
                    T *= 1.0 - a
                if m == 0:
                    continue
                gc0 = g_color[py, px, 0]
                gc1 = g_color[py, px, 1]
                gc2 = g_color[py, px, 2]
                gn0 = g_normal[py, px, 0]
                gn1 = g_normal[py, px, 1]
                gn2 = g_normal[py, px, 2]
                gd = g_dist[py, px]
                gz = g_z[py, px]
                ga = g_alpha[py, px]
                if (gc0 == 0.0 and gc1 == 0.0 and gc2 == 0.0 and gn0 == 0.0
                        and gn1 == 0.0 and gn2 == 0.0 and gd == 0.0
                        and gz == 0.0 and ga == 0.0):
                    continue
                sC0 = 0.0; sC1 = 0.0; sC2 = 0.0
                sN0 = 0.0; sN1 = 0.0; sN2 = 0.0
                sD = 0.0
                sZ = 0.0
                sA = 0.0
                for j in range(m - 1, -1, -1):
                    g = st_g[j]
                    a = st_a[j]
                    w = st_w[j]
                    G = st_G[j]
                    Ti = w / a
                    d_color[g, 0] += w * gc0
                    d_color[g, 1] += w * gc1
                    d_color[g, 2] += w * gc2
                    d_normal[g, 0] += w * gn0
                    d_normal[g, 1] += w * gn1
                    d_normal[g, 2] += w * gn2
                    d_dist[g] += w * gd
                    d_z[g] += w * gz
                    one_m = 1.0 - a
                    dLda = (gc0 * (Ti * colors[g, 0] - sC0 / one_m)
                            + gc1 * (Ti * colors[g, 1] - sC1 / one_m)
                            + gc2 * (Ti * colors[g, 2] - sC2 / one_m)
                            + gn0 * (Ti * normals[g, 0] - sN0 / one_m)
                            + gn1 * (Ti * normals[g, 1] - sN1 / one_m)
                            + gn2 * (Ti * normals[g, 2] - sN2 / one_m)
                            + gd * (Ti * dists[g] - sD / one_m)
                            + gz * (Ti * zs[g] - sZ / one_m)
                            + ga * (Ti - sA / one_m))
                    sC0 += w * colors[g, 0]
                    sC1 += w * colors[g, 1]
                    sC2 += w * colors[g, 2]
                    sN0 += w * normals[g, 0]
                    sN1 += w * normals[g, 1]
                    sN2 += w * normals[g, 2]
                    sD += w * dists[g]
                    sZ += w * zs[g]
                    sA += w
                    if opac[g] * G >= alpha_max:
                        continue  # alpha clamp active: no gradient into opacity/shape
                    d_opac[g] += dLda * G
                    dp = dLda * opac[g] * G  # dL/d power
                    dx = px - means2d[g, 0]
                    dy = py - means2d[g, 1]
                    gmx = dp * (conics[g, 0] * dx + conics[g, 1] * dy)
                    gmy = dp * (conics[g, 1] * dx + conics[g, 2] * dy)
                    d_mean2d[g, 0] += gmx
                    d_mean2d[g, 1] += gmy
                    densify_abs[g] += math.sqrt(gmx * gmx + gmy * gmy)
                    d_conic[g, 0] += dp * (-0.5 * dx * dx)
                    d_conic[g, 1] += dp * (-dx * dy)
                    d_conic[g, 2] += dp * (-0.5 * dy * dy)
