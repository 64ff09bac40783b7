"""Why ray-plane depth beats z-blending.

Renders a single flattened Gaussian lying on the plane z = 5 and compares
the two depth definitions across opacities.  The blended-distance /
blended-normal quotient cancels the accumulation weight exactly, so its
depth never moves; the legacy z-blend scales with opacity and lands in
front of the surface.
"""

import os

import numpy as np

from planesplat import Camera, GaussianCloud
from planesplat.gaussians import logit
from planesplat.rasterizer import RasterConfig, render
from planesplat.scenes import write_float_map, write_image

OUT = os.path.join(os.path.dirname(__file__), "out")
os.makedirs(OUT, exist_ok=True)

cam = Camera(K=np.array([[100.0, 0, 31.5], [0, 100.0, 31.5], [0, 0, 1]]),
             R_c=np.eye(3), T_c=np.zeros(3), width=64, height=64)

disk = GaussianCloud(
    positions=[[0.0, 0.0, 5.0]],
    rotations=[[1.0, 0.0, 0.0, 0.0]],
    log_scales=[list(np.log([5.0, 5.0, 1e-5]))],  # flattened: tiny third axis
    opacity_logits=[logit(0.5)],
    colors=[[0.3, 0.6, 0.9]],
)

cfg = RasterConfig(alpha_min=0.05)
print("opacity   ray-plane depth (center)   z-blend depth (center)")
for opacity in (0.1, 0.5, 0.99):
    disk.opacity_logits[:] = logit(opacity)
    maps = render(disk, cam, cfg)
    c = 31, 31
    print(f"  {opacity:4.2f}        {maps.depth[c]:.9f}              "
          f"{maps.depth_zblend[c]:.4f}")

maps = render(disk, cam, cfg)
write_image(os.path.join(OUT, "disk_color.png"), maps.color)
write_float_map(os.path.join(OUT, "disk_depth.fmp"), maps.depth)
print(f"\nThe ray-plane column is pinned at 5.0 regardless of opacity;")
print(f"maps written to {OUT}/disk_color.png and disk_depth.fmp")
