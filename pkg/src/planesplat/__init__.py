"""planesplat: CPU planar Gaussian splatting surface reconstruction.

Differentiable rendering of color/normal/distance/depth maps from
flattened 3D Gaussians, training under single-view and multi-view
geometric regularization with exposure compensation, and mesh extraction
by depth filtering + TSDF fusion.
"""

from .geometry import (Camera, Homography, ViewGraph, world_to_camera,
                       pixel_ray, compute_homography, build_view_graph,
                       sample_neighbor)
from .gaussians import (GaussianCloud, covariance, gaussian_normal,
                        plane_distance, flatten_loss, save_ply, load_ply)
from .rasterizer import (RenderMaps, ParamGradients, MapGradients, RasterConfig,
                     render, backward, project_gaussian)

__all__ = [
    "Camera", "Homography", "ViewGraph", "world_to_camera", "pixel_ray",
    "compute_homography", "build_view_graph", "sample_neighbor",
    "GaussianCloud", "covariance", "gaussian_normal", "plane_distance",
    "flatten_loss", "save_ply", "load_ply",
    "RenderMaps", "ParamGradients", "MapGradients", "RasterConfig",
    "render", "backward", "project_gaussian",
]

__version__ = "0.1.0"
