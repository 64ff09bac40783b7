"""Finite-difference verification of every analytic gradient path.

Builds a small random two-view scene, evaluates the full training
objective (render + image/flatten/single-view/multi-view losses with
exposure enabled), and compares the assembled analytic gradients against
central finite differences parameter by parameter.
"""

from dataclasses import replace

import numpy as np

from . import rasterizer as render_mod
from .gaussians import GaussianCloud
from .geometry import Camera
from .losses import ExposureParams, LossWeights
from .rasterizer import RasterConfig
from .trainer import TrainConfig, evaluate_objective

PARAM_CLASSES = ("position", "rotation", "scale", "opacity", "color",
                 "sh", "exposure_a", "exposure_b")


def make_random_scene(seed=0, size=16, n_gaussians=5, with_sh=True):
    """Two nearby views of a few random Gaussians, with a smooth non-trivial
    ground-truth image derived from a perturbed render (keeps SSIM high so
    the exposure branch is active, and keeps L1 away from its kink)."""
    rng = np.random.default_rng(seed)
    f = 2.5 * size
    K = np.array([[f, 0, (size - 1) / 2], [0, f, (size - 1) / 2], [0, 0, 1.0]])
    cams = [
        Camera(K=K, R_c=np.eye(3), T_c=np.zeros(3), width=size, height=size,
               image_id=0),
        Camera(K=K, R_c=np.eye(3), T_c=np.array([0.08, 0.02, 0.0]),
               width=size, height=size, image_id=1),
    ]
    n = n_gaussians
    cloud = GaussianCloud(
        positions=np.column_stack([rng.uniform(-0.35, 0.35, n),
                                   rng.uniform(-0.35, 0.35, n),
                                   rng.uniform(3.0, 6.0, n)]),
        rotations=rng.normal(size=(n, 4)),
        log_scales=rng.uniform(np.log(0.08), np.log(0.5), (n, 3)),
        opacity_logits=rng.uniform(0.2, 1.5, n),
        colors=rng.uniform(0.25, 0.75, (n, 3)),
        sh1=rng.normal(scale=0.03, size=(n, 3, 3)) if with_sh else None,
    )
    cfg = TrainConfig(iterations=1, use_exposure=True, mv_stride=1,
                      raster=RasterConfig(alpha_min=0.2),
                      weights=LossWeights())
    maps = [render_mod.render(cloud, c, cfg.raster) for c in cams]
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    ripple = 0.03 * np.sin(0.7 * xx + 0.4 * yy)[..., None]
    images = [np.clip(m.color + 0.02 + ripple, 0.0, 1.0) for m in maps]
    gray = [img @ np.array([0.299, 0.587, 0.114]) for img in images]
    exposure = ExposureParams.zeros(2)
    exposure.a[:] = [0.08, -0.05]
    exposure.b[:] = [0.01, -0.01]
    from .losses import edge_weight
    edge_weights = [edge_weight(g) for g in gray]
    return cloud, cams, images, gray, edge_weights, exposure, cfg


def run_gradcheck(seed=0, size=16, n_gaussians=5, h=1e-6, tol=1e-3,
                  backward_fn=None, rel_floor=1e-5):
    """Compare analytic and finite-difference gradients class by class.

    Returns {class: {"max_rel_err", "passed"}}.  ``backward_fn`` replaces
    the rasterizer backward (used by the harness's own meta-test to verify
    that an injected bug is detected).
    """
    cloud, cams, images, gray, ew, exposure, cfg = make_random_scene(
        seed, size, n_gaussians)

    if backward_fn is not None:
        orig = render_mod.backward
        render_mod.backward = backward_fn

    try:
        # the occlusion weight is detached by design, so both the analytic
        # gradient and the differentiated objective pin it at the base point
        parts0, _, _ = evaluate_objective(
            cloud, cams, images, gray, ew, exposure, 0, 1, cfg,
            mv_active=True, with_grads=False)
        base_weight = parts0["mv_weight"]

        def objective():
            parts, _, _ = evaluate_objective(
                cloud, cams, images, gray, ew, exposure, 0, 1, cfg,
                mv_active=True, with_grads=False, mv_frozen_weight=base_weight)
            return parts["total"]

        _, grads, (da, db) = evaluate_objective(
            cloud, cams, images, gray, ew, exposure, 0, 1, cfg, mv_active=True,
            mv_frozen_weight=base_weight)
    finally:
        if backward_fn is not None:
            render_mod.backward = orig

    analytic = {
        "position": grads.positions, "rotation": grads.rotations,
        "scale": grads.log_scales, "opacity": grads.opacity_logits,
        "color": grads.colors, "sh": grads.sh1,
        "exposure_a": np.array([da]), "exposure_b": np.array([db]),
    }
    arrays = {
        "position": cloud.positions, "rotation": cloud.rotations,
        "scale": cloud.log_scales, "opacity": cloud.opacity_logits,
        "color": cloud.colors, "sh": cloud.sh1,
        "exposure_a": exposure.a[0:1], "exposure_b": exposure.b[0:1],
    }

    report = {}
    for name in PARAM_CLASSES:
        arr = arrays[name]
        if arr is None:
            continue
        num = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            ix = it.multi_index
            old = arr[ix]
            arr[ix] = old + h
            f1 = objective()
            arr[ix] = old - h
            f0 = objective()
            arr[ix] = old
            num[ix] = (f1 - f0) / (2 * h)
        ana = analytic[name]
        scale = np.maximum(np.maximum(np.abs(num), np.abs(ana)), rel_floor)
        rel = np.abs(num - ana) / scale
        report[name] = {"max_rel_err": float(rel.max()), "passed": bool(rel.max() < tol)}
    return report
