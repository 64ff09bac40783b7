"""Optimization loop: view sampling, loss assembly, adaptive moment updates,
densification/pruning, checkpoints, and the loss-curve record.

One step renders a reference view (and, once multi-view terms activate, a
randomly drawn neighbor), assembles the total objective, backpropagates
through the rasterizer, and applies per-class Adam updates.  All
randomness flows through one seeded generator, so runs are reproducible
bit for bit.
"""

import csv
import os
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

from . import losses, rasterizer
from .gaussians import GaussianCloud, flatten_loss, logit, save_ply
from .geometry import build_view_graph, sample_neighbor
from .losses import ExposureParams, LossWeights
from .rasterizer import MapGradients, ParamGradients, RasterConfig


@dataclass
class TrainConfig:
    iterations: int = 3000
    lr_position: float = 1.6e-4      # scaled by scene extent, exponentially decayed
    lr_position_final: float = 0.01  # decay factor reached at the last iteration
    lr_rotation: float = 1e-3
    lr_scale: float = 5e-3
    lr_opacity: float = 5e-2
    lr_color: float = 2.5e-3
    lr_sh: float = 1.25e-4
    lr_exposure: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-15
    densify_interval: int = 100
    densify_grad_threshold: float = 4e-4
    densify_until_frac: float = 0.6
    split_scale_frac: float = 0.01   # of scene extent; larger Gaussians split
    prune_opacity: float = 0.005
    mv_start_frac: float = 0.3       # iteration fraction at which mv terms activate
    mv_stride: int = 1
    sv_offset: int = 1
    use_exposure: bool = False
    background: tuple = (0.4, 0.4, 0.4)  # matches make_synthetic's backdrop
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    raster: RasterConfig = field(default_factory=RasterConfig)
    graph_max_neighbors: int = 8
    graph_max_angle_deg: float = 30.0
    graph_min_dist: float = 0.01
    graph_max_dist: float = 1.5
    checkpoint_interval: int = 0     # 0 disables periodic checkpoints
    preview_interval: int = 500

    def __post_init__(self):
        for name in ("lr_position", "lr_rotation", "lr_scale", "lr_opacity",
                     "lr_color", "lr_sh", "lr_exposure"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("mv_start_frac", "densify_until_frac"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")


def scene_extent(cameras, points=None):
    """Diagonal of the bounding box of camera centers and sparse points."""
    pts = [c.T_c for c in cameras]
    if points is not None and len(points):
        pts.append(np.asarray(points).reshape(-1, 3))
    allp = np.vstack([np.atleast_2d(p) for p in pts])
    return float(np.linalg.norm(allp.max(axis=0) - allp.min(axis=0)))


def init_from_points(points, colors, cameras):
    """One Gaussian per point; scale from mean distance to 3 nearest neighbors."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if len(points) < 1:
        raise ValueError("need at least one point")
    extent = scene_extent(cameras, points)
    if len(points) >= 4:
        d, _ = cKDTree(points).query(points, k=4)
        mean_d = d[:, 1:].mean(axis=1)
        mean_d = np.maximum(mean_d, 1e-7)
    else:
        mean_d = np.full(len(points), extent / 100.0)
    n = len(points)
    colors = (np.full((n, 3), 0.5) if colors is None
              else np.clip(np.atleast_2d(colors), 0.0, 1.0))
    rot = np.zeros((n, 4))
    rot[:, 0] = 1.0
    return GaussianCloud(
        positions=points,
        rotations=rot,
        log_scales=np.log(mean_d)[:, None].repeat(3, axis=1),
        opacity_logits=np.full(n, logit(0.1)),
        colors=colors,
    )


_PARAM_LR = {
    "positions": "lr_position", "rotations": "lr_rotation",
    "log_scales": "lr_scale", "opacity_logits": "lr_opacity",
    "colors": "lr_color", "sh1": "lr_sh",
}


@dataclass
class TrainerState:
    cloud: GaussianCloud
    cameras: list
    images: list
    graph: object
    exposure: ExposureParams
    rng: np.random.Generator
    extent: float
    gray: list = None
    edge_weights: list = None
    adam_m: dict = field(default_factory=dict)
    adam_v: dict = field(default_factory=dict)
    adam_t: dict = field(default_factory=dict)
    densify_abs: np.ndarray = None
    densify_cnt: np.ndarray = None
    densify_dir: np.ndarray = None
    epoch_order: np.ndarray = None
    epoch_pos: int = 0
    history: list = field(default_factory=list)

    def _ensure_adam(self, name, shape):
        if name not in self.adam_m:
            self.adam_m[name] = np.zeros(shape)
            self.adam_v[name] = np.zeros(shape)
            self.adam_t[name] = 0


def init_state(scene, config, cloud=None):
    """Build the optimization state from a SceneBundle (or explicit cloud)."""
    cameras, images = scene.cameras, scene.images
    if cloud is None:
        if scene.sparse_points is None:
            raise ValueError("scene has no sparse points to initialize from")
        cloud = init_from_points(scene.sparse_points, scene.sparse_colors, cameras)
    graph = build_view_graph(cameras, config.graph_max_neighbors,
                             config.graph_max_angle_deg, config.graph_min_dist,
                             config.graph_max_dist)
    gray = [losses.grayscale(img) for img in images]
    state = TrainerState(
        cloud=cloud, cameras=cameras, images=images, graph=graph,
        exposure=ExposureParams.zeros(len(images)),
        rng=np.random.default_rng(config.seed),
        extent=scene_extent(cameras, scene.sparse_points),
        gray=gray,
        edge_weights=[losses.edge_weight(g) for g in gray],
    )
    n = len(cloud)
    state.densify_abs = np.zeros(n)
    state.densify_cnt = np.zeros(n)
    state.densify_dir = np.zeros((n, 3))
    return state


def evaluate_objective(cloud, cameras, images, gray, edge_weights, exposure,
                       ref, nbr, config, mv_active, with_grads=True,
                       mv_frozen_weight=None):
    """Total loss for one (reference, neighbor) pair plus parameter gradients.

    This single assembly is shared by the training step and the gradient
    checker, so what gets checked is what gets trained.  Returns
    (parts dict, ParamGradients or None, exposure_grads (da, db)).
    ``mv_frozen_weight`` pins the detached occlusion weights (used by
    finite-difference verification).
    """
    w = config.weights
    bg = np.asarray(config.background, dtype=np.float64)
    maps_r = rasterizer.render(cloud, cameras[ref], config.raster)
    rendered = maps_r.color + (1.0 - maps_r.alpha)[..., None] * bg

    img_res = losses.image_loss(rendered, images[ref],
                                a=exposure.a[ref], b=exposure.b[ref],
                                lam=w.lam, use_exposure=config.use_exposure)
    flat_val, flat_grad = flatten_loss(cloud)
    sv = losses.single_view_loss(maps_r, images[ref], camera=cameras[ref],
                                 offset=config.sv_offset,
                                 weight=edge_weights[ref])

    mv_geom_val = 0.0
    mv_rgb_val = 0.0
    maps_n = None
    geo = pho = None
    if mv_active and nbr is not None:
        maps_n = rasterizer.render(cloud, cameras[nbr], config.raster)
        geo = losses.multiview_geometric_loss(maps_r, maps_n, cameras[ref],
                                              cameras[nbr], stride=config.mv_stride,
                                              frozen_weight=mv_frozen_weight)
        pho = losses.multiview_photometric_loss(gray[ref], gray[nbr], maps_r,
                                                cameras[ref], cameras[nbr],
                                                weight=geo.weight,
                                                stride=config.mv_stride)
        mv_geom_val = geo.value
        mv_rgb_val = pho.value

    total = losses.total_loss(img_res.value, flat_val, sv.value,
                              mv_rgb_val, mv_geom_val, w)
    parts = {
        "total": total, "rgb": img_res.value, "flatten": flat_val,
        "sv_geom": sv.value, "mv_rgb": mv_rgb_val, "mv_geom": mv_geom_val,
        "ssim": img_res.ssim_value, "used_exposure": img_res.used_exposure,
        "mv_weight": None if geo is None else geo.weight,
    }
    if not with_grads:
        return parts, None, (0.0, 0.0)

    g_color = img_res.d_rendered
    g_alpha = -(img_res.d_rendered @ bg) if np.any(bg) else None
    g_normal = w.sv_geom * sv.d_normal
    g_depth = w.sv_geom * sv.d_depth
    g_dist = None
    if geo is not None:
        g_normal = g_normal + w.mv_geom * geo.d_ref_normal + w.mv_rgb * pho.d_ref_normal
        g_dist = w.mv_geom * geo.d_ref_dist + w.mv_rgb * pho.d_ref_dist
    grads = rasterizer.backward(cloud, cameras[ref], maps_r,
                            MapGradients(color=g_color, normal=g_normal,
                                         distance=g_dist, depth=g_depth,
                                         alpha=g_alpha),
                            config.raster)
    if geo is not None:
        g_nbr = rasterizer.backward(cloud, cameras[nbr], maps_n,
                                MapGradients(normal=w.mv_geom * geo.d_nbr_normal,
                                             distance=w.mv_geom * geo.d_nbr_dist),
                                config.raster)
        grads.add_(g_nbr)
    grads.log_scales += w.flatten * flat_grad
    return parts, grads, (img_res.da, img_res.db)


def _adam_step(state, name, value, grad, lr, config):
    state._ensure_adam(name, value.shape)
    state.adam_t[name] += 1
    t = state.adam_t[name]
    m = state.adam_m[name]
    v = state.adam_v[name]
    m *= config.beta1
    m += (1 - config.beta1) * grad
    v *= config.beta2
    v += (1 - config.beta2) * grad**2
    mhat = m / (1 - config.beta1**t)
    vhat = v / (1 - config.beta2**t)
    value -= lr * mhat / (np.sqrt(vhat) + config.adam_eps)


def _adam_step_sparse(state, name, value, grad_scalar, idx, lr, config):
    """Adam on a single entry of a per-image parameter vector.

    Each image carries its own moments and timestep; entries not visited
    this iteration are untouched (no momentum coasting between visits).
    """
    if name not in state.adam_m:
        state.adam_m[name] = np.zeros_like(value)
        state.adam_v[name] = np.zeros_like(value)
        state.adam_t[name] = np.zeros(len(value), dtype=np.int64)
    state.adam_t[name][idx] += 1
    t = state.adam_t[name][idx]
    m = config.beta1 * state.adam_m[name][idx] + (1 - config.beta1) * grad_scalar
    v = config.beta2 * state.adam_v[name][idx] + (1 - config.beta2) * grad_scalar**2
    state.adam_m[name][idx] = m
    state.adam_v[name][idx] = v
    mhat = m / (1 - config.beta1**t)
    vhat = v / (1 - config.beta2**t)
    value[idx] -= lr * mhat / (np.sqrt(vhat) + config.adam_eps)


def position_lr(config, extent, iteration):
    """Exponential interpolation from lr_position to lr_position * final factor."""
    frac = min(iteration / max(config.iterations, 1), 1.0)
    return config.lr_position * extent * config.lr_position_final ** frac


def train_step(state, config, iteration):
    """One optimization step; returns the loss record for this iteration."""
    n_views = len(state.cameras)
    if state.epoch_order is None or state.epoch_pos >= n_views:
        state.epoch_order = state.rng.permutation(n_views)
        state.epoch_pos = 0
    ref = int(state.epoch_order[state.epoch_pos])
    state.epoch_pos += 1

    mv_active = iteration >= config.mv_start_frac * config.iterations
    nbr = None
    if mv_active:
        nid = sample_neighbor(state.graph, state.cameras[ref].image_id, state.rng)
        if nid is not None:
            nbr = next(i for i, c in enumerate(state.cameras) if c.image_id == nid)
        else:
            mv_active = False

    parts, grads, (da, db) = evaluate_objective(
        state.cloud, state.cameras, state.images, state.gray,
        state.edge_weights, state.exposure, ref, nbr, config, mv_active)

    cloud = state.cloud
    lr_pos = position_lr(config, state.extent, iteration)
    _adam_step(state, "positions", cloud.positions, grads.positions, lr_pos, config)
    _adam_step(state, "rotations", cloud.rotations, grads.rotations,
               config.lr_rotation, config)
    _adam_step(state, "log_scales", cloud.log_scales, grads.log_scales,
               config.lr_scale, config)
    _adam_step(state, "opacity_logits", cloud.opacity_logits,
               grads.opacity_logits, config.lr_opacity, config)
    _adam_step(state, "colors", cloud.colors, grads.colors, config.lr_color, config)
    if cloud.sh1 is not None and grads.sh1 is not None:
        _adam_step(state, "sh1", cloud.sh1, grads.sh1, config.lr_sh, config)
    if config.use_exposure:
        _adam_step_sparse(state, "exposure_a", state.exposure.a, da, ref,
                          config.lr_exposure, config)
        _adam_step_sparse(state, "exposure_b", state.exposure.b, db, ref,
                          config.lr_exposure, config)
    cloud.normalize_quaternions()

    state.densify_abs += grads.densify_abs
    state.densify_cnt += grads.seen
    state.densify_dir += grads.positions

    record = {"iteration": iteration, **{k: parts[k] for k in
              ("total", "rgb", "flatten", "sv_geom", "mv_rgb", "mv_geom")}}
    state.history.append(record)
    return record


def _resize_adam(state, keep_mask, n_new):
    for name in ("positions", "rotations", "log_scales", "opacity_logits",
                 "colors", "sh1"):
        if name not in state.adam_m:
            continue
        m, v = state.adam_m[name], state.adam_v[name]
        pad = (n_new,) + m.shape[1:]
        state.adam_m[name] = np.concatenate([m[keep_mask], np.zeros(pad)])
        state.adam_v[name] = np.concatenate([v[keep_mask], np.zeros(pad)])


def densify_and_prune(state, config):
    """Clone small / split large high-gradient Gaussians, prune transparent ones.

    The trigger statistic is the mean per-view sum of absolute screen-space
    positional gradients (AbsGS-style absolute accumulation).  Clones are
    offset along the accumulated descent direction; splits draw two samples
    from the parent's own distribution with scales shrunk by 1.6.
    """
    cloud = state.cloud
    cnt = np.maximum(state.densify_cnt, 1.0)
    mean_abs = state.densify_abs / cnt
    over = mean_abs > config.densify_grad_threshold
    smax = cloud.scales.max(axis=1)
    big = smax > config.split_scale_frac * state.extent
    clone = over & ~big
    split = over & big
    keep = cloud.opacities >= config.prune_opacity
    keep_idx = np.nonzero(keep)[0]

    new = {k: [] for k in ("positions", "rotations", "log_scales",
                           "opacity_logits", "colors", "sh1")}

    for i in np.nonzero(clone & keep)[0]:
        g = state.densify_dir[i]
        nrm = np.linalg.norm(g)
        step = np.zeros(3) if nrm < 1e-12 else -(g / nrm) * 0.5 * cloud.scales[i].mean()
        new["positions"].append(cloud.positions[i] + step)
        new["rotations"].append(cloud.rotations[i])
        new["log_scales"].append(cloud.log_scales[i])
        new["opacity_logits"].append(cloud.opacity_logits[i])
        new["colors"].append(cloud.colors[i])
        if cloud.sh1 is not None:
            new["sh1"].append(cloud.sh1[i])

    split_ids = np.nonzero(split & keep)[0]
    drop_split = set(int(i) for i in split_ids)
    from .gaussians import quat_to_rot
    for i in split_ids:
        R = quat_to_rot(cloud.unit_quaternions()[i])
        s = cloud.scales[i]
        for _ in range(2):
            local = state.rng.normal(size=3) * s
            new["positions"].append(cloud.positions[i] + R @ local)
            new["rotations"].append(cloud.rotations[i])
            new["log_scales"].append(cloud.log_scales[i] - np.log(1.6))
            new["opacity_logits"].append(cloud.opacity_logits[i])
            new["colors"].append(cloud.colors[i])
            if cloud.sh1 is not None:
                new["sh1"].append(cloud.sh1[i])

    keep_idx = np.array([i for i in keep_idx if i not in drop_split], dtype=np.int64)
    n_new = len(new["positions"])

    def cat(name, base):
        parts = [base[keep_idx]]
        if n_new:
            parts.append(np.asarray(new[name]))
        return np.concatenate(parts)

    has_sh = cloud.sh1 is not None
    keep_mask = np.zeros(len(cloud), dtype=bool)
    keep_mask[keep_idx] = True
    state.cloud = GaussianCloud(
        positions=cat("positions", cloud.positions),
        rotations=cat("rotations", cloud.rotations),
        log_scales=cat("log_scales", cloud.log_scales),
        opacity_logits=cat("opacity_logits", cloud.opacity_logits),
        colors=cat("colors", cloud.colors),
        sh1=cat("sh1", cloud.sh1) if has_sh else None,
    )
    _resize_adam(state, keep_mask, n_new)
    n = len(state.cloud)
    state.densify_abs = np.zeros(n)
    state.densify_cnt = np.zeros(n)
    state.densify_dir = np.zeros((n, 3))
    return state


def train(scene, config, cloud=None, out_dir=None, log_every=0):
    """Run the full optimization; returns the final TrainerState.

    When ``out_dir`` is given, writes checkpoint.ply, loss.csv, and preview
    renders every config.preview_interval iterations.
    """
    state = init_state(scene, config, cloud=cloud)
    densify_stop = config.densify_until_frac * config.iterations
    for it in range(config.iterations):
        rec = train_step(state, config, it)
        if (config.densify_interval > 0 and it > 0 and it < densify_stop
                and it % config.densify_interval == 0):
            densify_and_prune(state, config)
        if log_every and it % log_every == 0:
            print(f"iter {it:6d}  total {rec['total']:.5f}  rgb {rec['rgb']:.5f}  "
                  f"n={len(state.cloud)}")
        if out_dir:
            if config.checkpoint_interval and it and it % config.checkpoint_interval == 0:
                save_ply(state.cloud, os.path.join(out_dir, f"checkpoint_{it:06d}.ply"))
            if config.preview_interval and it and it % config.preview_interval == 0:
                _write_preview(state, config, out_dir, it)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        save_ply(state.cloud, os.path.join(out_dir, "checkpoint.ply"))
        write_loss_csv(state.history, os.path.join(out_dir, "loss.csv"))
    return state


def _write_preview(state, config, out_dir, iteration):
    from .scenes import write_image
    maps = rasterizer.render(state.cloud, state.cameras[0], config.raster)
    bg = np.asarray(config.background, dtype=np.float64)
    img = maps.color + (1.0 - maps.alpha)[..., None] * bg
    os.makedirs(out_dir, exist_ok=True)
    write_image(os.path.join(out_dir, f"preview_{iteration:06d}.png"), img)


def write_loss_csv(history, path):
    fields = ["iteration", "total", "rgb", "flatten", "sv_geom", "mv_rgb", "mv_geom"]
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fields)
        writer.writeheader()
        for rec in history:
            writer.writerow({k: rec[k] for k in fields})
