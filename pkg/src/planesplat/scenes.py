"""Dataset ingestion, synthetic ground-truth scenes, and image I/O.

Synthetic scenes are rendered by an exact analytic ray tracer (ray-plane,
ray-box, ray-sphere) with a procedural value-noise texture evaluated in
world space, so every view observes the same albedo.  Ground truth
includes per-view depth/normal maps, a reference mesh, sampled surface
points for initialization, and optionally known per-image exposure
perturbations.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from . import ply_io
from .geometry import Camera
from .fusion import TriangleMesh


# -- image and float-map I/O -----------------------------------------------------

FLOAT_MAP_MAGIC = b"FMP1"


def write_image(path, image):
    """8-bit PNG or PPM (by extension); values are clipped to [0, 1]."""
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    arr = np.round(arr * 255.0).astype(np.uint8)
    mode = "RGB" if arr.ndim == 3 else "L"
    try:
        Image.fromarray(arr, mode=mode).save(path)
    except OSError as e:
        raise IOError(f"{path}: cannot write image ({e})") from e


def read_image(path):
    """Image file to float RGB in [0, 1]."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except FileNotFoundError:
        raise IOError(f"{path}: image file not found")
    except OSError as e:
        raise IOError(f"{path}: cannot decode image ({e})") from e
    return arr


def write_gray16(path, values, scale):
    """16-bit grayscale PNG of values * scale, clipped to the uint16 range."""
    arr = np.clip(np.asarray(values, dtype=np.float64) * scale, 0, 65535)
    Image.fromarray(arr.astype(np.uint16)).save(path)


def write_float_map(path, values):
    """Raw little-endian float32 grid with a 16-byte header.

    Header: 4-byte magic "FMP1", uint32 width, uint32 height, uint32
    channels; data follows row-major, channel-interleaved.
    """
    arr = np.asarray(values, dtype="<f4")
    if arr.ndim == 2:
        arr = arr[..., None]
    h, w, c = arr.shape
    with open(path, "wb") as f:
        f.write(FLOAT_MAP_MAGIC)
        f.write(np.array([w, h, c], dtype="<u4").tobytes())
        f.write(np.ascontiguousarray(arr).tobytes())


def read_float_map(path):
    with open(path, "rb") as f:
        head = f.read(16)
        if len(head) < 16 or head[:4] != FLOAT_MAP_MAGIC:
            raise IOError(f"{path}: not a float map file")
        w, h, c = np.frombuffer(head[4:], dtype="<u4")
        data = np.frombuffer(f.read(), dtype="<f4")
    if data.size != w * h * c:
        raise IOError(f"{path}: truncated float map "
                      f"({data.size} values, expected {w * h * c})")
    arr = data.reshape(int(h), int(w), int(c))
    return arr[..., 0] if c == 1 else arr


# -- scene bundle -----------------------------------------------------------------

@dataclass
class GroundTruth:
    depths: list = None          # per-view (H, W) camera-z depth
    normals: list = None         # per-view (H, W, 3) camera frame, facing camera
    valids: list = None          # per-view (H, W) bool
    mesh: TriangleMesh = None
    exposure: np.ndarray = None  # (n_views, 2) true (a*, b*) perturbations
    surface: str = ""            # shape name


@dataclass
class SceneBundle:
    cameras: list
    images: list
    sparse_points: np.ndarray = None
    sparse_colors: np.ndarray = None
    ground_truth: GroundTruth = None

    def __post_init__(self):
        assert len(self.images) == len(self.cameras)
        for cam, img in zip(self.cameras, self.images):
            assert img.shape[:2] == (cam.height, cam.width), \
                f"image {cam.image_id} does not match camera dimensions"


# -- procedural texture ------------------------------------------------------------

def _hash01(ix, iy, iz, seed):
    h = (ix.astype(np.uint64) * np.uint64(374761393)
         + iy.astype(np.uint64) * np.uint64(668265263)
         + iz.astype(np.uint64) * np.uint64(1274126177)
         + np.uint64(seed) * np.uint64(974634611))
    h &= np.uint64(0xFFFFFFFF)
    h ^= h >> np.uint64(13)
    h = (h * np.uint64(1597334677)) & np.uint64(0xFFFFFFFF)
    h ^= h >> np.uint64(16)
    return h.astype(np.float64) / float(2**32)


def _lattice_noise(p, seed):
    """Smooth trilinear value noise on the integer lattice of p (..., 3)."""
    p0 = np.floor(p).astype(np.int64)
    f = p - p0
    f = f * f * (3.0 - 2.0 * f)  # smoothstep
    acc = np.zeros(p.shape[:-1])
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                v = _hash01(p0[..., 0] + dx, p0[..., 1] + dy, p0[..., 2] + dz, seed)
                wx = f[..., 0] if dx else 1.0 - f[..., 0]
                wy = f[..., 1] if dy else 1.0 - f[..., 1]
                wz = f[..., 2] if dz else 1.0 - f[..., 2]
                acc += v * wx * wy * wz
    return acc


def value_noise(points, seed, freq=3.0, octaves=3):
    """Multi-octave value noise in [0, 1]; non-periodic at patch scale."""
    points = np.asarray(points, dtype=np.float64)
    total = np.zeros(points.shape[:-1])
    amp, asum = 1.0, 0.0
    for o in range(octaves):
        total += amp * _lattice_noise(points * (freq * 2.0**o) + 17.31 * o, seed + o)
        asum += amp
        amp *= 0.5
    return total / asum


def texture_rgb(points, seed, kind="noise", freq=2.0, octaves=2):
    """World-space albedo in [0.05, 0.75] (noise) or two-tone checkerboard.

    The default noise is smooth enough for a desk-scale Gaussian budget to
    reproduce (the image loss's structural-similarity gate must open) while
    staying non-periodic at patch scale so NCC has a unique optimum.
    """
    points = np.asarray(points, dtype=np.float64)
    if kind == "checker":
        parity = np.floor(points * 4.0).astype(np.int64).sum(axis=-1) % 2
        c = np.where(parity[..., None] == 0, 0.15, 0.7)
        return np.broadcast_to(c, points.shape[:-1] + (3,)).copy()
    rgb = np.stack([value_noise(points, seed + 101 * ch, freq=freq,
                                octaves=octaves) for ch in range(3)], axis=-1)
    return 0.05 + 0.7 * rgb


# -- analytic surfaces --------------------------------------------------------------

_T_MIN = 1e-6


def _trace_plane(origin, dirs, z0=0.0):
    dz = dirs[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (z0 - origin[2]) / dz
    hit = (np.abs(dz) > 1e-12) & (t > _T_MIN)
    n = np.zeros_like(dirs)
    n[..., 2] = 1.0
    return np.where(hit, t, np.inf), n, hit


def _trace_sphere(origin, dirs, radius=1.0):
    b = np.einsum("...i,i->...", dirs, origin)
    c = origin @ origin - radius**2
    a = np.einsum("...i,...i->...", dirs, dirs)
    disc = b * b - a * c
    hit = disc >= 0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    t0 = (-b - sq) / a
    t1 = (-b + sq) / a
    t = np.where(t0 > _T_MIN, t0, t1)
    hit &= t > _T_MIN
    pts = origin + t[..., None] * dirs
    n = pts / radius
    return np.where(hit, t, np.inf), n, hit


def _trace_box(origin, dirs, half=0.5):
    inv = np.where(np.abs(dirs) > 1e-15, 1.0 / dirs, np.inf)
    t1 = (-half - origin) * inv
    t2 = (half - origin) * inv
    tmin = np.minimum(t1, t2)
    tmax = np.maximum(t1, t2)
    tn = tmin.max(axis=-1)
    tf = tmax.min(axis=-1)
    hit = (tn <= tf) & (tf > _T_MIN)
    t = np.where(tn > _T_MIN, tn, tf)
    hit &= t > _T_MIN
    ax = np.argmax(tmin, axis=-1)
    pts = origin + t[..., None] * dirs
    n = np.zeros_like(dirs)
    rows = np.arange(n.size // 3).reshape(ax.shape)
    flat_n = n.reshape(-1, 3)
    flat_n[rows.ravel(), ax.ravel()] = np.sign(pts.reshape(-1, 3)[rows.ravel(), ax.ravel()])
    n = flat_n.reshape(dirs.shape)
    return np.where(hit, t, np.inf), n, hit


def _trace_two_planes(origin, dirs):
    """A raised half-plane slab at z=0.4 for x >= 0 over a base plane z=0."""
    tA, nA, hA = _trace_plane(origin, dirs, z0=0.0)
    tB, nB, hB = _trace_plane(origin, dirs, z0=0.4)
    xB = origin[0] + np.where(np.isfinite(tB), tB, 0.0) * dirs[..., 0]
    hB &= xB >= 0.0
    useB = hB & (tB < tA)
    t = np.where(useB, tB, tA)
    n = np.where(useB[..., None], nB, nA)
    hit = hA | hB
    return np.where(hit, t, np.inf), n, hit


_SURFACES = {
    "plane": _trace_plane,
    "textured-plane": _trace_plane,
    "sphere": _trace_sphere,
    "cube": _trace_box,
    "two-planes": _trace_two_planes,
}


def look_at_camera(eye, target, up, K, width, height, image_id):
    """Camera at eye with optical axis toward target (x right, y down, z forward)."""
    eye = np.asarray(eye, dtype=np.float64)
    f = np.asarray(target, dtype=np.float64) - eye
    f = f / np.linalg.norm(f)
    up = np.asarray(up, dtype=np.float64)
    d = -(up - (up @ f) * f)
    nd = np.linalg.norm(d)
    if nd < 1e-9:
        raise ValueError("up vector parallel to viewing direction")
    d /= nd
    r = np.cross(d, f)
    R_c = np.column_stack([r, d, f])
    return Camera(K=K, R_c=R_c, T_c=eye, width=width, height=height,
                  image_id=image_id)


def _sample_surface_points(kind, n, rng):
    if kind in ("plane", "textured-plane"):
        xy = rng.uniform(-1.2, 1.2, size=(n, 2))
        return np.column_stack([xy, np.zeros(n)])
    if kind == "sphere":
        v = rng.normal(size=(n, 3))
        return v / np.linalg.norm(v, axis=1, keepdims=True)
    if kind == "cube":
        face = rng.integers(0, 6, n)
        uv = rng.uniform(-0.5, 0.5, size=(n, 2))
        pts = np.empty((n, 3))
        ax = face % 3
        sg = np.where(face < 3, 0.5, -0.5)
        for i in range(n):
            others = [j for j in range(3) if j != ax[i]]
            pts[i, ax[i]] = sg[i]
            pts[i, others[0]] = uv[i, 0]
            pts[i, others[1]] = uv[i, 1]
        return pts
    if kind == "two-planes":
        xy = rng.uniform(-1.2, 1.2, size=(n, 2))
        z = np.where(xy[:, 0] >= 0, 0.4, 0.0)
        return np.column_stack([xy, z])
    raise ValueError(f"unknown synthetic surface {kind!r}")


def _reference_mesh(kind):
    if kind in ("plane", "textured-plane"):
        v = np.array([[-1.5, -1.5, 0], [1.5, -1.5, 0], [1.5, 1.5, 0], [-1.5, 1.5, 0]],
                     dtype=np.float64)
        f = np.array([[0, 1, 2], [0, 2, 3]])
        return TriangleMesh(vertices=v, triangles=f)
    if kind == "cube":
        corners = np.array([[x, y, z] for x in (-0.5, 0.5)
                            for y in (-0.5, 0.5) for z in (-0.5, 0.5)])
        faces = []
        quads = [(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1),
                 (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3)]
        for a, b, c, d in quads:
            faces += [[a, b, c], [a, c, d]]
        return TriangleMesh(vertices=corners, triangles=np.array(faces))
    if kind == "sphere":
        nth, nph = 96, 192
        th = np.linspace(0, np.pi, nth + 1)
        ph = np.linspace(0, 2 * np.pi, nph, endpoint=False)
        T, P = np.meshgrid(th, ph, indexing="ij")
        v = np.stack([np.sin(T) * np.cos(P), np.sin(T) * np.sin(P), np.cos(T)],
                     axis=-1).reshape(-1, 3)
        faces = []
        for i in range(nth):
            for j in range(nph):
                a = i * nph + j
                b = i * nph + (j + 1) % nph
                c = (i + 1) * nph + j
                d = (i + 1) * nph + (j + 1) % nph
                if i > 0:
                    faces.append([a, b, c])
                if i < nth - 1:
                    faces.append([b, d, c])
        return TriangleMesh(vertices=v, triangles=np.array(faces))
    if kind == "two-planes":
        v = np.array([[-1.5, -1.5, 0], [0, -1.5, 0], [0, 1.5, 0], [-1.5, 1.5, 0],
                      [0, -1.5, 0.4], [1.5, -1.5, 0.4], [1.5, 1.5, 0.4], [0, 1.5, 0.4]],
                     dtype=np.float64)
        f = np.array([[0, 1, 2], [0, 2, 3], [4, 5, 6], [4, 6, 7]])
        return TriangleMesh(vertices=v, triangles=f)
    raise ValueError(f"unknown synthetic surface {kind!r}")


def make_synthetic(kind, n_views, resolution, seed, texture="noise",
                   n_points=500, exposure_range=None, camera_radius=None,
                   fov_scale=1.2, bg_color=0.4, object_scale=1.0):
    """Build a fully known scene: cameras, images, ground-truth maps, mesh.

    ``exposure_range`` = (a_max, b_max) applies a known per-image brightness
    perturbation exp(a*) I + b*; the draws are centered to zero mean so the
    global brightness gauge stays identifiable (stored in
    ground_truth.exposure).

    Rays that miss the surface show a neutral gray backdrop (``bg_color``,
    matching the trainer's default compositing color).  A black backdrop
    would pin the structural-similarity of underexposed views near zero and
    permanently close the image loss's exposure gate.
    """
    if kind not in _SURFACES:
        raise ValueError(f"unknown synthetic surface {kind!r}")
    rng = np.random.default_rng(seed)
    W = H = int(resolution)
    f = fov_scale * W
    K = np.array([[f, 0.0, (W - 1) / 2.0], [0.0, f, (H - 1) / 2.0], [0.0, 0.0, 1.0]])

    planar = kind in ("plane", "textured-plane", "two-planes")
    cameras = []
    for i in range(n_views):
        if planar:
            th = 2 * np.pi * i / n_views
            rad = camera_radius or 0.7
            eye = np.array([rad * np.cos(th), rad * np.sin(th), 2.5])
            up = np.array([0.0, 1.0, 0.0])
        else:
            # two elevation bands so the underside is observed as well
            band = i % 2
            per_band = (n_views + 1 - band) // 2
            j = i // 2
            th = 2 * np.pi * j / max(per_band, 1) + band * np.pi / max(per_band, 1)
            # radius 2.9 keeps same-band baselines inside the default 1.5
            # neighbor-graph cutoff at 20 views
            rad = camera_radius or 2.9
            elev = np.radians(35.0 if band == 0 else -35.0)
            eye = rad * np.array([np.cos(th) * np.cos(elev),
                                  np.sin(th) * np.cos(elev), np.sin(elev)])
            up = np.array([0.0, 0.0, 1.0])
        cameras.append(look_at_camera(eye, np.zeros(3), up, K, W, H, image_id=i))

    trace = _SURFACES[kind]
    s = float(object_scale)
    images, depths, normals, valids = [], [], [], []
    for cam in cameras:
        rays_cam = cam.ray_grid()
        dirs = rays_cam @ cam.R_c.T
        # trace in object-normalized coordinates, then rescale distances
        t, n_world, hit = trace(cam.T_c / s, dirs)
        t = t * s
        pts = cam.T_c + np.where(hit, t, 0.0)[..., None] * dirs
        img = np.full((H, W, 3), float(bg_color))
        img[hit] = texture_rgb(pts[hit], seed, kind=texture)
        n_cam = n_world @ cam.R_c
        flip = np.einsum("hwc,hwc->hw", n_cam, rays_cam) > 0
        n_cam = np.where(flip[..., None], -n_cam, n_cam)
        n_cam[~hit] = 0.0
        images.append(img)
        depths.append(np.where(hit, t, 0.0))  # rays have z=1, so t is camera z
        normals.append(n_cam)
        valids.append(hit)

    exposure = None
    if exposure_range is not None:
        a_max, b_max = exposure_range
        a = rng.uniform(-a_max, a_max, n_views)
        b = rng.uniform(-b_max, b_max, n_views)
        a -= a.mean()
        b -= b.mean()
        exposure = np.column_stack([a, b])
        images = [np.exp(a[i]) * images[i] + b[i] for i in range(n_views)]

    points = _sample_surface_points(kind, n_points, rng) * s
    colors = texture_rgb(points, seed, kind=texture)

    ref_mesh = _reference_mesh(kind)
    ref_mesh.vertices = ref_mesh.vertices * s
    gt = GroundTruth(depths=depths, normals=normals, valids=valids,
                     mesh=ref_mesh, exposure=exposure, surface=kind)
    return SceneBundle(cameras=cameras, images=images, sparse_points=points,
                       sparse_colors=colors, ground_truth=gt)


# -- loaders ------------------------------------------------------------------------

def _load_json_scene(path):
    base = os.path.dirname(os.path.abspath(path))
    try:
        with open(path) as f:
            manifest = json.load(f)
    except FileNotFoundError:
        raise IOError(f"{path}: manifest not found")
    except json.JSONDecodeError as e:
        raise IOError(f"{path}: invalid JSON ({e})")
    cameras, images = [], []
    for entry in manifest.get("cameras", []):
        K = np.array([[entry["fx"], 0, entry["cx"]],
                      [0, entry["fy"], entry["cy"]],
                      [0, 0, 1.0]])
        cam = Camera(K=K, R_c=np.array(entry["R_c"], dtype=np.float64).reshape(3, 3),
                     T_c=np.array(entry["T_c"], dtype=np.float64),
                     width=int(entry["width"]), height=int(entry["height"]),
                     image_id=int(entry["id"]))
        cameras.append(cam)
        images.append(read_image(os.path.join(base, entry["image"])))
    points = colors = None
    if manifest.get("points"):
        data = ply_io.read_ply(os.path.join(base, manifest["points"]))
        v = data["vertex"]
        points = np.stack([v["x"], v["y"], v["z"]], axis=1)
        if "red" in v:
            colors = np.stack([v["red"], v["green"], v["blue"]], axis=1) / 255.0
    return SceneBundle(cameras=cameras, images=images, sparse_points=points,
                       sparse_colors=colors)


def _colmap_quat_to_rot(q):
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)]])


def _load_colmap_text(model_dir):
    model_dir = str(model_dir)
    cam_file = os.path.join(model_dir, "cameras.txt")
    img_file = os.path.join(model_dir, "images.txt")
    if not os.path.isfile(cam_file):
        raise IOError(f"{cam_file}: missing cameras.txt")

    intrinsics = {}
    with open(cam_file) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            try:
                cam_id, model = int(parts[0]), parts[1]
                w, h = int(parts[2]), int(parts[3])
                params = [float(p) for p in parts[4:]]
            except (ValueError, IndexError):
                raise IOError(f"{cam_file}:{lineno}: malformed camera line")
            if model == "PINHOLE":
                fx, fy, cx, cy = params[:4]
            elif model == "SIMPLE_PINHOLE":
                fx = fy = params[0]
                cx, cy = params[1], params[2]
            else:
                raise IOError(f"{cam_file}:{lineno}: unsupported camera model {model}")
            intrinsics[cam_id] = (np.array([[fx, 0, cx], [0, fy, cy], [0, 0, 1.0]]), w, h)

    cameras, images = [], []
    with open(img_file) as f:
        lines = [l.strip() for l in f]
    data_lines = [(i + 1, l) for i, l in enumerate(lines) if l and not l.startswith("#")]
    # images.txt alternates a pose line and a 2D-points line
    for k in range(0, len(data_lines), 2):
        lineno, line = data_lines[k]
        parts = line.split()
        try:
            image_id = int(parts[0])
            q = [float(x) for x in parts[1:5]]
            t = np.array([float(x) for x in parts[5:8]])
            cam_id = int(parts[8])
            name = parts[9]
        except (ValueError, IndexError):
            raise IOError(f"{img_file}:{lineno}: malformed image line")
        if cam_id not in intrinsics:
            raise IOError(f"{img_file}:{lineno}: unknown camera id {cam_id}")
        K, w, h = intrinsics[cam_id]
        R_wc = _colmap_quat_to_rot(q)  # world-to-camera
        R_c = R_wc.T
        T_c = -R_wc.T @ t
        img_path = None
        for cand in (os.path.join(model_dir, "images", name),
                     os.path.join(os.path.dirname(model_dir.rstrip(os.sep)), "images", name),
                     os.path.join(model_dir, name)):
            if os.path.isfile(cand):
                img_path = cand
                break
        if img_path is None:
            raise IOError(f"{img_file}:{lineno}: image file {name!r} not found")
        cameras.append(Camera(K=K, R_c=R_c, T_c=T_c, width=w, height=h,
                              image_id=image_id))
        images.append(read_image(img_path))

    points = colors = None
    pts_file = os.path.join(model_dir, "points3D.txt")
    if os.path.isfile(pts_file):
        pts, cols = [], []
        with open(pts_file) as f:
            for lineno, line in enumerate(f, 1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                parts = line.split()
                try:
                    pts.append([float(x) for x in parts[1:4]])
                    cols.append([float(x) / 255.0 for x in parts[4:7]])
                except (ValueError, IndexError):
                    raise IOError(f"{pts_file}:{lineno}: malformed point line")
        if pts:
            points = np.array(pts)
            colors = np.array(cols)
    return SceneBundle(cameras=cameras, images=images, sparse_points=points,
                       sparse_colors=colors)


def load_scene(path, fmt=None):
    """Load a scene from a json-scene manifest or a COLMAP text model directory."""
    if fmt is None:
        if str(path).endswith(".json"):
            fmt = "json-scene"
        elif os.path.isdir(path) and os.path.isfile(os.path.join(path, "cameras.txt")):
            fmt = "colmap-text"
        else:
            raise IOError(f"{path}: cannot determine scene format")
    if fmt == "json-scene":
        return _load_json_scene(path)
    if fmt == "colmap-text":
        return _load_colmap_text(path)
    raise ValueError(f"unknown scene format {fmt!r}")


def save_scene(bundle, out_dir, with_ground_truth=False):
    """Write a bundle as a json-scene manifest with PNG images (clipped to [0,1])."""
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for i, (cam, img) in enumerate(zip(bundle.cameras, bundle.images)):
        name = f"image_{cam.image_id:04d}.png"
        write_image(os.path.join(out_dir, name), img)
        entries.append({
            "id": int(cam.image_id), "width": int(cam.width), "height": int(cam.height),
            "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
            "R_c": [float(x) for x in cam.R_c.ravel()],
            "T_c": [float(x) for x in cam.T_c],
            "image": name,
        })
    manifest = {"cameras": entries}
    if bundle.sparse_points is not None:
        cols = {
            "x": bundle.sparse_points[:, 0].astype(np.float32),
            "y": bundle.sparse_points[:, 1].astype(np.float32),
            "z": bundle.sparse_points[:, 2].astype(np.float32),
        }
        if bundle.sparse_colors is not None:
            c8 = np.clip(bundle.sparse_colors * 255, 0, 255).astype(np.uint8)
            cols.update({"red": c8[:, 0], "green": c8[:, 1], "blue": c8[:, 2]})
        ply_io.write_ply(os.path.join(out_dir, "points.ply"), [("vertex", cols)])
        manifest["points"] = "points.ply"
    gt = bundle.ground_truth
    if with_ground_truth and gt is not None and gt.depths is not None:
        for i, (d, v) in enumerate(zip(gt.depths, gt.valids)):
            write_float_map(os.path.join(out_dir, f"gt_depth_{i:04d}.fmp"),
                            np.where(v, d, 0.0))
    with open(os.path.join(out_dir, "scene.json"), "w") as f:
        json.dump(manifest, f, indent=1)
    return os.path.join(out_dir, "scene.json")
