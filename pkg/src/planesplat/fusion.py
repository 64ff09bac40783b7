"""Mesh extraction: depth filtering, TSDF integration, marching cubes, chamfer.

Depth maps are fused KinectFusion-style into a truncated signed distance
grid (positive in front of the surface toward the camera), the zero level
set is triangulated, and meshes are compared by symmetric chamfer distance
over area-weighted surface samples.
"""

import struct
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from skimage import measure

from . import ply_io

VOLUME_MAGIC = b"TSV1"


@dataclass
class TsdfVolume:
    """Voxel grid at world positions origin + index * voxel_size."""
    origin: np.ndarray
    voxel_size: float
    dims: tuple
    tsdf: np.ndarray = None
    weights: np.ndarray = None

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        self.dims = tuple(int(d) for d in self.dims)
        if self.tsdf is None:
            self.tsdf = np.ones(self.dims)
        if self.weights is None:
            self.weights = np.zeros(self.dims)

    def grid_points(self):
        ii = [np.arange(d) for d in self.dims]
        g = np.stack(np.meshgrid(*ii, indexing="ij"), axis=-1).astype(np.float64)
        return self.origin + g * self.voxel_size


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    normals: np.ndarray = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.triangles) and self.triangles.max() >= len(self.vertices):
            raise ValueError("triangle index out of range")

    def triangle_areas(self):
        v = self.vertices
        t = self.triangles
        c = np.cross(v[t[:, 1]] - v[t[:, 0]], v[t[:, 2]] - v[t[:, 0]])
        return 0.5 * np.linalg.norm(c, axis=1)


def volume_for_bounds(lo, hi, voxel_size):
    """Smallest grid covering [lo, hi] with lattice points spaced voxel_size."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    dims = np.ceil((hi - lo) / voxel_size).astype(int) + 1
    return TsdfVolume(origin=lo, voxel_size=float(voxel_size), dims=tuple(dims))


def filter_depth(depth, valid, camera, max_angle_deg=80.0, offset=1):
    """Invalidate depth pixels whose local-plane normal grazes the viewing ray.

    The normal comes from the same four-neighbor cross-product construction
    used by the single-view loss; the angle uses |N_d . V| so orientation
    does not matter.  Pixels within ``offset`` of the image border are
    invalidated; interior pixels with an invalid neighbor are kept (the
    angle is unknown there), which makes the filter idempotent.
    """
    depth = np.asarray(depth, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool)
    H, W = depth.shape
    k = offset
    rays = camera.ray_grid()
    pts = depth[..., None] * rays

    interior = np.zeros((H, W), dtype=bool)
    interior[k:H - k, k:W - k] = True
    have_nb = interior.copy()
    for dy, dx in ((-k, 0), (k, 0), (0, -k), (0, k)):
        have_nb &= np.roll(np.roll(valid, -dy, axis=0), -dx, axis=1)

    e1 = np.roll(pts, -k, axis=0) - np.roll(pts, k, axis=0)
    e2 = np.roll(pts, -k, axis=1) - np.roll(pts, k, axis=1)
    n_d = np.cross(e1, e2)
    nn = np.linalg.norm(n_d, axis=2)
    rn = np.linalg.norm(rays, axis=2)
    dot = np.abs(np.einsum("hwc,hwc->hw", n_d, rays))
    evaluable = have_nb & (nn > 1e-12)
    with np.errstate(invalid="ignore", divide="ignore"):
        cosang = np.where(evaluable, dot / (nn * rn), 1.0)
    angle = np.degrees(np.arccos(np.clip(cosang, -1.0, 1.0)))

    out = valid & interior
    out &= ~(evaluable & (angle > max_angle_deg))
    return out


def integrate(volume, depth, valid, camera, trunc):
    """Fuse one filtered depth map into the volume (weight-1 running average)."""
    assert trunc >= 2 * volume.voxel_size, "truncation below 2 voxels aliases"
    pts = volume.grid_points().reshape(-1, 3)
    t = (pts - camera.T_c[None, :]) @ camera.R_c
    z = t[:, 2]
    front = z > 1e-9
    u = np.full(len(pts), -1.0)
    v = np.full(len(pts), -1.0)
    u[front] = camera.fx * t[front, 0] / z[front] + camera.cx
    v[front] = camera.fy * t[front, 1] / z[front] + camera.cy
    ui = np.rint(u).astype(np.int64)
    vi = np.rint(v).astype(np.int64)
    ok = front & (ui >= 0) & (ui < camera.width) & (vi >= 0) & (vi < camera.height)
    ui = np.clip(ui, 0, camera.width - 1)
    vi = np.clip(vi, 0, camera.height - 1)
    ok &= np.asarray(valid, dtype=bool)[vi, ui]
    d = np.asarray(depth, dtype=np.float64)[vi, ui]
    sdf = d - z
    ok &= sdf > -trunc
    if not ok.any():
        return volume
    obs = np.minimum(sdf[ok] / trunc, 1.0)
    idx = np.nonzero(ok)[0]
    tsdf = volume.tsdf.reshape(-1)
    wts = volume.weights.reshape(-1)
    w_old = wts[idx]
    tsdf[idx] = (tsdf[idx] * w_old + obs) / (w_old + 1.0)
    wts[idx] = w_old + 1.0
    return volume


def extract_mesh(volume):
    """Marching-cubes triangulation of the tsdf=0 level set.

    Unobserved voxels (weight 0) produce no faces.  Returns an empty mesh
    when the observed region has no sign change.
    """
    mask = volume.weights > 0
    if not mask.any() or volume.tsdf[mask].min() > 0 or volume.tsdf[mask].max() < 0:
        return TriangleMesh(vertices=np.zeros((0, 3)), triangles=np.zeros((0, 3), int))
    try:
        verts, faces, normals, _ = measure.marching_cubes(
            volume.tsdf, level=0.0,
            spacing=(volume.voxel_size,) * 3, mask=mask)
    except (ValueError, RuntimeError):
        return TriangleMesh(vertices=np.zeros((0, 3)), triangles=np.zeros((0, 3), int))
    verts = verts + volume.origin[None, :]
    mesh = TriangleMesh(vertices=verts, triangles=faces, normals=normals)
    areas = mesh.triangle_areas()
    keep = areas > 0
    mesh.triangles = mesh.triangles[keep]
    return mesh


def sample_mesh_points(mesh, n, rng):
    """Area-weighted uniform surface samples."""
    areas = mesh.triangle_areas()
    total = areas.sum()
    if total <= 0 or len(mesh.triangles) == 0:
        raise ValueError("cannot sample from an empty or degenerate mesh")
    probs = areas / total
    choice = rng.choice(len(mesh.triangles), size=n, p=probs)
    tri = mesh.triangles[choice]
    a = mesh.vertices[tri[:, 0]]
    b = mesh.vertices[tri[:, 1]]
    c = mesh.vertices[tri[:, 2]]
    r1 = np.sqrt(rng.uniform(size=(n, 1)))
    r2 = rng.uniform(size=(n, 1))
    return (1 - r1) * a + r1 * (1 - r2) * b + r1 * r2 * c


def chamfer_distance(a, b, n_samples=100000, seed=0):
    """Symmetric mean nearest-neighbor distance between two surfaces.

    Meshes are sampled uniformly by area; both sides draw from the same
    seed, so a mesh compared against itself gives exactly zero.  Raw (N, 3)
    point arrays are used as-is.
    """
    pa = a if isinstance(a, np.ndarray) else \
        sample_mesh_points(a, n_samples, np.random.default_rng(seed))
    pb = b if isinstance(b, np.ndarray) else \
        sample_mesh_points(b, n_samples, np.random.default_rng(seed))
    if len(pa) == 0 or len(pb) == 0:
        raise ValueError("chamfer distance of an empty surface")
    d_ab, _ = cKDTree(pb).query(pa, k=1)
    d_ba, _ = cKDTree(pa).query(pb, k=1)
    return 0.5 * (float(np.mean(d_ab)) + float(np.mean(d_ba)))


# -- exports -----------------------------------------------------------------------

def save_mesh_ply(mesh, path, binary=True):
    cols = {
        "x": mesh.vertices[:, 0].astype(np.float32),
        "y": mesh.vertices[:, 1].astype(np.float32),
        "z": mesh.vertices[:, 2].astype(np.float32),
    }
    if mesh.normals is not None and len(mesh.normals) == len(mesh.vertices):
        cols["nx"] = mesh.normals[:, 0].astype(np.float32)
        cols["ny"] = mesh.normals[:, 1].astype(np.float32)
        cols["nz"] = mesh.normals[:, 2].astype(np.float32)
    ply_io.write_ply(path, [("vertex", cols),
                            ("face", {"vertex_indices": mesh.triangles})],
                     binary=binary)


def load_mesh_ply(path):
    data = ply_io.read_ply(path)
    if "vertex" not in data:
        raise IOError(f"{path}: mesh has no vertex element")
    v = data["vertex"]
    verts = np.stack([v["x"], v["y"], v["z"]], axis=1)
    faces = data.get("face", {}).get("vertex_indices", np.zeros((0, 3), int))
    return TriangleMesh(vertices=verts, triangles=faces)


def save_mesh_obj(mesh, path):
    with open(path, "w") as f:
        for p in mesh.vertices:
            f.write(f"v {p[0]:.9g} {p[1]:.9g} {p[2]:.9g}\n")
        for t in mesh.triangles:
            f.write(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n")


def save_volume(volume, path):
    """Little-endian dump: magic "TSV1", origin 3xf64, voxel f64, dims 3xu32,
    then tsdf and weight grids as float32 in C order."""
    with open(path, "wb") as f:
        f.write(VOLUME_MAGIC)
        f.write(np.asarray(volume.origin, dtype="<f8").tobytes())
        f.write(struct.pack("<d", volume.voxel_size))
        f.write(np.asarray(volume.dims, dtype="<u4").tobytes())
        f.write(volume.tsdf.astype("<f4").tobytes())
        f.write(volume.weights.astype("<f4").tobytes())


def load_volume(path):
    with open(path, "rb") as f:
        if f.read(4) != VOLUME_MAGIC:
            raise IOError(f"{path}: not a TSDF volume dump")
        origin = np.frombuffer(f.read(24), dtype="<f8").copy()
        (voxel,) = struct.unpack("<d", f.read(8))
        dims = tuple(int(x) for x in np.frombuffer(f.read(12), dtype="<u4"))
        n = dims[0] * dims[1] * dims[2]
        tsdf = np.frombuffer(f.read(4 * n), dtype="<f4").reshape(dims).astype(np.float64)
        weights = np.frombuffer(f.read(4 * n), dtype="<f4").reshape(dims).astype(np.float64)
    return TsdfVolume(origin=origin, voxel_size=voxel, dims=dims,
                      tsdf=tsdf, weights=weights)
