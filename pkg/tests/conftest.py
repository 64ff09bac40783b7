import numpy as np
import pytest

from planesplat import Camera, GaussianCloud
from planesplat.gaussians import logit
from planesplat.rasterizer import RasterConfig, render


def make_camera(f=100.0, size=64, R=None, T=None, image_id=0):
    K = np.array([[f, 0.0, (size - 1) / 2.0],
                  [0.0, f, (size - 1) / 2.0],
                  [0.0, 0.0, 1.0]])
    return Camera(K=K, R_c=np.eye(3) if R is None else R,
                  T_c=np.zeros(3) if T is None else np.asarray(T, dtype=float),
                  width=size, height=size, image_id=image_id)


def frontal_disk(z=5.0, opacity=0.5, extent=5.0, color=(0.3, 0.6, 0.9)):
    """One flattened Gaussian at (0,0,z) facing a camera at the origin."""
    return GaussianCloud(
        positions=[[0.0, 0.0, z]],
        rotations=[[1.0, 0.0, 0.0, 0.0]],
        log_scales=[[np.log(extent), np.log(extent), np.log(1e-5)]],
        opacity_logits=[logit(opacity)],
        colors=[list(color)],
    )


def random_cloud(rng, n=5, z_range=(3.0, 6.0), with_sh=False):
    return GaussianCloud(
        positions=np.column_stack([rng.uniform(-0.5, 0.5, n),
                                   rng.uniform(-0.5, 0.5, n),
                                   rng.uniform(*z_range, n)]),
        rotations=rng.normal(size=(n, 4)),
        log_scales=rng.uniform(np.log(0.05), np.log(0.4), (n, 3)),
        opacity_logits=rng.uniform(-1.0, 1.5, n),
        colors=rng.uniform(0.2, 0.8, (n, 3)),
        sh1=rng.normal(scale=0.05, size=(n, 3, 3)) if with_sh else None,
    )


def central_difference(f, arr, h=1e-6):
    """Central finite differences of scalar f() over every entry of arr."""
    out = np.zeros_like(arr, dtype=float)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        ix = it.multi_index
        old = arr[ix]
        arr[ix] = old + h
        f1 = f()
        arr[ix] = old - h
        f0 = f()
        arr[ix] = old
        out[ix] = (f1 - f0) / (2 * h)
    return out


def max_rel_err(analytic, numeric, floor=1e-6):
    analytic = np.asarray(analytic, dtype=float)
    numeric = np.asarray(numeric, dtype=float)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float((np.abs(analytic - numeric) / scale).max())


@pytest.fixture(scope="session", autouse=True)
def warm_kernels():
    """Compile the numba kernels once so per-test timing stays honest."""
    cam = make_camera(size=16)
    render(frontal_disk(), cam, RasterConfig())
    from planesplat.rasterizer import backward, MapGradients
    maps = render(frontal_disk(), cam)
    backward(frontal_disk(), cam, maps, MapGradients(color=np.ones((16, 16, 3))))
