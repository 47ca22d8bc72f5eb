"""Affine and thin-plate-spline warp fields, bilinear sampling and probability warping.

Warp fields use backward lookup: ``coords[y, x]`` is the input location read by
output pixel ``(x, y)``. Pixel centres sit at integer coordinates, so a field is
valid where its coordinate falls in ``[0, W-1] x [0, H-1]``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .numerics import Tensor
from .numerics import grid_sample as _grid_sample_tensor


@dataclass(frozen=True)
class WarpField:
    coords: np.ndarray  # [H, W, 2] float64, (x, y)
    valid: np.ndarray  # [H, W] bool

    def __post_init__(self):
        if self.coords.ndim != 3 or self.coords.shape[-1] != 2:
            raise ValueError(f"coords must be [H, W, 2], got {self.coords.shape}")
        if self.valid.shape != self.coords.shape[:2]:
            raise ValueError(f"validity {self.valid.shape} does not match coords {self.coords.shape[:2]}")
        if not np.all(np.isfinite(self.coords)):
            raise ValueError("warp coordinates must be finite")

    @property
    def height(self) -> int:
        return self.coords.shape[0]

    @property
    def width(self) -> int:
        return self.coords.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.coords.shape[:2]

    def planes(self) -> np.ndarray:
        """``[3, H, W]`` stack of x, y and validity planes (the dump layout)."""
        return np.stack([self.coords[..., 0], self.coords[..., 1], self.valid.astype(np.float64)])

    @classmethod
    def from_planes(cls, planes: np.ndarray) -> "WarpField":
        coords = np.stack([planes[0], planes[1]], axis=-1).astype(np.float64)
        return cls(coords, planes[2] > 0.5)


def pixel_grid(height: int, width: int) -> np.ndarray:
    ys, xs = np.mgrid[0:height, 0:width]
    return np.stack([xs, ys], axis=-1).astype(np.float64)


def in_bounds(coords: np.ndarray, height: int, width: int) -> np.ndarray:
    x, y = coords[..., 0], coords[..., 1]
    return (x >= 0) & (x <= width - 1) & (y >= 0) & (y <= height - 1)


def field_from_coords(coords: np.ndarray, valid: np.ndarray | None = None, snap: float = 1e-9) -> WarpField:
    h, w = coords.shape[:2]
    coords = np.asarray(coords, dtype=np.float64).copy()
    # round-off at the border should not flip validity
    for axis, hi in ((0, w - 1), (1, h - 1)):
        c = coords[..., axis]
        c[(c < 0) & (c > -snap)] = 0.0
        c[(c > hi) & (c < hi + snap)] = hi
    inside = in_bounds(coords, h, w)
    if valid is not None:
        inside &= valid
    return WarpField(coords, inside)


def identity_warp(height: int, width: int) -> WarpField:
    return WarpField(pixel_grid(height, width), np.ones((height, width), dtype=bool))


# -- affine -----------------------------------------------------------------------
def _centered(matrix: np.ndarray, height: int, width: int) -> np.ndarray:
    cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
    to_c = np.array([[1.0, 0, -cx], [0, 1.0, -cy], [0, 0, 1.0]])
    back = np.array([[1.0, 0, cx], [0, 1.0, cy], [0, 0, 1.0]])
    return back @ matrix @ to_c


def random_affine_matrix(seed: int, scale: float, height: int = 64, width: int = 64) -> np.ndarray:
    """3x3 output-to-input matrix, identity perturbed by at most ``scale`` per component.

    rotation <= scale*pi/4, log-scale <= scale, shear <= scale and translation
    <= scale*extent, each drawn uniformly with random sign.
    """
    if scale < 0:
        raise ValueError("scale must be non-negative")
    rng = np.random.default_rng(seed)
    u = rng.uniform(-1.0, 1.0, size=5) * scale
    angle = u[0] * np.pi / 4
    zoom = np.exp(u[1])
    shear = u[2]
    c, s = np.cos(angle), np.sin(angle)
    linear = np.array([[c, -s], [s, c]]) @ np.array([[zoom, 0], [0, zoom]]) @ np.array([[1.0, shear], [0, 1.0]])
    m = np.eye(3)
    m[:2, :2] = linear
    m[0, 2] = u[3] * width
    m[1, 2] = u[4] * height
    return _centered(m, height, width)


def affine_warp(matrix: np.ndarray, height: int, width: int) -> WarpField:
    grid = pixel_grid(height, width)
    coords = grid @ matrix[:2, :2].T + matrix[:2, 2]
    return field_from_coords(coords)


def random_affine(seed: int, scale: float, height: int = 64, width: int = 64) -> WarpField:
    return affine_warp(random_affine_matrix(seed, scale, height, width), height, width)


def translation_matrix(tx: float, ty: float) -> np.ndarray:
    m = np.eye(3)
    m[0, 2], m[1, 2] = tx, ty
    return m


# -- thin-plate spline --------------------------------------------------------------
def _tps_kernel(r2: np.ndarray) -> np.ndarray:
    # U(r) = r^2 log r^2, with U(0) = 0
    with np.errstate(divide="ignore", invalid="ignore"):
        out = r2 * np.log(r2)
    return np.where(r2 > 0, out, 0.0)


class ThinPlateSpline:
    """Interpolating 2-D thin-plate spline through ``control -> target``."""

    def __init__(self, control: np.ndarray, target: np.ndarray):
        control = np.asarray(control, dtype=np.float64)
        target = np.asarray(target, dtype=np.float64)
        k = len(control)
        poly = np.hstack([np.ones((k, 1)), control])
        if k < 3 or np.linalg.matrix_rank(poly) < 3:
            raise ValueError("thin-plate spline needs at least three non-collinear control points")
        d2 = np.sum((control[:, None, :] - control[None, :, :]) ** 2, axis=-1)
        system = np.zeros((k + 3, k + 3))
        system[:k, :k] = _tps_kernel(d2)
        system[:k, k:] = poly
        system[k:, :k] = poly.T
        rhs = np.zeros((k + 3, 2))
        rhs[:k] = target
        sol = np.linalg.solve(system, rhs)
        self.control = control
        self.weights = sol[:k]
        self.affine = sol[k:]

    def __call__(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        flat = pts.reshape(-1, 2)
        d2 = np.sum((flat[:, None, :] - self.control[None, :, :]) ** 2, axis=-1)
        out = _tps_kernel(d2) @ self.weights + self.affine[0] + flat @ self.affine[1:]
        return out.reshape(pts.shape)


def control_grid(grid: int, height: int, width: int) -> np.ndarray:
    """Regular ``grid x grid`` control points in [-1, 1] normalised coordinates."""
    if grid < 2:
        raise ValueError("control grid needs at least 2 points per axis")
    t = np.linspace(-1.0, 1.0, grid)
    gy, gx = np.meshgrid(t, t, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel()], axis=-1)


def _to_norm(coords: np.ndarray, height: int, width: int) -> np.ndarray:
    scale = np.array([(width - 1) / 2.0, (height - 1) / 2.0])
    return coords / scale - 1.0


def _from_norm(coords: np.ndarray, height: int, width: int) -> np.ndarray:
    scale = np.array([(width - 1) / 2.0, (height - 1) / 2.0])
    return (coords + 1.0) * scale


def tps_warp(control: np.ndarray, target: np.ndarray, height: int, width: int) -> WarpField:
    """Warp whose lookup at normalised control point ``control[k]`` reads ``target[k]``."""
    spline = ThinPlateSpline(control, target)
    norm = _to_norm(pixel_grid(height, width), height, width)
    return field_from_coords(_from_norm(spline(norm), height, width))


def random_tps(seed: int, scale: float, grid: int = 3, height: int = 64, width: int = 64) -> WarpField:
    """Control points on a regular grid shifted by up to ``scale`` in [-1, 1] units."""
    if scale < 0:
        raise ValueError("scale must be non-negative")
    control = control_grid(grid, height, width)
    rng = np.random.default_rng(seed)
    disp = rng.uniform(-1.0, 1.0, size=control.shape) * scale
    if scale == 0:
        return identity_warp(height, width)
    return tps_warp(control, control + disp, height, width)


# -- composition and sampling -------------------------------------------------------
def _lookup(planes: np.ndarray, coords: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Bilinear lookup of ``planes[C, H, W]`` at ``coords[Ho, Wo, 2]``."""
    out = kernels.bilinear_gather(
        np.ascontiguousarray(planes[None], dtype=np.float64),
        np.ascontiguousarray(coords[None], dtype=np.float64),
        np.ascontiguousarray(valid[None], dtype=np.uint8),
    )
    return out[0]


def compose(outer: WarpField, inner: WarpField) -> WarpField:
    """``result(p) = inner(outer(p))``: warping by the result equals warping by ``inner`` then ``outer``."""
    if outer.shape != inner.shape:
        raise ValueError(f"cannot compose warps of resolution {outer.shape} and {inner.shape}")
    planes = np.stack([inner.coords[..., 0], inner.coords[..., 1], (~inner.valid).astype(np.float64)])
    looked = _lookup(planes, outer.coords, outer.valid)
    valid = outer.valid & (looked[2] <= 0.0)
    coords = np.stack([looked[0], looked[1]], axis=-1)
    coords = np.where(valid[..., None], coords, outer.coords)
    return WarpField(coords, valid)


def grid_sample(image, warp: WarpField):
    """Bilinearly resample ``image[C, H, W]`` (array or Tensor) through ``warp``."""
    is_tensor = isinstance(image, Tensor)
    data = image.data if is_tensor else np.asarray(image)
    if data.ndim != 3 or data.shape[1:] != warp.shape:
        raise ValueError(f"image {data.shape} does not match warp resolution {warp.shape}")
    if is_tensor:
        from .numerics import reshape

        batched = reshape(image, (1,) + data.shape)
        out = _grid_sample_tensor(batched, warp.coords[None], warp.valid[None])
        return reshape(out, data.shape)
    out = kernels.bilinear_gather(
        np.ascontiguousarray(data[None], dtype=np.float64),
        np.ascontiguousarray(warp.coords[None]),
        np.ascontiguousarray(warp.valid[None], dtype=np.uint8),
    )
    return out[0].astype(data.dtype)


def warp_to_grid(warp: WarpField, grid_h: int, grid_w: int) -> WarpField:
    """Express a pixel-resolution warp on a ``grid_h x grid_w`` cell grid in cell units."""
    sy, sx = warp.height / grid_h, warp.width / grid_w
    cells = pixel_grid(grid_h, grid_w)
    centers = np.empty_like(cells)
    centers[..., 0] = (cells[..., 0] + 0.5) * sx - 0.5
    centers[..., 1] = (cells[..., 1] + 0.5) * sy - 0.5
    planes = np.stack([warp.coords[..., 0], warp.coords[..., 1], (~warp.valid).astype(np.float64)])
    ok = in_bounds(centers, warp.height, warp.width)
    looked = _lookup(planes, centers, ok)
    ok &= looked[2] <= 0.0
    g = np.empty_like(cells)
    g[..., 0] = (looked[0] + 0.5) / sx - 0.5
    g[..., 1] = (looked[1] + 0.5) / sy - 0.5
    ok &= in_bounds(g, grid_h, grid_w)
    g = np.where(ok[..., None], g, cells)
    return WarpField(g, ok)


def warp_planes(planes: np.ndarray, warp: WarpField) -> np.ndarray:
    """Resample a stack of maps ``[C, h, w]`` through a warp on the same grid; zero where invalid."""
    if planes.shape[1:] != warp.shape:
        raise ValueError(f"maps {planes.shape[1:]} do not match warp resolution {warp.shape}")
    return _lookup(planes.astype(np.float64), warp.coords, warp.valid)


def warp_probability(prob: np.ndarray, warp: WarpField, target_hw: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Resample the target axis of ``prob[N_t, N_s]`` through ``warp``.

    Each source position's map over the target grid is treated as one plane.
    Returns the warped, row-renormalised matrix and a per-row validity flag;
    invalid rows are zero.
    """
    h, w = target_hw
    n_t, n_s = prob.shape
    if n_t != h * w or warp.shape != (h, w):
        raise ValueError(f"probability rows {n_t} / grid {target_hw} do not match warp {warp.shape}")
    planes = np.ascontiguousarray(prob.T.reshape(n_s, h, w), dtype=np.float64)
    warped = _lookup(planes, warp.coords, warp.valid).reshape(n_s, n_t).T
    sums = warped.sum(axis=1)
    valid = warp.valid.reshape(-1) & (sums > 0)
    q = np.where(valid[:, None], warped / np.where(sums > 0, sums, 1.0)[:, None], 0.0)
    return q, valid


def grid_coordinates(height: int, width: int) -> np.ndarray:
    """``[h*w, 2]`` (x, y) coordinates of the flattened grid positions."""
    return pixel_grid(height, width).reshape(-1, 2)


def flow_field(prob: np.ndarray, target_hw: tuple[int, int], source_hw: tuple[int, int]) -> np.ndarray:
    """Hard-match displacement ``[h_t, w_t, 2]`` from target cells to their source matches (cell units)."""
    match = kernels.hard_argmax(np.ascontiguousarray(prob))
    src = grid_coordinates(*source_hw)[match]
    tgt = grid_coordinates(*target_hw)
    return (src - tgt).reshape(target_hw[0], target_hw[1], 2)
