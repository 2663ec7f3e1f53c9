"""Ray-driven pinhole forward projector and its exact adjoint.

Each detector bin emits ``rays_per_bin**2`` rays through the (ideal, point)
pinhole.  Rays are sampled every half voxel starting from the pinhole, and
voxel values are trilinearly interpolated at each sample.  The resulting
weights are assembled once into a sparse system matrix ``A`` with rows in
the C-order of the projection array ``(bins_u, bins_v, n_detectors)`` and
columns in the C-order of the volume ``(nx, ny, nz)``.  Back projection is
multiplication by ``A.T`` built from the same entries, so the pair is
adjoint to rounding error.
"""

from __future__ import annotations

import functools
import logging
import warnings

import numpy as np
import scipy.sparse as sp
import torch

from .errors import ShapeError, ValidationError
from .geometry import AngleMask, ScannerGeometry

log = logging.getLogger(__name__)

SENSITIVITY_FLOOR = 1e-8
_CORNERS = np.array([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)])


def bin_ray_origins(det, rays_per_bin: int) -> np.ndarray:
    """Sub-bin ray start points on the detector plane, ``(bins_u*bins_v*r*r, 3)``.

    Rays of one bin are contiguous; bins are in ``(u, v)`` C-order.
    """
    a, e_u, e_v = det.frame()
    center = np.asarray(det.pinhole_position) - det.focal_length_mm * a
    s = rays_per_bin
    sub = ((np.arange(s) + 0.5) / s - 0.5) * det.pixel_pitch_mm
    cu = (np.arange(det.bins_u) + 0.5 - 0.5 * det.bins_u) * det.pixel_pitch_mm
    cv = (np.arange(det.bins_v) + 0.5 - 0.5 * det.bins_v) * det.pixel_pitch_mm
    ou = (cu[:, None, None, None] + sub[None, None, :, None]) * np.ones((1, det.bins_v, 1, s))
    ov = (cv[None, :, None, None] + sub[None, None, None, :]) * np.ones((det.bins_u, 1, s, 1))
    pts = center + ou.reshape(-1, 1) * e_u + ov.reshape(-1, 1) * e_v
    return pts


def _ray_interval(start, direction, lo, hi):
    """Slab intersection of rays ``start + t*direction`` (t >= 0) with a box."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / direction
        t0 = (lo - start) * inv
        t1 = (hi - start) * inv
    tmin = np.nanmax(np.minimum(t0, t1), axis=1)
    tmax = np.nanmin(np.maximum(t0, t1), axis=1)
    return np.maximum(tmin, 0.0), tmax


def _trilinear(q: np.ndarray, shape) -> tuple[np.ndarray, np.ndarray]:
    """Flat voxel indices and weights of the 8 trilinear neighbours of ``q``.

    ``q`` holds continuous voxel-index coordinates ``(..., 3)``.  Neighbours
    outside the grid get weight 0 and index 0.
    """
    i0 = np.floor(q).astype(np.int64)
    f = q - i0
    idx = i0[..., None, :] + _CORNERS
    w = np.prod(np.where(_CORNERS == 1, f[..., None, :], 1.0 - f[..., None, :]), axis=-1)
    n = np.asarray(shape)
    inside = np.all((idx >= 0) & (idx < n), axis=-1)
    w = np.where(inside, w, 0.0)
    flat = np.where(inside, np.ravel_multi_index(tuple(np.moveaxis(np.clip(idx, 0, n - 1), -1, 0)), shape), 0)
    return flat, w


def _detector_block(geometry: ScannerGeometry, det, rays_per_bin: int, mu: np.ndarray | None) -> sp.csr_matrix:
    grid = geometry.image_grid
    vs = grid.voxel_size_mm
    origin = np.asarray(grid.origin_mm)
    lo = origin - vs
    hi = origin + vs * np.asarray(grid.shape)  # last centre + one voxel
    step = 0.5 * vs

    pin = np.asarray(det.pinhole_position)
    starts = bin_ray_origins(det, rays_per_bin)
    dirs = pin - starts
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    tmin, tmax = _ray_interval(np.broadcast_to(pin, dirs.shape), dirs, lo, hi)
    hit = tmax > tmin
    n_rays = dirs.shape[0]
    n_bins = det.bins_u * det.bins_v
    if not hit.any():
        return sp.csr_matrix((n_bins, grid.n_voxels))

    k_lo = int(np.floor(tmin[hit].min() / step - 0.5))
    k_hi = int(np.ceil(tmax[hit].max() / step))
    t = (np.arange(max(k_lo, 0), k_hi + 1) + 0.5) * step
    pts = pin + t[None, :, None] * dirs[:, None, :]  # (rays, samples, 3)
    q = (pts - origin) / vs
    flat, w = _trilinear(q, grid.shape)  # (rays, samples, 8)

    if mu is not None:
        mu_s = np.sum(w * mu.ravel()[flat], axis=-1)  # mu at each sample
        path = step * (np.cumsum(mu_s, axis=1) - 0.5 * mu_s)
        w = w * np.exp(-path)[..., None]

    w = w * (step / rays_per_bin**2)
    rows = np.repeat(np.arange(n_rays) // rays_per_bin**2, flat.shape[1] * 8)
    keep = w.ravel() > 0
    block = sp.coo_matrix(
        (w.ravel()[keep], (rows[keep], flat.ravel()[keep])), shape=(n_bins, grid.n_voxels)
    ).tocsr()
    block.sum_duplicates()
    return block


class SystemOperator:
    """Linear map from activity volumes to multi-pinhole projections.

    Parameters
    ----------
    geometry : ScannerGeometry
    attenuation : ndarray, optional
        Linear attenuation coefficients per mm on the image grid.
    rays_per_bin : int
        Rays per detector bin along each detector axis.
    """

    def __init__(self, geometry: ScannerGeometry, attenuation: np.ndarray | None = None, rays_per_bin: int = 1):
        if rays_per_bin < 1:
            raise ValidationError("rays_per_bin must be >= 1")
        if attenuation is not None:
            attenuation = np.asarray(attenuation, dtype=np.float64)
            if attenuation.shape != geometry.image_grid.shape:
                raise ShapeError(f"attenuation shape {attenuation.shape} != grid {geometry.image_grid.shape}")
            if not np.all(np.isfinite(attenuation)) or attenuation.min() < 0:
                raise ValidationError("attenuation must be finite and nonnegative")
        self.geometry = geometry
        self.attenuation = attenuation
        self.rays_per_bin = int(rays_per_bin)

        blocks = [_detector_block(geometry, d, rays_per_bin, attenuation) for d in geometry.detectors]
        stacked = sp.vstack(blocks, format="csr")
        n_det = geometry.n_detectors
        n_bins = geometry.bins[0] * geometry.bins[1]
        # reorder rows from detector-major to (u, v, detector) C-order
        perm = (np.arange(n_det)[None, :] * n_bins + np.arange(n_bins)[:, None]).ravel()
        self.matrix: sp.csr_matrix = stacked[perm]
        self.matrix.sort_indices()
        self.matrix_t: sp.csr_matrix = self.matrix.T.tocsr()
        self._f32 = None
        log.debug("system matrix %s with %d nonzeros", self.matrix.shape, self.matrix.nnz)

    @property
    def volume_shape(self):
        return self.geometry.image_grid.shape

    @property
    def projection_shape(self):
        return self.geometry.projection_shape

    def matrices(self, dtype) -> tuple[sp.csr_matrix, sp.csr_matrix]:
        if np.dtype(dtype) == np.float32:
            if self._f32 is None:
                self._f32 = (self.matrix.astype(np.float32), self.matrix_t.astype(np.float32))
            return self._f32
        return self.matrix, self.matrix_t

    def row_mask(self, mask: AngleMask) -> np.ndarray:
        """Projection-shaped 0/1 array that is 1 on the bins of flagged detectors."""
        if len(mask) != self.geometry.n_detectors:
            raise ShapeError("mask length does not match the detector count")
        return np.broadcast_to(mask.as_array().astype(np.float64), self.projection_shape).copy()


@functools.lru_cache(maxsize=4)
def cached_operator(geometry: ScannerGeometry, rays_per_bin: int = 1) -> SystemOperator:
    """Shared unattenuated operator for a geometry (matrix assembly is slow)."""
    return SystemOperator(geometry, rays_per_bin=rays_per_bin)


def forward_project(op: SystemOperator, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if x.shape != op.volume_shape:
        raise ShapeError(f"volume shape {x.shape} != grid {op.volume_shape}")
    if not np.all(np.isfinite(x)):
        raise ValidationError("volume contains NaN or inf")
    dtype = np.float32 if x.dtype == np.float32 else np.float64
    a, _ = op.matrices(dtype)
    return (a @ x.astype(dtype, copy=False).ravel()).reshape(op.projection_shape)


def back_project(op: SystemOperator, p: np.ndarray) -> np.ndarray:
    p = np.asarray(p)
    if p.shape != op.projection_shape:
        raise ShapeError(f"projection shape {p.shape} != {op.projection_shape}")
    if not np.all(np.isfinite(p)):
        raise ValidationError("projection contains NaN or inf")
    dtype = np.float32 if p.dtype == np.float32 else np.float64
    _, at = op.matrices(dtype)
    return (at @ p.astype(dtype, copy=False).ravel()).reshape(op.volume_shape)


def sensitivity_image(op: SystemOperator, mask: AngleMask, fov_only_warning: bool = True) -> np.ndarray:
    """Back projection of ones on the flagged detectors.

    Voxels inside the grid's inscribed FOV sphere whose sensitivity falls
    below ``SENSITIVITY_FLOOR * max`` trigger a warning; reconstruction
    excludes them (see :func:`support_mask`).
    """
    sens = back_project(op, op.row_mask(mask))
    if fov_only_warning:
        grid = op.geometry.image_grid
        r = np.linalg.norm(grid.voxel_centers() - grid.center_mm, axis=-1)
        weak = (r <= grid.fov_radius_mm) & ~support_mask(sens)
        if weak.any():
            msg = f"{int(weak.sum())} voxels inside the FOV have (near-)zero sensitivity and are floored"
            log.warning(msg)
            warnings.warn(msg, RuntimeWarning, stacklevel=2)
    return sens


def support_mask(sens: np.ndarray, floor: float = SENSITIVITY_FLOOR) -> np.ndarray:
    peak = float(sens.max()) if sens.size else 0.0
    return sens > floor * peak


class _Project(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, op):
        ctx.op = op
        a, _ = op.matrices(np.float32 if x.dtype == torch.float32 else np.float64)
        lead = x.shape[: x.dim() - 3]
        flat = x.detach().cpu().numpy().reshape(-1, a.shape[1])
        out = (a @ flat.T).T
        return torch.from_numpy(np.ascontiguousarray(out)).reshape(*lead, *op.projection_shape).to(x.dtype)

    @staticmethod
    def backward(ctx, grad):
        op = ctx.op
        _, at = op.matrices(np.float32 if grad.dtype == torch.float32 else np.float64)
        lead = grad.shape[: grad.dim() - 3]
        flat = grad.detach().cpu().numpy().reshape(-1, at.shape[1])
        out = (at @ flat.T).T
        return torch.from_numpy(np.ascontiguousarray(out)).reshape(*lead, *op.volume_shape).to(grad.dtype), None


def project_torch(op: SystemOperator, x: torch.Tensor) -> torch.Tensor:
    """Differentiable forward projection of ``(..., nx, ny, nz)`` tensors."""
    if tuple(x.shape[-3:]) != tuple(op.volume_shape):
        raise ShapeError(f"volume shape {tuple(x.shape[-3:])} != grid {op.volume_shape}")
    return _Project.apply(x, op)
