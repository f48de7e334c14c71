"""Grid containers and the shared numerical primitives.

Volumes are dense 3D scalar grids with voxel spacing; tensor fields carry six
log-domain components per voxel. On top of those this module provides the
symmetric 3x3 eigen-decomposition with a deterministic ordering/sign
convention, the SPD matrix log/exp maps, trilinear resampling with Gaussian
anti-aliasing, and the exact Euclidean distance transform.

Memory layout is fixed: data arrays are indexed ``[x, y, z]`` and serialized
x-fastest, so flat voxel index = x + nx*(y + ny*z). Block grids and the
marching neighbor offsets rely on this.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

logger = logging.getLogger(__name__)

__all__ = [
    "ScalarVolume",
    "TensorFieldLE",
    "EigenDecomp3",
    "eig_sym3",
    "eig_sym3_field",
    "spd_log",
    "spd_exp",
    "sym_to_vec",
    "vec_to_sym",
    "vec_to_sym_field",
    "sym_to_vec_field",
    "resample",
    "resample_to",
    "distance_transform",
    "trilinear",
]

# Floor for eigenvalues entering the matrix log; tensors from all-background
# blocks degenerate and must still map.
EPS_SPD = 1e-12

# Eigenvalues below -1e-6 are treated as genuinely non-SPD, not as noise.
_NEG_TOL = -1e-6

_clamp_count = 0


def _check_dims_spacing(dims, spacing):
    dims = tuple(int(d) for d in dims)
    spacing = tuple(float(s) for s in spacing)
    if len(dims) != 3 or any(d < 1 for d in dims):
        raise ValueError("dims must be 3 positive integers, got %r" % (dims,))
    if len(spacing) != 3 or any(s <= 0 for s in spacing):
        raise ValueError("spacing must be 3 positive reals, got %r" % (spacing,))
    return dims, spacing


@dataclass(frozen=True)
class ScalarVolume:
    """Dense scalar grid. data[x, y, z], spacing in mm/voxel."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        dims, spacing = _check_dims_spacing(data.shape, self.spacing)
        if not np.all(np.isfinite(data)):
            raise ValueError("ScalarVolume data contains non-finite values")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)

    @property
    def dims(self) -> tuple:
        return self.data.shape

    def ravel(self) -> np.ndarray:
        """Flat x-fastest view of the data."""
        return self.data.ravel(order="F")


@dataclass(frozen=True)
class TensorFieldLE:
    """Per-voxel symmetric tensor in log coordinates.

    data[x, y, z, c] with c over (xx, xy, xz, yy, yz, zz). The exponentiated
    tensor at every voxel is SPD by construction of the log map.
    """

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 4 or data.shape[3] != 6:
            raise ValueError(
                "TensorFieldLE data must have shape (nx, ny, nz, 6), got %r"
                % (data.shape,)
            )
        dims, spacing = _check_dims_spacing(data.shape[:3], self.spacing)
        if not np.all(np.isfinite(data)):
            raise ValueError("TensorFieldLE data contains non-finite values")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)

    @property
    def dims(self) -> tuple:
        return self.data.shape[:3]


@dataclass(frozen=True)
class EigenDecomp3:
    """Eigen-decomposition of a symmetric 3x3 matrix.

    eigenvalues ordered by ascending absolute value; eigenvectors are the
    columns of an orthonormal Q with the sign convention that each column's
    largest-magnitude component is non-negative (ties broken by lowest axis
    index).
    """

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray


def sym_to_vec(m: np.ndarray) -> np.ndarray:
    """Pack a symmetric 3x3 matrix into (xx, xy, xz, yy, yz, zz)."""
    m = np.asarray(m, dtype=np.float64)
    return np.array([m[0, 0], m[0, 1], m[0, 2], m[1, 1], m[1, 2], m[2, 2]])


def vec_to_sym(v: np.ndarray) -> np.ndarray:
    """Unpack (xx, xy, xz, yy, yz, zz) into a symmetric 3x3 matrix."""
    v = np.asarray(v, dtype=np.float64)
    return np.array(
        [
            [v[0], v[1], v[2]],
            [v[1], v[3], v[4]],
            [v[2], v[4], v[5]],
        ]
    )


def sym_to_vec_field(m: np.ndarray) -> np.ndarray:
    """Pack (..., 3, 3) symmetric matrices into (..., 6) component arrays."""
    m = np.asarray(m, dtype=np.float64)
    return np.stack(
        [m[..., 0, 0], m[..., 0, 1], m[..., 0, 2], m[..., 1, 1], m[..., 1, 2], m[..., 2, 2]],
        axis=-1,
    )


def vec_to_sym_field(v: np.ndarray) -> np.ndarray:
    """Unpack (..., 6) component arrays into (..., 3, 3) symmetric matrices."""
    v = np.asarray(v, dtype=np.float64)
    out = np.empty(v.shape[:-1] + (3, 3), dtype=np.float64)
    out[..., 0, 0] = v[..., 0]
    out[..., 0, 1] = out[..., 1, 0] = v[..., 1]
    out[..., 0, 2] = out[..., 2, 0] = v[..., 2]
    out[..., 1, 1] = v[..., 3]
    out[..., 1, 2] = out[..., 2, 1] = v[..., 4]
    out[..., 2, 2] = v[..., 5]
    return out


def _as_sym3(m) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.shape == (6,):
        m = vec_to_sym(m)
    if m.shape != (3, 3):
        raise ValueError("expected a 3x3 symmetric matrix or a 6-vector")
    if not np.all(np.isfinite(m)):
        raise ValueError("non-finite symmetric matrix")
    return 0.5 * (m + m.T)


def _apply_sign_convention(q: np.ndarray) -> np.ndarray:
    """Flip eigenvector columns so the largest-|.| component is >= 0."""
    q = np.array(q, copy=True)
    if q.ndim == 2:
        for c in range(3):
            col = q[:, c]
            i = int(np.argmax(np.abs(col)))
            if col[i] < 0:
                q[:, c] = -col
        return q
    # batched (..., 3, 3)
    mags = np.abs(q)
    lead = np.argmax(mags, axis=-2)  # (..., 3) row index of lead per column
    lead_vals = np.take_along_axis(q, lead[..., None, :], axis=-2)[..., 0, :]
    sign = np.where(lead_vals < 0, -1.0, 1.0)
    return q * sign[..., None, :]


def eig_sym3(m) -> EigenDecomp3:
    """Eigen-decompose a symmetric 3x3 matrix with deterministic conventions.

    Parameters
    ----------
    m : (3, 3) array or (6,) component vector
        Symmetric matrix.

    Returns
    -------
    EigenDecomp3
        Eigenvalues ascending in |lambda|, orthonormal column eigenvectors.
    """
    m = _as_sym3(m)
    w, q = np.linalg.eigh(m)
    order = np.argsort(np.abs(w), kind="stable")
    w = w[order]
    q = q[:, order]
    q = _apply_sign_convention(q)
    return EigenDecomp3(eigenvalues=w, eigenvectors=q)


def eig_sym3_field(m: np.ndarray):
    """Batched eig_sym3 over (..., 3, 3) symmetric matrices.

    Returns (eigenvalues (..., 3), eigenvectors (..., 3, 3)) under the same
    ordering and sign conventions as eig_sym3.
    """
    m = np.asarray(m, dtype=np.float64)
    w, q = np.linalg.eigh(m)
    order = np.argsort(np.abs(w), axis=-1, kind="stable")
    w = np.take_along_axis(w, order, axis=-1)
    q = np.take_along_axis(q, order[..., None, :], axis=-1)
    q = _apply_sign_convention(q)
    return w, q


def spd_log(m, context: str = "") -> np.ndarray:
    """Matrix logarithm of an SPD matrix as a 6-component vector.

    Eigenvalues in (-1e-6, EPS_SPD) are clamped to EPS_SPD (counted and
    logged); anything below -1e-6 is a genuine non-SPD input and raises.
    """
    global _clamp_count
    m = _as_sym3(m)
    w, q = np.linalg.eigh(m)
    if np.any(w < _NEG_TOL):
        where = (" at %s" % context) if context else ""
        raise ValueError(
            "matrix is not SPD%s: eigenvalues %s" % (where, w.tolist())
        )
    n_clamped = int(np.sum(w < EPS_SPD))
    if n_clamped:
        _clamp_count += n_clamped
        logger.debug(
            "spd_log clamped %d eigenvalue(s) to %g%s (total %d)",
            n_clamped, EPS_SPD, (" at %s" % context) if context else "", _clamp_count,
        )
        w = np.maximum(w, EPS_SPD)
    log_m = (q * np.log(w)) @ q.T
    return sym_to_vec(log_m)


def spd_exp(v) -> np.ndarray:
    """Matrix exponential of a symmetric log-domain 6-vector (or 3x3)."""
    m = _as_sym3(v)
    w, q = np.linalg.eigh(m)
    return (q * np.exp(w)) @ q.T


def clamp_warning_count() -> int:
    """Number of eigenvalues clamped by spd_log since import."""
    return _clamp_count


def trilinear(data: np.ndarray, x: np.ndarray, y: np.ndarray, z: np.ndarray,
              fill: float | None = None) -> np.ndarray:
    """Trilinear interpolation of data[x, y, z] at continuous coordinates.

    With fill=None coordinates are clamped to the grid (replicate border);
    otherwise samples outside the grid return fill. The incremental blend
    form (v0 + f*(v1 - v0)) keeps constant inputs bit-exact.
    """
    data = np.asarray(data, dtype=np.float64)
    nx, ny, nz = data.shape
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)

    if fill is not None:
        # Rounded rotations park boundary samples a few ulp past the edge;
        # treat those as inside (clamped) rather than filled.
        tol = 1e-9
        outside = (
            (x < -tol) | (x > nx - 1 + tol)
            | (y < -tol) | (y > ny - 1 + tol)
            | (z < -tol) | (z > nz - 1 + tol)
        )

    xc = np.clip(x, 0.0, nx - 1.0)
    yc = np.clip(y, 0.0, ny - 1.0)
    zc = np.clip(z, 0.0, nz - 1.0)
    x0 = np.minimum(np.floor(xc), nx - 2 if nx > 1 else 0).astype(np.int64)
    y0 = np.minimum(np.floor(yc), ny - 2 if ny > 1 else 0).astype(np.int64)
    z0 = np.minimum(np.floor(zc), nz - 2 if nz > 1 else 0).astype(np.int64)
    x0 = np.maximum(x0, 0)
    y0 = np.maximum(y0, 0)
    z0 = np.maximum(z0, 0)
    fx = xc - x0
    fy = yc - y0
    fz = zc - z0
    # Snap unit fractions onto the next base voxel: integer coordinates must
    # gather grid values bit-exactly (lattice-preserving rotations rely on it).
    x0 = np.where(fx >= 1.0, np.minimum(x0 + 1, nx - 1), x0)
    y0 = np.where(fy >= 1.0, np.minimum(y0 + 1, ny - 1), y0)
    z0 = np.where(fz >= 1.0, np.minimum(z0 + 1, nz - 1), z0)
    fx = np.where(fx >= 1.0, 0.0, fx)
    fy = np.where(fy >= 1.0, 0.0, fy)
    fz = np.where(fz >= 1.0, 0.0, fz)
    x1 = np.minimum(x0 + 1, nx - 1)
    y1 = np.minimum(y0 + 1, ny - 1)
    z1 = np.minimum(z0 + 1, nz - 1)

    c000 = data[x0, y0, z0]
    c100 = data[x1, y0, z0]
    c010 = data[x0, y1, z0]
    c110 = data[x1, y1, z0]
    c001 = data[x0, y0, z1]
    c101 = data[x1, y0, z1]
    c011 = data[x0, y1, z1]
    c111 = data[x1, y1, z1]

    c00 = c000 + fx * (c100 - c000)
    c10 = c010 + fx * (c110 - c010)
    c01 = c001 + fx * (c101 - c001)
    c11 = c011 + fx * (c111 - c011)
    c0 = c00 + fy * (c10 - c00)
    c1 = c01 + fy * (c11 - c01)
    out = c0 + fz * (c1 - c0)

    if fill is not None:
        out = np.where(outside, fill, out)
    return out


def _gaussian_blur(data: np.ndarray, sigma: float) -> np.ndarray:
    # Shift by the corner value so constant volumes survive blurring exactly.
    c = data.flat[0]
    return ndimage.gaussian_filter(data - c, sigma=sigma, mode="nearest") + c


def resample(v: ScalarVolume, factor: float) -> ScalarVolume:
    """Resample a volume by a scale factor (voxel-count scaling).

    Downsampling (factor < 1) pre-smooths with a Gaussian of
    sigma = 0.5/factor voxels, then samples trilinearly at voxel centers;
    upsampling is plain trilinear. factor must be in [0.05, 20] and the
    output must keep at least 4 voxels per axis.
    """
    factor = float(factor)
    if not (0.05 <= factor <= 20.0):
        raise ValueError("resample factor %g outside [0.05, 20]" % factor)
    if factor == 1.0:
        return ScalarVolume(data=v.data.copy(), spacing=v.spacing)
    out_dims = tuple(int(round(d * factor)) for d in v.dims)
    if any(d < 4 for d in out_dims):
        raise ValueError(
            "resample output dims %r below the 4-voxel minimum" % (out_dims,)
        )
    return resample_to(v, out_dims, presmooth=factor < 1.0, factor=factor)


def resample_to(v: ScalarVolume, out_dims, presmooth: bool = False,
                factor: float | None = None) -> ScalarVolume:
    """Trilinear resample onto an explicit output grid (center-aligned)."""
    out_dims = tuple(int(d) for d in out_dims)
    data = v.data
    if presmooth:
        f = factor if factor is not None else min(
            out_dims[a] / v.dims[a] for a in range(3)
        )
        data = _gaussian_blur(data, sigma=0.5 / f)
    axes = []
    for a in range(3):
        ratio = v.dims[a] / out_dims[a]
        axes.append((np.arange(out_dims[a], dtype=np.float64) + 0.5) * ratio - 0.5)
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    out = trilinear(data, gx, gy, gz)
    spacing = tuple(v.spacing[a] * v.dims[a] / out_dims[a] for a in range(3))
    return ScalarVolume(data=out, spacing=spacing)


def distance_transform(mask: ScalarVolume) -> ScalarVolume:
    """Exact Euclidean distance to the nearest foreground voxel.

    Foreground = nonzero voxels. Distances apply the anisotropic spacing;
    zero on foreground itself.
    """
    fg = mask.data != 0
    if not fg.any():
        raise ValueError("distance_transform: mask has no foreground voxel")
    dist = ndimage.distance_transform_edt(~fg, sampling=mask.spacing)
    return ScalarVolume(data=dist, spacing=mask.spacing)
