"""Curvilinear Gaussian filterbank construction and steering.

Each dictionary kernel starts from a curvilinear Gaussian impulse: a product
of three 1D Gaussians over warped coordinates

    (x1,  x2 + c0*x1 + c1*x1^2,  x3 + c2*x1^3)

whose sigma triple sets elongation/cross-section and whose curvature triple
bends, tilts, and skews the ridge. The scalar filter response is the
second-order gauge derivative K = omega^T H omega along the normalized
gradient direction omega; the per-voxel tensor patch is the unit-volume
ellipsoid built from the Hessian eigensystem, stored in log coordinates.
Two degenerate kernels (an isotropic LoG and its flat complement, applied to
the image negative at filter time) complete the dictionary.

Derivatives are 4th-order central finite differences with step 1/oversample;
the separable (zero-curvature) closed form serves as the validation oracle in
the tests, not as the production path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volume import (
    eig_sym3_field,
    sym_to_vec_field,
    trilinear,
    vec_to_sym_field,
)

__all__ = [
    "KernelParams",
    "GaugeFrame",
    "DiscreteKernel",
    "Dictionary",
    "KernelConfig",
    "eval_gamma",
    "build_kernel",
    "response_identity_residuals",
    "gauge_frame_at",
    "degenerate_kernels",
    "steer_kernel",
    "default_dictionary",
    "unit_ellipsoid_semiaxes",
    "dump_dictionary",
    "load_dictionary",
]

SUPPORTED_SIZES = (7, 9, 11, 13)

# Gradient magnitudes below this fraction of the patch maximum sit on the
# ridge mid-line, where the gauge direction falls back to the strongest
# Hessian eigenvector.
RIDGE_FRACTION = 1e-8


@dataclass(frozen=True)
class KernelParams:
    """Sigma triple (elongation, two cross-sections) and curvature triple."""

    sigma: tuple
    curvature: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        sigma = tuple(float(s) for s in self.sigma)
        curvature = tuple(float(c) for c in self.curvature)
        if len(sigma) != 3 or len(curvature) != 3:
            raise ValueError("sigma and curvature must be 3-tuples")
        for i, s in enumerate(sigma):
            if not (0.2 <= s <= 10.0):
                raise ValueError(
                    "KernelParams.sigma[%d] = %g outside [0.2, 10]" % (i, s)
                )
        for i, c in enumerate(curvature):
            if not (-1.0 <= c <= 1.0):
                raise ValueError(
                    "KernelParams.curvature[%d] = %g outside [-1, 1]" % (i, c)
                )
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "curvature", curvature)


@dataclass(frozen=True)
class GaugeFrame:
    """Local gradient-aligned frame with the squared projection weights."""

    omega: np.ndarray
    upsilon: np.ndarray
    gamma_weights: np.ndarray


@dataclass(frozen=True)
class DiscreteKernel:
    """Compact-support filter: response patch, impulse patch, tensor patch.

    phi is the integral orientation basis (None for the isotropic degenerate
    kinds). tensor_patch holds log-domain components; every voxel
    exponentiates to an SPD tensor of unit determinant.
    """

    support: int
    k_patch: np.ndarray
    gamma_patch: np.ndarray
    tensor_patch: np.ndarray
    phi: np.ndarray | None
    kind: str
    params: KernelParams | None = None
    phi_deviation: float = 0.0

    def validate(self) -> None:
        s = self.support
        if self.k_patch.shape != (s, s, s):
            raise ValueError("k_patch shape mismatch")
        if abs(float(self.k_patch.mean())) > 1e-10:
            raise ValueError("k_patch mean %g exceeds 1e-10" % self.k_patch.mean())
        if np.any(self.gamma_patch < 0):
            raise ValueError("gamma_patch has negative entries")
        w, _ = eig_sym3_field(vec_to_sym_field(self.tensor_patch))
        dets = np.exp(np.sum(w, axis=-1))
        if np.any(np.abs(dets - 1.0) > 1e-6):
            raise ValueError(
                "tensor_patch determinant deviates by %g"
                % float(np.abs(dets - 1.0).max())
            )
        if self.phi is not None:
            if np.abs(self.phi @ self.phi.T - np.eye(3)).max() > 1e-8:
                raise ValueError("phi is not orthonormal")


@dataclass(frozen=True)
class Dictionary:
    """The filtering dictionary: curvilinear members + tube + degenerates."""

    curvilinear: tuple
    tube: DiscreteKernel
    delta: DiscreteKernel
    flat: DiscreteKernel

    def __post_init__(self):
        if len(self.curvilinear) < 1:
            raise ValueError("Dictionary needs at least one curvilinear kernel")
        supports = {k.support for k in self.all_kernels()}
        if len(supports) != 1:
            raise ValueError("all dictionary kernels must share one support size")

    def all_kernels(self):
        return tuple(self.curvilinear) + (self.tube, self.delta, self.flat)

    def oriented_kernels(self):
        """The kernels that participate in steering (curvilinear + tube)."""
        return tuple(self.curvilinear) + (self.tube,)

    @property
    def support(self) -> int:
        return self.tube.support


def eval_gamma(x, p: KernelParams):
    """Curvilinear Gaussian impulse at points x (.., 3).

    Product of three unit-mass 1D Gaussians over the warped coordinates;
    total and non-negative.
    """
    x = np.asarray(x, dtype=np.float64)
    scalar = x.ndim == 1
    pts = np.atleast_2d(x)
    s1, s2, s3 = p.sigma
    c0, c1, c2 = p.curvature
    x1 = pts[..., 0]
    w2 = pts[..., 1] + c0 * x1 + c1 * x1 * x1
    w3 = pts[..., 2] + c2 * x1 * x1 * x1
    norm = 1.0 / np.sqrt((2.0 * np.pi) ** 3 * (s1 * s2 * s3) ** 2)
    val = norm * np.exp(
        -0.5 * (x1 * x1 / (s1 * s1) + w2 * w2 / (s2 * s2) + w3 * w3 / (s3 * s3))
    )
    return float(val[0]) if scalar else val


# 4th-order central difference stencils.
_D1_OFFSETS = np.array([-2.0, -1.0, 1.0, 2.0])
_D1_WEIGHTS = np.array([1.0, -8.0, 8.0, -1.0]) / 12.0
_D2_OFFSETS = np.array([-2.0, -1.0, 0.0, 1.0, 2.0])
_D2_WEIGHTS = np.array([-1.0, 16.0, -30.0, 16.0, -1.0]) / 12.0


def _fd_grad_hess(points: np.ndarray, p: KernelParams, h: float):
    """Gradient and Hessian of eval_gamma at each point, stencil step h."""
    n = points.shape[0]
    eye = np.eye(3)
    grad = np.zeros((n, 3))
    hess = np.zeros((n, 3, 3))
    for a in range(3):
        for o, w in zip(_D1_OFFSETS, _D1_WEIGHTS):
            grad[:, a] += w * eval_gamma(points + (o * h) * eye[a], p)
        grad[:, a] /= h
        for o, w in zip(_D2_OFFSETS, _D2_WEIGHTS):
            hess[:, a, a] += w * eval_gamma(points + (o * h) * eye[a], p)
        hess[:, a, a] /= h * h
    for a, b in ((0, 1), (0, 2), (1, 2)):
        acc = np.zeros(n)
        for oa, wa in zip(_D1_OFFSETS, _D1_WEIGHTS):
            shifted = points + (oa * h) * eye[a]
            for ob, wb in zip(_D1_OFFSETS, _D1_WEIGHTS):
                acc += wa * wb * eval_gamma(shifted + (ob * h) * eye[b], p)
        acc /= h * h
        hess[:, a, b] = acc
        hess[:, b, a] = acc
    return grad, hess


def unit_ellipsoid_semiaxes(eigenvalues: np.ndarray) -> np.ndarray:
    """Unit-volume semiaxis triple from Hessian eigenvalues (.., 3).

    Input ordered by ascending |lambda|. Ratios |l1|/sqrt(|l2 l3|), |l2|/|l3|
    and 1 are scaled to unit product; degenerate voxels (vanishing strongest
    eigenvalue) collapse to the unit sphere.
    """
    w = np.atleast_2d(np.abs(np.asarray(eigenvalues, dtype=np.float64)))
    a3 = w[..., 2]
    degenerate = a3 <= 0.0
    a3 = np.where(degenerate, 1.0, a3)
    floor = 1e-10 * a3
    a1 = np.maximum(w[..., 0], floor)
    a2 = np.maximum(w[..., 1], floor)
    psi1 = a1 / np.sqrt(a2 * a3)
    psi2 = a2 / a3
    psi3 = np.ones_like(a3)
    psi = np.stack([psi1, psi2, psi3], axis=-1)
    psi *= (psi1 * psi2 * psi3)[..., None] ** (-1.0 / 3.0)
    psi[degenerate] = 1.0
    if np.asarray(eigenvalues).ndim == 1:
        return psi[0]
    return psi.reshape(np.asarray(eigenvalues).shape)


def _support_centers(support: int) -> np.ndarray:
    half = (support - 1) // 2
    ax = np.arange(-half, half + 1, dtype=np.float64)
    gx, gy, gz = np.meshgrid(ax, ax, ax, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=-1)


def _normalize_response(k: np.ndarray) -> np.ndarray:
    k = k - k.mean()
    norm = np.linalg.norm(k)
    if norm == 0:
        raise ValueError("degenerate kernel: zero response everywhere")
    return k / norm


def _polar_orthonormalize(m: np.ndarray):
    """Nearest rotation to m (SVD polar factor, det forced to +1)."""
    u, _, vt = np.linalg.svd(m)
    r = u @ vt
    if np.linalg.det(r) < 0:
        u[:, -1] = -u[:, -1]
        r = u @ vt
    scaled = m * (np.sqrt(3.0) / np.linalg.norm(m))
    deviation = float(np.linalg.norm(scaled - r))
    return r, deviation


def build_kernel(p: KernelParams, support: int = 11, oversample: int = 4,
                 kind: str = "curvilinear") -> DiscreteKernel:
    """Construct a dictionary kernel on a cubic support.

    At each voxel center the gradient and Hessian of the impulse are taken by
    4th-order central differences (step 1/oversample); the response is the
    second derivative along the unit gradient (negated so bright tubes score
    positive, then zero-meaned and L2-normalized); the tensor patch is the
    log of the unit-volume ellipsoid aligned with the Hessian eigenvectors;
    phi is the impulse-weighted average eigenbasis, polar-orthonormalized.
    """
    if support not in SUPPORTED_SIZES:
        raise ValueError("support must be one of %r, got %r" % (SUPPORTED_SIZES, support))
    if oversample < 2:
        raise ValueError("oversample must be >= 2, got %r" % oversample)
    h = 1.0 / float(oversample)
    centers = _support_centers(support)
    gamma = eval_gamma(centers, p)
    grad, hess = _fd_grad_hess(centers, p, h)

    gnorm = np.linalg.norm(grad, axis=1)
    gmax = gnorm.max()
    if gmax == 0.0:
        raise ValueError("degenerate support: gradient vanishes everywhere")
    on_ridge = gnorm <= RIDGE_FRACTION * gmax

    w, q = eig_sym3_field(hess)
    omega = np.where(
        on_ridge[:, None],
        q[:, :, 2],
        grad / np.where(gnorm[:, None] == 0, 1.0, gnorm[:, None]),
    )
    k = np.einsum("ni,nij,nj->n", omega, hess, omega)

    psi = unit_ellipsoid_semiaxes(w)
    log_psi = np.log(psi)
    # trace-free in log coordinates keeps the exponentiated determinant at 1
    log_psi -= log_psi.mean(axis=-1, keepdims=True)
    tensor = np.einsum("nij,nj,nkj->nik", q, log_psi, q)

    phi_raw = np.einsum("n,nij->ij", gamma, q)
    phi, deviation = _polar_orthonormalize(phi_raw)

    s = support
    return DiscreteKernel(
        support=s,
        k_patch=_normalize_response(-k).reshape(s, s, s),
        gamma_patch=gamma.reshape(s, s, s),
        tensor_patch=sym_to_vec_field(tensor).reshape(s, s, s, 6),
        phi=phi,
        kind=kind,
        params=p,
        phi_deviation=deviation,
    )


def response_identity_residuals(p: KernelParams, support: int = 11,
                                oversample: int = 4):
    """Direct gauge response vs its eigenweight expansion, off-ridge voxels.

    At every support voxel with non-vanishing gradient the second derivative
    along omega and the sum of eigenvalues weighted by the squared
    omega-components are the same number in exact arithmetic. Returns
    (relative residuals, gamma-weight sums) over those voxels.
    """
    centers = _support_centers(support)
    grad, hess = _fd_grad_hess(centers, p, 1.0 / oversample)
    gnorm = np.linalg.norm(grad, axis=1)
    keep = gnorm > RIDGE_FRACTION * gnorm.max()
    omega = grad[keep] / gnorm[keep, None]
    w, q = eig_sym3_field(hess[keep])
    direct = np.einsum("ni,nij,nj->n", omega, hess[keep], omega)
    weights = np.einsum("nij,ni->nj", q, omega) ** 2
    expanded = np.sum(weights * w, axis=-1)
    scale = np.abs(direct).max()
    residuals = np.abs(direct - expanded) / scale
    return residuals, weights.sum(axis=-1)


def gauge_frame_at(x, p: KernelParams, oversample: int = 4) -> GaugeFrame:
    """Gradient-aligned frame of the impulse at a point.

    upsilon is the deterministic least-aligned-axis completion of omega; the
    gamma weights are the squared components of omega in the Hessian
    eigenbasis and sum to 1.
    """
    pts = np.asarray(x, dtype=np.float64).reshape(1, 3)
    grad, hess = _fd_grad_hess(pts, p, 1.0 / oversample)
    w, q = eig_sym3_field(hess)
    g = grad[0]
    gn = np.linalg.norm(g)
    omega = q[0][:, 2] if gn == 0 else g / gn
    axis = int(np.argmin(np.abs(omega)))
    e = np.zeros(3)
    e[axis] = 1.0
    upsilon = e - omega * omega[axis]
    upsilon /= np.linalg.norm(upsilon)
    gamma_weights = (q[0].T @ omega) ** 2
    return GaugeFrame(omega=omega, upsilon=upsilon, gamma_weights=gamma_weights)


def degenerate_kernels(sigma_delta: float = 0.5, support: int = 11):
    """The isotropic impulse-contrast kernel and its flat complement.

    delta is the (sign-flipped, normalized) Laplacian of an isotropic
    Gaussian; flat negates delta's DC-free profile and is convolved with the
    image negative at filter time. Both carry identity tensors everywhere.
    The flat impulse is uniform with unit mass over the support, matching the
    unit integral of the Gaussian impulses.
    """
    if not (0.0 < sigma_delta <= 1.0):
        raise ValueError("sigma_delta must lie in (0, 1], got %r" % sigma_delta)
    if support not in SUPPORTED_SIZES:
        raise ValueError("support must be one of %r, got %r" % (SUPPORTED_SIZES, support))
    s2 = sigma_delta * sigma_delta
    centers = _support_centers(support)
    p_iso = KernelParams(sigma=(sigma_delta,) * 3)
    gamma = eval_gamma(centers, p_iso)
    r2 = np.sum(centers * centers, axis=1)
    log_response = gamma * (r2 / (s2 * s2) - 3.0 / s2)

    s = support
    zeros = np.zeros((s, s, s, 6))
    delta_k = _normalize_response(-log_response).reshape(s, s, s)
    delta = DiscreteKernel(
        support=s,
        k_patch=delta_k,
        gamma_patch=gamma.reshape(s, s, s),
        tensor_patch=zeros,
        phi=None,
        kind="delta",
        params=p_iso,
    )
    flat = DiscreteKernel(
        support=s,
        k_patch=-delta_k,
        gamma_patch=np.full((s, s, s), 1.0 / s**3),
        tensor_patch=zeros.copy(),
        phi=None,
        kind="flat",
        params=None,
    )
    return delta, flat


def steer_kernel(k: DiscreteKernel, omega_basis: np.ndarray) -> DiscreteKernel:
    """Rotate a kernel so its orientation basis lands on omega_basis.

    The rotation R = omega_basis . phi^T resamples the response and impulse
    patches trilinearly about the support center (zero fill outside); tensor
    components are resampled in the log domain and conjugated by R, which
    preserves the unit determinant exactly. The L2 norm of the response is
    preserved up to trilinear loss; no renormalization is applied.
    """
    if k.kind not in ("curvilinear", "tube"):
        raise ValueError("cannot steer kernel of kind %r" % k.kind)
    b = np.asarray(omega_basis, dtype=np.float64)
    if b.shape != (3, 3) or np.abs(b @ b.T - np.eye(3)).max() > 1e-8:
        raise ValueError("omega_basis is not orthonormal within 1e-8")

    r = b @ k.phi.T
    s = k.support
    half = (s - 1) / 2.0
    centers = _support_centers(s)
    # out(y) = in(R^T y) in centered coordinates
    src = centers @ r + half
    sx, sy, sz = src[:, 0], src[:, 1], src[:, 2]

    k_patch = trilinear(k.k_patch, sx, sy, sz, fill=0.0).reshape(s, s, s)
    gamma_patch = trilinear(k.gamma_patch, sx, sy, sz, fill=0.0).reshape(s, s, s)

    comps = [
        trilinear(k.tensor_patch[..., c], sx, sy, sz, fill=0.0) for c in range(6)
    ]
    logs = vec_to_sym_field(np.stack(comps, axis=-1))
    rotated = np.einsum("ij,njk,lk->nil", r, logs, r)
    tensor_patch = sym_to_vec_field(rotated).reshape(s, s, s, 6)

    return DiscreteKernel(
        support=s,
        k_patch=k_patch,
        gamma_patch=gamma_patch,
        tensor_patch=tensor_patch,
        phi=b,
        kind=k.kind,
        params=k.params,
        phi_deviation=k.phi_deviation,
    )


_DEFAULT_CURVILINEAR = (
    # straight / bent / strongly bent / tilted / asymmetric
    # Cross-section sigma of 2 keeps the on-axis response positive for
    # vessels up to that radius; narrower gauges flip sign on wide tubes.
    ((4.0, 2.0, 2.0), (0.0, 0.0, 0.0)),
    ((4.0, 2.0, 2.0), (0.0, 0.15, 0.0)),
    ((4.0, 2.0, 2.0), (0.0, 0.3, 0.0)),
    ((4.0, 2.0, 2.0), (0.0, 0.0, 0.05)),
    ((4.0, 2.0, 2.0), (0.3, 0.1, 0.0)),
)


@dataclass(frozen=True)
class KernelConfig:
    """Dictionary construction parameters with the artifact defaults."""

    support: int = 11
    oversample: int = 4
    sigma_delta: float = 0.5
    curvilinear: tuple = _DEFAULT_CURVILINEAR
    tube: tuple = ((4.0, 2.0, 2.0), (0.0, 0.0, 0.0))

    def __post_init__(self):
        if self.support not in SUPPORTED_SIZES:
            raise ValueError(
                "KernelConfig.support = %r not in %r" % (self.support, SUPPORTED_SIZES)
            )
        if self.oversample < 2:
            raise ValueError("KernelConfig.oversample = %r below 2" % self.oversample)
        if not (0.0 < self.sigma_delta <= 1.0):
            raise ValueError(
                "KernelConfig.sigma_delta = %r outside (0, 1]" % self.sigma_delta
            )
        if len(self.curvilinear) < 1:
            raise ValueError("KernelConfig.curvilinear must list >= 1 kernel")


def default_dictionary(config: KernelConfig | None = None) -> Dictionary:
    """Build the default dictionary (validating every member)."""
    cfg = config or KernelConfig()
    curvilinear = []
    for sigma, curvature in cfg.curvilinear:
        p = KernelParams(sigma=sigma, curvature=curvature)
        curvilinear.append(build_kernel(p, cfg.support, cfg.oversample))
    tube = build_kernel(
        KernelParams(sigma=cfg.tube[0], curvature=cfg.tube[1]),
        cfg.support,
        cfg.oversample,
        kind="tube",
    )
    delta, flat = degenerate_kernels(cfg.sigma_delta, cfg.support)
    d = Dictionary(
        curvilinear=tuple(curvilinear), tube=tube, delta=delta, flat=flat
    )
    for kern in d.all_kernels():
        kern.validate()
    return d


# ---------------------------------------------------------------------------
# dictionary dump/load (test fixtures, reproducibility)

def dump_dictionary(d: Dictionary, directory) -> None:
    """Write a dictionary as raw patches plus a text manifest."""
    from pathlib import Path

    from .volio import _write_raw

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = ["vesseltrace-dictionary v1", "support %d" % d.support]
    names = ["curv%d" % i for i in range(len(d.curvilinear))] + [
        "tube", "delta", "flat"
    ]
    for name, kern in zip(names, d.all_kernels()):
        _write_raw(directory / ("%s_k.vraw" % name), kern.k_patch,
                   (1.0, 1.0, 1.0), "float64")
        _write_raw(directory / ("%s_gamma.vraw" % name), kern.gamma_patch,
                   (1.0, 1.0, 1.0), "float64")
        _write_raw(directory / ("%s_tensor.vraw" % name), kern.tensor_patch,
                   (1.0, 1.0, 1.0), "float64")
        phi = "none" if kern.phi is None else " ".join(
            "%.17g" % v for v in kern.phi.ravel()
        )
        if kern.params is None:
            params = "none"
        else:
            params = " ".join(
                "%.17g" % v for v in (kern.params.sigma + kern.params.curvature)
            )
        lines.append("kernel %s kind %s params %s phi %s" % (name, kern.kind, params, phi))
    (directory / "manifest.txt").write_text("\n".join(lines) + "\n")


def load_dictionary(directory) -> Dictionary:
    """Load a dictionary written by dump_dictionary."""
    from pathlib import Path

    from .volio import _read_raw

    directory = Path(directory)
    lines = (directory / "manifest.txt").read_text().splitlines()
    if lines[0] != "vesseltrace-dictionary v1":
        raise ValueError("unrecognized dictionary manifest")
    kernels = {}
    order = []
    for line in lines[2:]:
        tokens = line.split()
        name = tokens[1]
        kind = tokens[tokens.index("kind") + 1]
        pi = tokens.index("params") + 1
        fi = tokens.index("phi") + 1
        if tokens[pi] == "none":
            params = None
        else:
            vals = [float(t) for t in tokens[pi:pi + 6]]
            params = KernelParams(sigma=tuple(vals[:3]), curvature=tuple(vals[3:]))
        if tokens[fi] == "none":
            phi = None
        else:
            phi = np.array([float(t) for t in tokens[fi:fi + 9]]).reshape(3, 3)
        k_patch, _ = _read_raw(directory / ("%s_k.vraw" % name))
        gamma_patch, _ = _read_raw(directory / ("%s_gamma.vraw" % name))
        tensor_patch, _ = _read_raw(directory / ("%s_tensor.vraw" % name))
        kernels[name] = DiscreteKernel(
            support=k_patch.shape[0],
            k_patch=k_patch,
            gamma_patch=gamma_patch,
            tensor_patch=tensor_patch,
            phi=phi,
            kind=kind,
            params=params,
        )
        order.append(name)
    curv = tuple(kernels[n] for n in order if n.startswith("curv"))
    return Dictionary(
        curvilinear=curv,
        tube=kernels["tube"],
        delta=kernels["delta"],
        flat=kernels["flat"],
    )
