"""Multiscale analysis/synthesis of the vesselness map and tensor field.

The pipeline per scale: a coarse tubular saliency map (sum of rectified
responses of the steered tube kernel over an icosphere orientation set),
seed/orientation detection on that map, then block-wise overlap-add
filtering. Each seed-containing block is Hann-windowed, convolved with every
oriented dictionary kernel steered to the block's representative seed
orientations, and the rectified responses drive both the connected
vesselness map (their plain sum) and a tensor sweep that scatters each
steered tensor patch, weighted by response, impulse value, and a patch
smoothing window, onto the neighborhood. Block results are overlap-added
with exact 50%-overlap Hann weights; the tensor numerators and weights are
assembled raw and normalized once, so overlapping blocks blend in
log-Euclidean coordinates. Scales are integrated by 1/s-weighted upsampled
sums with a vesselness-weighted tensor average.

Everything is deterministic for a fixed input: blocks may be filtered by a
thread pool, but reduction happens in fixed block order, so worker count
never changes a single output bit.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import fft as sp_fft

from .kernels import Dictionary, DiscreteKernel, steer_kernel
from .volume import (
    ScalarVolume,
    TensorFieldLE,
    eig_sym3_field,
    resample,
    resample_to,
    vec_to_sym_field,
)

__all__ = [
    "OrientationSet",
    "SeedSet",
    "OlaGrid",
    "ScaleStack",
    "icosphere_bases",
    "tubular_saliency",
    "detect_seeds",
    "filter_block",
    "synthesize_scale",
    "multiscale_synthesize",
    "cluster_orientations",
    "ola_weight_field",
    "hann_periodic",
    "patch_window",
]

WEIGHT_FLOOR = 1e-12
N_MAX_ORIENTATIONS = 8
CLUSTER_STOP_DEG = 15.0


@dataclass(frozen=True)
class OrientationSet:
    """Orthonormal orientation bases, first column = direction."""

    bases: np.ndarray  # (n, 3, 3)

    def __post_init__(self):
        b = np.asarray(self.bases, dtype=np.float64)
        if b.ndim != 3 or b.shape[1:] != (3, 3):
            raise ValueError("bases must be (n, 3, 3)")
        if b.shape[0]:
            gram = np.einsum("nij,nkj->nik", b, b)
            if np.abs(gram - np.eye(3)).max() > 1e-8:
                raise ValueError("bases must be orthonormal within 1e-8")
        object.__setattr__(self, "bases", b)

    def __len__(self) -> int:
        return self.bases.shape[0]


@dataclass(frozen=True)
class SeedSet:
    """Seed voxels with their local Hessian eigenvector bases."""

    voxels: np.ndarray  # (n, 3) int
    orientations: np.ndarray  # (n, 3, 3)

    def __post_init__(self):
        v = np.asarray(self.voxels, dtype=np.int64).reshape(-1, 3)
        o = np.asarray(self.orientations, dtype=np.float64).reshape(-1, 3, 3)
        if v.shape[0] != o.shape[0]:
            raise ValueError("one orientation basis per seed required")
        object.__setattr__(self, "voxels", v)
        object.__setattr__(self, "orientations", o)

    def __len__(self) -> int:
        return self.voxels.shape[0]


@dataclass(frozen=True)
class OlaGrid:
    """50%-overlap block tiling with per-block seed membership."""

    block_edge: int
    dims: tuple
    blocks: tuple  # ((origin xyz), (seed indices)) per block
    overlap: float = 0.5

    @property
    def hop(self) -> int:
        return self.block_edge // 2

    def seeded_blocks(self):
        return tuple(b for b in self.blocks if len(b[1]) > 0)


def _check_scales(scales) -> tuple:
    s = tuple(float(x) for x in scales)
    if not s or s[0] != 1.0:
        raise ValueError("scales must start at 1.0")
    if any(not (0.0 < x <= 1.0) for x in s):
        raise ValueError("scales must lie in (0, 1]")
    if any(b >= a for a, b in zip(s, s[1:])):
        raise ValueError("scales must be strictly descending")
    return s


@dataclass(frozen=True)
class ScaleStack:
    """Per-scale synthesis results awaiting cross-scale integration."""

    scales: tuple
    cvms: tuple
    tensor_fields: tuple

    def __post_init__(self):
        object.__setattr__(self, "scales", _check_scales(self.scales))


def hann_periodic(n: int) -> np.ndarray:
    """Periodic Hann window: adjacent half-window shifts sum to exactly 1."""
    if n < 2 or n % 2:
        raise ValueError("periodic Hann window length must be even, >= 2")
    return np.sin(np.pi * np.arange(n) / n) ** 2


def patch_window(support: int) -> np.ndarray:
    """Separable symmetric Hann over a kernel support, zero at the faces."""
    # cos(+-pi) rounds to -1 exactly, so both faces are exact zeros
    w = 0.5 + 0.5 * np.cos(np.linspace(-np.pi, np.pi, support))
    return w[:, None, None] * w[None, :, None] * w[None, None, :]


# ---------------------------------------------------------------------------
# orientation sampling

_GOLDEN = (1.0 + np.sqrt(5.0)) / 2.0

_ICO_VERTS = np.array([
    (-1, _GOLDEN, 0), (1, _GOLDEN, 0), (-1, -_GOLDEN, 0), (1, -_GOLDEN, 0),
    (0, -1, _GOLDEN), (0, 1, _GOLDEN), (0, -1, -_GOLDEN), (0, 1, -_GOLDEN),
    (_GOLDEN, 0, -1), (_GOLDEN, 0, 1), (-_GOLDEN, 0, -1), (-_GOLDEN, 0, 1),
], dtype=np.float64)

_ICO_FACES = [
    (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
    (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
    (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
    (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
]


def _subdivide(verts, faces):
    verts = list(verts)
    cache = {}

    def midpoint(a, b):
        key = (a, b) if a < b else (b, a)
        if key not in cache:
            m = verts[a] + verts[b]
            verts.append(m / np.linalg.norm(m))
            cache[key] = len(verts) - 1
        return cache[key]

    out = []
    for a, b, c in faces:
        ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
        out.extend([(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)])
    return verts, out


def _complete_basis(d: np.ndarray) -> np.ndarray:
    """Right-handed orthonormal basis with first column d."""
    axis = int(np.argmin(np.abs(d)))
    e = np.zeros(3)
    e[axis] = 1.0
    a = e - d * d[axis]
    a /= np.linalg.norm(a)
    return np.stack([d, a, np.cross(d, a)], axis=1)


def icosphere_bases(n: int) -> OrientationSet:
    """Quasi-uniform orientation bases from a subdivided icosahedron.

    Vertices are projected to the unit sphere and antipodal pairs collapse to
    one direction; each direction is completed to a right-handed basis via
    the deterministic least-aligned-axis rule.
    """
    if n not in (0, 1, 2, 3):
        raise ValueError("subdivision level must be in {0, 1, 2, 3}, got %r" % n)
    verts = [v / np.linalg.norm(v) for v in _ICO_VERTS]
    faces = _ICO_FACES
    for _ in range(n):
        verts, faces = _subdivide(verts, faces)

    seen = {}
    for v in verts:
        d = np.asarray(v)
        if d[0] < 0 or (d[0] == 0 and (d[1] < 0 or (d[1] == 0 and d[2] < 0))):
            d = -d
        key = tuple(np.round(d, 12))
        if key not in seen:
            seen[key] = d
    dirs = sorted(seen.values(), key=lambda d: tuple(d))
    return OrientationSet(bases=np.stack([_complete_basis(d) for d in dirs]))


def rotation_angle(a: np.ndarray, b: np.ndarray) -> float:
    """Geodesic distance on the rotation group, radians."""
    c = 0.5 * (np.trace(a.T @ b) - 1.0)
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def cluster_orientations(bases: np.ndarray, n_max: int = N_MAX_ORIENTATIONS,
                         stop_deg: float = CLUSTER_STOP_DEG) -> np.ndarray:
    """Greedy farthest-basis selection of <= n_max representatives.

    Starts from the first basis and repeatedly adds the one farthest (in
    rotation-geodesic distance) from everything selected, stopping early
    once the remainder all sit within stop_deg of a representative.
    """
    bases = np.asarray(bases, dtype=np.float64).reshape(-1, 3, 3)
    n = bases.shape[0]
    if n == 0:
        raise ValueError("cannot cluster an empty orientation list")
    stop = np.deg2rad(stop_deg)
    chosen = [0]
    min_dist = np.array([rotation_angle(bases[0], b) for b in bases])
    while len(chosen) < min(n_max, n):
        cand = int(np.argmax(min_dist))
        if min_dist[cand] <= stop:
            break
        chosen.append(cand)
        cand_dist = np.array([rotation_angle(bases[cand], b) for b in bases])
        min_dist = np.minimum(min_dist, cand_dist)
    return bases[chosen]


# ---------------------------------------------------------------------------
# saliency and seeds

def _fft_shape(dims, support):
    return tuple(sp_fft.next_fast_len(d + support - 1, real=True) for d in dims)


def _same_slices(dims, support):
    lead = (support - 1) // 2
    return tuple(slice(lead, lead + d) for d in dims)


def _fft_convolve_same(data_f, patch, shape, out_slices):
    patch_f = sp_fft.rfftn(patch, s=shape)
    full = sp_fft.irfftn(data_f * patch_f, s=shape)
    return full[out_slices]


def tubular_saliency(v_dwn: ScalarVolume, tube: DiscreteKernel,
                     omega: OrientationSet) -> ScalarVolume:
    """Rectified steered-tube response summed over an orientation set.

    The volume minimum is subtracted before the zero-padded convolution;
    the kernel is zero-mean so interior responses are unchanged, while the
    border no longer registers the padding cliff of a bright background.
    """
    if tube.support > min(v_dwn.dims):
        raise ValueError("kernel support exceeds the smallest volume dim")
    dims = v_dwn.dims
    shape = _fft_shape(dims, tube.support)
    out = _same_slices(dims, tube.support)
    data_f = sp_fft.rfftn(v_dwn.data - v_dwn.data.min(), s=shape)
    acc = np.zeros(dims)
    for basis in omega.bases:
        steered = steer_kernel(tube, basis)
        resp = _fft_convolve_same(data_f, steered.k_patch, shape, out)
        acc += np.maximum(0.0, resp)
    return ScalarVolume(data=acc, spacing=v_dwn.spacing)


def _grad_hess_field(data: np.ndarray):
    """Central-difference gradient and 6-component Hessian of a volume."""
    gx, gy, gz = np.gradient(data)
    hxx = np.gradient(gx, axis=0)
    hxy = np.gradient(gx, axis=1)
    hxz = np.gradient(gx, axis=2)
    hyy = np.gradient(gy, axis=1)
    hyz = np.gradient(gy, axis=2)
    hzz = np.gradient(gz, axis=2)
    return (gx, gy, gz), (hxx, hxy, hxz, hyy, hyz, hzz)


def detect_seeds(v_tube: ScalarVolume, p: float) -> SeedSet:
    """Seed voxels of the saliency map with their Hessian eigenbases.

    A seed is a voxel where the saliency Laplacian is negative, the full
    Hessian is negative definite, and the value reaches the p-quantile of
    the positive saliency samples. Raising p rejects more of the noise
    floor at the cost of detail, so zero seeds raises with that advice.
    """
    if not (0.0 < p < 1.0):
        raise ValueError("quantile p must lie in (0, 1), got %r" % p)
    data = v_tube.data
    positives = data[data > 0]
    if positives.size == 0:
        raise ValueError("saliency map has no positive values")
    threshold = np.quantile(positives, p)

    _, (hxx, hxy, hxz, hyy, hyz, hzz) = _grad_hess_field(data)
    laplacian = hxx + hyy + hzz
    # negative definiteness via alternating leading principal minors
    m1 = hxx < 0
    m2 = hxx * hyy - hxy * hxy > 0
    det3 = (
        hxx * (hyy * hzz - hyz * hyz)
        - hxy * (hxy * hzz - hyz * hxz)
        + hxz * (hxy * hyz - hyy * hxz)
    )
    mask = (laplacian < 0) & m1 & m2 & (det3 < 0) & (data >= threshold)

    voxels = np.argwhere(mask)
    if voxels.shape[0] == 0:
        raise ValueError(
            "no seeds at quantile p=%g; lower p to admit more detail "
            "(higher p rejects more of the noise floor but keeps fewer "
            "structures)" % p
        )
    hess = np.stack(
        [comp[mask] for comp in (hxx, hxy, hxz, hyy, hyz, hzz)], axis=-1
    )
    _, q = eig_sym3_field(vec_to_sym_field(hess))
    dets = np.linalg.det(q)
    q[dets < 0, :, 2] *= -1.0
    return SeedSet(voxels=voxels, orientations=q)


# ---------------------------------------------------------------------------
# block filtering

def _filter_block_raw(block: np.ndarray, negated: np.ndarray,
                      dictionary: Dictionary, theta: np.ndarray):
    """Windowed block -> (cvm, tensor numerator, tensor weight), all raw.

    The tensor sweep scatters each steered patch around every voxel with
    weight response * impulse * patch window; as a gather per output voxel
    that is exactly a convolution of the response with the weighted patch,
    so each term costs one FFT product. The isotropic degenerate kernels
    respond to the negated block, carry zero log-tensors (identity), and
    being orientation-free enter once per orientation, hence the len(theta)
    multiplier on their weight.

    Accumulation is buffered per orientation so that a repeated basis adds
    a bitwise-identical buffer twice: m copies of an orientation scale its
    contribution by exactly m.
    """
    be = block.shape[0]
    support = dictionary.support
    dims = (be, be, be)
    shape = _fft_shape(dims, support)
    out = _same_slices(dims, support)
    win = hann_periodic(be)
    window = win[:, None, None] * win[None, :, None] * win[None, None, :]
    xi = patch_window(support)

    block_f = sp_fft.rfftn(block * window, s=shape)
    negated_f = sp_fft.rfftn(negated * window, s=shape)

    cvm = np.zeros(dims)
    num = np.zeros(dims + (6,))
    weight = np.zeros(dims)

    for basis in theta:
        cvm_t = np.zeros(dims)
        num_t = np.zeros(dims + (6,))
        w_t = np.zeros(dims)
        for kern in dictionary.oriented_kernels():
            sk = steer_kernel(kern, basis)
            resp = _fft_convolve_same(block_f, sk.k_patch, shape, out)
            v_s = np.maximum(0.0, resp)
            cvm_t += v_s
            v_s_f = sp_fft.rfftn(v_s, s=shape)
            g = sk.gamma_patch * xi
            w_t += _fft_convolve_same(v_s_f, g, shape, out)
            for c in range(6):
                num_t[..., c] += _fft_convolve_same(
                    v_s_f, g * sk.tensor_patch[..., c], shape, out
                )
        cvm += cvm_t
        num += num_t
        weight += w_t

    n_theta = float(len(theta))
    for kern in (dictionary.delta, dictionary.flat):
        resp = _fft_convolve_same(negated_f, kern.k_patch, shape, out)
        v_s = np.maximum(0.0, resp)
        v_s_f = sp_fft.rfftn(v_s, s=shape)
        g = kern.gamma_patch * xi
        # zero log-tensor: contributes to the weight only
        weight += n_theta * _fft_convolve_same(v_s_f, g, shape, out)
    return cvm, num, weight


def filter_block(block: ScalarVolume, dictionary: Dictionary,
                 theta: OrientationSet, negated_block: ScalarVolume):
    """One block's connected-vesselness map and normalized tensor field."""
    if len(theta) == 0:
        raise ValueError("theta must contain at least one orientation")
    if block.dims != negated_block.dims:
        raise ValueError("block and negated_block dims differ")
    cvm, num, weight = _filter_block_raw(
        block.data, negated_block.data, dictionary, theta.bases
    )
    tf = _normalize_tensor_sum(num, weight)
    return (
        ScalarVolume(data=cvm, spacing=block.spacing),
        TensorFieldLE(data=tf, spacing=block.spacing),
    )


def _normalize_tensor_sum(num: np.ndarray, weight: np.ndarray) -> np.ndarray:
    covered = weight >= WEIGHT_FLOOR
    tf = np.zeros_like(num)
    np.divide(num, weight[..., None], out=tf, where=covered[..., None])
    return tf


def _trace_free(tf: np.ndarray) -> np.ndarray:
    mean = (tf[..., 0] + tf[..., 3] + tf[..., 5]) / 3.0
    tf = tf.copy()
    for c in (0, 3, 5):
        tf[..., c] -= mean
    return tf


# ---------------------------------------------------------------------------
# per-scale synthesis

def build_ola_grid(dims, block_edge: int, seeds: SeedSet) -> OlaGrid:
    hop = block_edge // 2
    origins = [
        (ox, oy, oz)
        for ox in range(0, dims[0], hop)
        for oy in range(0, dims[1], hop)
        for oz in range(0, dims[2], hop)
    ]
    blocks = []
    sv = seeds.voxels
    for o in origins:
        inside = np.all((sv >= o) & (sv < np.asarray(o) + block_edge), axis=1)
        blocks.append((o, tuple(np.flatnonzero(inside).tolist())))
    return OlaGrid(block_edge=block_edge, dims=tuple(dims), blocks=tuple(blocks))


def ola_weight_field(dims, block_edge: int) -> np.ndarray:
    """Summed analysis-window weights of the block tiling.

    Equals 1 exactly past the first half block from the low border (the
    50%-overlap Hann pairs are exact complements); the outer half-block rim
    is attenuated.
    """
    hop = block_edge // 2
    win = hann_periodic(block_edge)
    for axis, d in enumerate(dims):
        line = np.zeros(d)
        for o in range(0, d, hop):
            n = min(block_edge, d - o)
            line[o:o + n] += win[:n]
        if axis == 0:
            wx = line
        elif axis == 1:
            wy = line
        else:
            wz = line
    return wx[:, None, None] * wy[None, :, None] * wz[None, None, :]


def _extract_block(data: np.ndarray, origin, block_edge: int) -> np.ndarray:
    """Copy a block, zero-padded where it runs past the volume."""
    out = np.zeros((block_edge,) * 3)
    sl_src = []
    sl_dst = []
    for axis in range(3):
        lo = origin[axis]
        hi = min(lo + block_edge, data.shape[axis])
        sl_src.append(slice(lo, hi))
        sl_dst.append(slice(0, hi - lo))
    out[tuple(sl_dst)] = data[tuple(sl_src)]
    return out


def synthesize_scale(v_dwn: ScalarVolume, dictionary: Dictionary,
                     p: float = 0.85, n_ico: int = 1, block_edge: int = 32,
                     workers: int = 1, seeds: SeedSet | None = None):
    """Single-scale CVM + tensor field synthesis.

    Saliency -> seeds -> seed-containing blocks filtered with their (capped)
    representative seed orientations -> overlap-add of vesselness, tensor
    numerator, and tensor weight -> normalization and trace-free projection.
    A constant volume, or one whose saliency never goes positive, yields an
    empty seed set, zero CVM, and the identity tensor field rather than an
    error; a positive saliency map that produces no seeds propagates the
    detect_seeds error.

    Passing seeds skips saliency and detection and filters exactly the
    blocks those seeds occupy; block results depend only on their own seeds,
    so runs over a partition of a seed set sum to the run over their union.
    """
    support = dictionary.support
    if block_edge < 2 * support:
        raise ValueError(
            "block_edge %d below twice the kernel support %d"
            % (block_edge, support)
        )
    if block_edge % 2:
        raise ValueError("block_edge must be even")
    dims = v_dwn.dims

    if seeds is None:
        if np.ptp(v_dwn.data) > 0.0:
            v_tube = tubular_saliency(
                v_dwn, dictionary.tube, icosphere_bases(n_ico)
            )
            if np.any(v_tube.data > 0):
                seeds = detect_seeds(v_tube, p)
    if seeds is None or len(seeds) == 0:
        return (
            ScalarVolume(data=np.zeros(dims), spacing=v_dwn.spacing),
            TensorFieldLE(data=np.zeros(dims + (6,)), spacing=v_dwn.spacing),
            seeds if seeds is not None else SeedSet(
                voxels=np.zeros((0, 3), dtype=np.int64),
                orientations=np.zeros((0, 3, 3)),
            ),
        )

    grid = build_ola_grid(dims, block_edge, seeds)
    negated = np.max(v_dwn.data) - v_dwn.data
    tasks = grid.seeded_blocks()

    def run(task):
        origin, seed_idx = task
        theta = cluster_orientations(seeds.orientations[list(seed_idx)])
        block = _extract_block(v_dwn.data, origin, block_edge)
        neg = _extract_block(negated, origin, block_edge)
        return _filter_block_raw(block, neg, dictionary, theta)

    if workers > 1 and len(tasks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, tasks))
    else:
        results = [run(t) for t in tasks]

    cvm = np.zeros(dims)
    num = np.zeros(dims + (6,))
    weight = np.zeros(dims)
    for (origin, _), (cvm_b, num_b, w_b) in zip(tasks, results):
        sl_dst = []
        sl_src = []
        for axis in range(3):
            lo = origin[axis]
            hi = min(lo + block_edge, dims[axis])
            sl_dst.append(slice(lo, hi))
            sl_src.append(slice(0, hi - lo))
        sl_dst, sl_src = tuple(sl_dst), tuple(sl_src)
        cvm[sl_dst] += cvm_b[sl_src]
        num[sl_dst] += num_b[sl_src]
        weight[sl_dst] += w_b[sl_src]

    tf = _trace_free(_normalize_tensor_sum(num, weight))
    return (
        ScalarVolume(data=cvm, spacing=v_dwn.spacing),
        TensorFieldLE(data=tf, spacing=v_dwn.spacing),
        seeds,
    )


# ---------------------------------------------------------------------------
# cross-scale integration

def multiscale_synthesize(v: ScalarVolume, scales, dictionary: Dictionary,
                          p: float = 0.85, n_ico: int = 1,
                          block_edge: int = 32, workers: int = 1,
                          debug_sink=None):
    """Scale-swept synthesis integrated into one CVM and tensor field.

    Coarser scales are upsampled and added with 1/s weights, emphasizing
    spatial low frequencies; tensors blend log-Euclideanly with the
    per-scale vesselness as weight, guarded against the zero-vesselness
    background, then reprojected to unit determinant. debug_sink, when
    given, receives (name, volume_or_field) per scale.
    """
    dims = v.dims
    per_scale_cvm = []
    per_scale_tf = []
    scale_list = _check_scales(scales)
    for s in scale_list:
        v_s = resample(v, s) if s != 1.0 else v
        cvm_s, tf_s, _ = synthesize_scale(
            v_s, dictionary, p=p, n_ico=n_ico, block_edge=block_edge,
            workers=workers,
        )
        if debug_sink is not None:
            debug_sink("scale_%g_cvm" % s, cvm_s)
            debug_sink("scale_%g_tf" % s, tf_s)
        per_scale_cvm.append(cvm_s)
        per_scale_tf.append(tf_s)
    stack = ScaleStack(scales=scale_list, cvms=tuple(per_scale_cvm),
                       tensor_fields=tuple(per_scale_tf))

    cvm = np.zeros(dims)
    num = np.zeros(dims + (6,))
    for s, cvm_s, tf_s in zip(stack.scales, stack.cvms, stack.tensor_fields):
        if cvm_s.dims == dims:
            up_cvm = cvm_s.data
            up_tf = tf_s.data
        else:
            up_cvm = resample_to(cvm_s, dims).data
            up_tf = np.stack(
                [
                    resample_to(
                        ScalarVolume(data=np.ascontiguousarray(tf_s.data[..., c]),
                                     spacing=tf_s.spacing),
                        dims,
                    ).data
                    for c in range(6)
                ],
                axis=-1,
            )
        w = up_cvm / s
        cvm += w
        num += w[..., None] * up_tf

    peak = cvm.max()
    if peak <= 0.0:
        return (
            ScalarVolume(data=np.zeros(dims), spacing=v.spacing),
            TensorFieldLE(data=np.zeros(dims + (6,)), spacing=v.spacing),
        )
    eps = 1e-9 * peak
    tf = _trace_free(num / (cvm + eps)[..., None])
    return (
        ScalarVolume(data=cvm, spacing=v.spacing),
        TensorFieldLE(data=tf, spacing=v.spacing),
    )
