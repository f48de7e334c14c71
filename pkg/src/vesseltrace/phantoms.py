"""Ground-truthed synthetic vasculature and benchmark degradations.

Every generator returns the volume together with its exact rasterized
centerline, so downstream stages can be scored voxel-wise without manual
annotation. Intensity follows a Gaussian tube profile around the
centerline, 255 * exp(-d^2 / (2 r^2)), with the radius looked up at the
nearest centerline voxel; that makes radius profiles (tapering, abrupt
scale changes) and composite shapes cheap to express as curve sets.

Degradation stacks additive Gaussian noise, multiplicative shadow blobs,
and exact-count salt and pepper, in that order, clamped to [0, 255]; all
randomness comes from one seeded generator so outputs are reproducible
bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .tree import GeodesicTree, Path, TreeEdge, TreeNode
from .volume import ScalarVolume

__all__ = [
    "CenterlineGT",
    "NoiseSpec",
    "NOISE_LIGHT",
    "NOISE_HEAVY",
    "PHANTOM_KINDS",
    "make_phantom",
    "generate_tree_volume",
    "degrade",
    "centerline_to_tree",
    "centerline_from_tree",
]

PHANTOM_KINDS = ("tube", "helix", "bifurcation", "kissing", "hcp")

MIN_EDGE = 32

# Terminal count bounds keep Murray's-law radii inside [1, 4] voxels:
# tips carry radius 1 and the root gets (n_tips - 1)^(1/3) <= 3.1.
MIN_TERMINALS = 3
MAX_TERMINALS = 30


@dataclass(frozen=True)
class CenterlineGT:
    """Rasterized ground-truth centerlines of a synthetic volume.

    branches: tuple of (k, 3) integer polylines, each one a gap-free
    raster curve (consecutive voxels 26-adjacent). Branches may repeat
    voxels where they join. topology: (child, parent) branch index pairs
    for curves that share a junction; independent curves list no pair.
    """

    dims: tuple
    branches: tuple
    topology: tuple = ()

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or min(dims) < 1:
            raise ValueError("dims must be three positive integers")
        branches = tuple(
            np.asarray(b, dtype=np.int64).reshape(-1, 3) for b in self.branches
        )
        if not branches or sum(len(b) for b in branches) == 0:
            raise ValueError("ground truth needs at least one voxel")
        for b in branches:
            if b.min() < 0 or np.any(b >= np.array(dims)):
                raise ValueError("centerline voxels out of bounds")
            if b.shape[0] > 1:
                step = np.abs(np.diff(b, axis=0))
                if step.max() > 1 or (step.max(axis=1) == 0).any():
                    raise ValueError(
                        "centerline branches must be gap-free raster curves"
                    )
        topology = tuple(
            (int(i), int(j)) for i, j in self.topology
        )
        n = len(branches)
        for i, j in topology:
            if not (0 <= i < n and 0 <= j < n):
                raise ValueError("topology references a missing branch")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "branches", branches)
        object.__setattr__(self, "topology", topology)

    @property
    def voxels(self) -> np.ndarray:
        """Unique centerline voxels, lexicographically sorted, (n, 3)."""
        return np.unique(np.vstack(self.branches), axis=0)

    def mask(self) -> np.ndarray:
        out = np.zeros(self.dims, dtype=bool)
        v = self.voxels
        out[v[:, 0], v[:, 1], v[:, 2]] = True
        return out

    def __len__(self) -> int:
        return int(self.voxels.shape[0])


@dataclass(frozen=True)
class NoiseSpec:
    """One degradation recipe: Gaussian sigma, shadow count, flip rate."""

    gaussian_sigma: float = 0.0
    n_shadows: int = 0
    salt_pepper_rate: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "gaussian_sigma", float(self.gaussian_sigma))
        object.__setattr__(self, "n_shadows", int(self.n_shadows))
        object.__setattr__(
            self, "salt_pepper_rate", float(self.salt_pepper_rate)
        )
        if self.gaussian_sigma < 0.0:
            raise ValueError("gaussian_sigma must be non-negative")
        if self.n_shadows < 0:
            raise ValueError("n_shadows must be non-negative")
        if not 0.0 <= self.salt_pepper_rate <= 0.01:
            raise ValueError("salt_pepper_rate must be in [0, 0.01]")


# The two benchmark degradation levels used by the synthetic experiments.
NOISE_LIGHT = NoiseSpec(gaussian_sigma=5.0, n_shadows=1, salt_pepper_rate=1e-3)
NOISE_HEAVY = NoiseSpec(gaussian_sigma=10.0, n_shadows=1, salt_pepper_rate=2e-3)


# ---------------------------------------------------------------------------
# rasterization and the tube intensity model

def _raster_curve(points: np.ndarray) -> np.ndarray:
    """Snap a densely sampled curve to a gap-free voxel polyline."""
    vox = np.rint(np.asarray(points, dtype=np.float64)).astype(np.int64)
    keep = np.ones(vox.shape[0], dtype=bool)
    keep[1:] = np.any(np.diff(vox, axis=0) != 0, axis=1)
    vox = vox[keep]
    if vox.shape[0] > 1 and np.abs(np.diff(vox, axis=0)).max() > 1:
        raise ValueError("curve sampling too coarse for a gap-free raster")
    return vox


def _sample_curve(fn, n: int) -> np.ndarray:
    t = np.linspace(0.0, 1.0, n)
    return np.stack([fn(ti) for ti in t])


def _tube_intensity(dims, voxels: np.ndarray, radii: np.ndarray) -> np.ndarray:
    """Gaussian tube profile around centerline voxels with local radii."""
    mask = np.zeros(dims, dtype=bool)
    rvol = np.zeros(dims, dtype=np.float64)
    for (x, y, z), r in zip(voxels, radii):
        mask[x, y, z] = True
        rvol[x, y, z] = max(rvol[x, y, z], float(r))
    d, idx = ndimage.distance_transform_edt(~mask, return_indices=True)
    r_near = rvol[idx[0], idx[1], idx[2]]
    return 255.0 * np.exp(-(d**2) / (2.0 * r_near**2))


def _check_dims(dims) -> tuple:
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or min(dims) < MIN_EDGE:
        raise ValueError("phantom volumes must be at least %d^3" % MIN_EDGE)
    return dims


def _stack_branches(branches, radii_per_branch):
    voxels = np.vstack(branches)
    radii = np.concatenate([
        np.broadcast_to(np.asarray(r, dtype=np.float64), (len(b),))
        for b, r in zip(branches, radii_per_branch)
    ])
    return voxels, radii


# ---------------------------------------------------------------------------
# hand-crafted phantoms

def _phantom_tube(dims, radius=2.0):
    cy, cz = dims[1] // 2, dims[2] // 2
    xs = np.arange(4, dims[0] - 4)
    line = np.stack([xs, np.full_like(xs, cy), np.full_like(xs, cz)], axis=1)
    return [line], [radius], ()


def _phantom_helix(dims, radius=1.8, coil_radius=6.0, turns=2.0):
    cy, cz = dims[1] / 2.0, dims[2] / 2.0
    margin = 4.0 + radius
    if coil_radius + margin > min(dims[1], dims[2]) / 2.0:
        raise ValueError("helix coil leaves the volume, reduce coil_radius")
    x0, x1 = 4.0, dims[0] - 5.0

    def curve(t):
        phase = 2.0 * np.pi * turns * t
        return (
            x0 + t * (x1 - x0),
            cy + coil_radius * np.cos(phase),
            cz + coil_radius * np.sin(phase),
        )

    n = int(8 * (x1 - x0 + 2.0 * np.pi * turns * coil_radius))
    line = _raster_curve(_sample_curve(curve, n))
    return [line], [radius], ()


def _phantom_bifurcation(dims, radius=2.0, angle_deg=35.0):
    cx, cy, cz = (d / 2.0 for d in dims)
    theta = math.radians(float(angle_deg))
    if not 0.0 < theta < math.pi / 2.0:
        raise ValueError("bifurcation angle must be in (0, 90) degrees")
    start = np.array([4.0, cy, cz])
    junction = np.array([cx, cy, cz])
    reach = dims[0] - 5.0 - cx
    spread = reach * math.tan(theta)
    if cy + spread > dims[1] - 5.0:
        raise ValueError("bifurcation arms leave the volume, reduce the angle")
    tips = [
        np.array([dims[0] - 5.0, cy + spread, cz]),
        np.array([dims[0] - 5.0, cy - spread, cz]),
    ]
    n = int(8 * dims[0])
    trunk = _raster_curve(
        _sample_curve(lambda t: start + t * (junction - start), n)
    )
    arms = [
        _raster_curve(_sample_curve(lambda t: junction + t * (tip - junction), n))
        for tip in tips
    ]
    return [trunk, arms[0], arms[1]], [radius, radius, radius], ((1, 0), (2, 0))


def _phantom_kissing(dims, radius=1.8, gap=4.0):
    if gap < 2.0:
        raise ValueError("kissing gap below 2 voxels merges the rasters")
    cx, cy, cz = (d / 2.0 for d in dims)
    x0, x1 = 4.0, dims[0] - 5.0
    amp = dims[1] / 2.0 - 5.0 - gap / 2.0
    if amp <= 0:
        raise ValueError("kissing gap leaves no room for the curves")
    bend = amp / max(x1 - cx, cx - x0) ** 2

    def upper(t):
        x = x0 + t * (x1 - x0)
        return (x, cy + gap / 2.0 + bend * (x - cx) ** 2, cz)

    def lower(t):
        x = x0 + t * (x1 - x0)
        return (x, cy - gap / 2.0 - bend * (x - cx) ** 2, cz)

    n = int(8 * (dims[0] + 2 * amp))
    a = _raster_curve(_sample_curve(upper, n))
    b = _raster_curve(_sample_curve(lower, n))
    return [a, b], [radius, radius], ()


def _phantom_hcp(dims, radius=1.8):
    """Tortuous composite: tapering S-trunk, branch, kissing partner, C cut."""
    lx, ly, lz = (float(d) for d in dims)
    cy, cz = ly / 2.0, lz / 2.0
    x0, x1 = 4.0, lx - 5.0

    def trunk(t):
        return (
            x0 + t * (x1 - x0),
            cy - 4.0 + 0.14 * ly * np.sin(2.0 * np.pi * 1.25 * t + 0.4),
            cz + 0.10 * lz * np.sin(2.0 * np.pi * 0.75 * t),
        )

    def trunk_radius(t):
        return radius * (0.7 + 0.45 * (1.0 + np.sin(4.0 * np.pi * t)) / 2.0)

    n = int(10 * lx)
    t_grid = np.linspace(0.0, 1.0, n)
    trunk_pts = np.stack([trunk(t) for t in t_grid])
    trunk_vox = np.rint(trunk_pts).astype(np.int64)
    keep = np.ones(n, dtype=bool)
    keep[1:] = np.any(np.diff(trunk_vox, axis=0) != 0, axis=1)
    trunk_line = trunk_vox[keep]
    trunk_r = np.array([trunk_radius(t) for t in t_grid])[keep]
    if np.abs(np.diff(trunk_line, axis=0)).max() > 1:
        raise ValueError("curve sampling too coarse for a gap-free raster")

    fork_t = 0.55
    fork = np.array(trunk(fork_t))
    tip = np.array([x1, min(ly - 5.0, cy + 0.30 * ly), cz + 0.12 * lz])
    branch_line = _raster_curve(
        _sample_curve(lambda t: fork + t * (tip - fork), int(8 * lx))
    )

    # the partner curve shadows the trunk and closes in to a 3-voxel gap
    def partner(t):
        x, y, z = trunk(t)
        return (x, y + 3.0 + 10.0 * (t - 0.5) ** 2, z)

    partner_line = _raster_curve(_sample_curve(partner, n))

    branches = [trunk_line, branch_line, partner_line]
    voxels = np.vstack(branches)
    radii = np.concatenate([
        trunk_r,
        np.full(len(branch_line), 0.8 * radius),
        np.full(len(partner_line), 0.7 * radius),
    ])
    data = _tube_intensity(dims, voxels, radii)

    # carve an off-center groove along one trunk section: the cross-section
    # there opens into a C shape instead of a filled disc
    cut_sel = (t_grid[keep] >= 0.12) & (t_grid[keep] <= 0.32)
    cut_line = trunk_line[cut_sel] + np.array([0, 1, 0])
    cut_r = 0.75 * trunk_r[cut_sel]
    cut_mask = np.zeros(dims, dtype=bool)
    cut_rv = np.zeros(dims, dtype=np.float64)
    inside = np.all((cut_line >= 0) & (cut_line < np.array(dims)), axis=1)
    for (x, y, z), r in zip(cut_line[inside], cut_r[inside]):
        cut_mask[x, y, z] = True
        cut_rv[x, y, z] = max(cut_rv[x, y, z], r)
    if cut_mask.any():
        dc, idx = ndimage.distance_transform_edt(~cut_mask, return_indices=True)
        rc = cut_rv[idx[0], idx[1], idx[2]]
        data = data * (1.0 - 0.85 * np.exp(-(dc**2) / (2.0 * rc**2)))

    gt = CenterlineGT(dims=dims, branches=branches, topology=((1, 0),))
    return ScalarVolume(data=data), gt


def make_phantom(kind: str, **params) -> tuple:
    """Build one synthetic volume with its centerline ground truth.

    kind selects the shape: a straight tube, a helix, a symmetric
    bifurcation, a kissing-vessel pair (closest approach set by gap), or
    the composite hcp with tapering, branching, near-touching curves and
    a C-shaped irregular section. Intensities follow the Gaussian tube
    profile with maximum 255 on the centerline; params override the
    per-kind geometry (dims, radius, and shape-specific knobs).
    """
    dims = _check_dims(params.pop("dims", (48, 48, 48)))
    if kind == "hcp":
        return _phantom_hcp(dims, **params)
    builders = {
        "tube": _phantom_tube,
        "helix": _phantom_helix,
        "bifurcation": _phantom_bifurcation,
        "kissing": _phantom_kissing,
    }
    if kind not in builders:
        raise ValueError(
            "unknown phantom kind %r (expected one of %s)"
            % (kind, ", ".join(PHANTOM_KINDS))
        )
    branches, radii, topology = builders[kind](dims, **params)
    voxels, per_voxel = _stack_branches(branches, radii)
    data = _tube_intensity(dims, voxels, per_voxel)
    gt = CenterlineGT(dims=dims, branches=branches, topology=topology)
    return ScalarVolume(data=data), gt


# ---------------------------------------------------------------------------
# random vascular trees

def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _perp_direction(rng, direction: np.ndarray) -> np.ndarray:
    while True:
        raw = rng.normal(size=3)
        raw -= direction * (raw @ direction)
        norm = np.linalg.norm(raw)
        if norm > 1e-6:
            return raw / norm


def _grow_segments(rng, pos, direction, tips, depth, dims, segments, parent):
    """Recursively place straight segments; returns False when out of bounds.

    Radii follow Murray's law with unit-radius tips: a segment feeding k
    tips carries radius k^(1/3), so the parent cube equals the sum of the
    child cubes exactly.
    """
    radius = float(tips) ** (1.0 / 3.0)
    length = rng.uniform(9.0, 14.0) * 0.88**depth
    end = pos + direction * length
    margin = radius + 3.0
    if np.any(end < margin) or np.any(end > np.array(dims) - 1 - margin):
        return False
    index = len(segments)
    segments.append((pos.copy(), end.copy(), radius, parent))
    if tips == 1:
        return True
    split = int(rng.integers(1, tips))
    plane = _perp_direction(rng, direction)
    angles = np.radians(rng.uniform(20.0, 70.0, size=2))
    d1 = _unit(np.cos(angles[0]) * direction + np.sin(angles[0]) * plane)
    d2 = _unit(np.cos(angles[1]) * direction - np.sin(angles[1]) * plane)
    return (
        _grow_segments(rng, end, d1, split, depth + 1, dims, segments, index)
        and _grow_segments(
            rng, end, d2, tips - split, depth + 1, dims, segments, index
        )
    )


def generate_tree_volume(
    rng_seed: int, n_terminals: int = 6, dims=(64, 64, 64)
) -> tuple:
    """Generate a random bifurcating vascular tree with its centerline.

    n_terminals counts the open tips including the root inlet, so the
    smallest tree (3 terminals) is one bifurcation with two leaves.
    Branch angles are uniform in [20, 70] degrees, radii follow Murray's
    law between 1 (tips) and 4 voxels, and the whole placement is retried
    from scratch when a segment leaves the volume. Everything derives
    from rng_seed, so equal seeds give bit-identical volumes.
    """
    n_terminals = int(n_terminals)
    if not MIN_TERMINALS <= n_terminals <= MAX_TERMINALS:
        raise ValueError(
            "n_terminals must be in [%d, %d]" % (MIN_TERMINALS, MAX_TERMINALS)
        )
    dims = _check_dims(dims)
    rng = np.random.default_rng(rng_seed)
    leaves = n_terminals - 1
    root_r = float(leaves) ** (1.0 / 3.0)
    for _ in range(500):
        start = np.array([
            root_r + 3.0,
            rng.uniform(0.3, 0.7) * dims[1],
            rng.uniform(0.3, 0.7) * dims[2],
        ])
        direction = _unit(
            np.array([1.0, rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3)])
        )
        segments = []
        if _grow_segments(rng, start, direction, leaves, 0, dims, segments, -1):
            break
    else:
        raise ValueError(
            "could not place a %d-terminal tree in %r after 500 attempts"
            % (n_terminals, dims)
        )
    branches = []
    radii = []
    topology = []
    for i, (a, b, r, parent) in enumerate(segments):
        n = int(8 * np.linalg.norm(b - a)) + 2
        branches.append(_raster_curve(_sample_curve(lambda t: a + t * (b - a), n)))
        radii.append(r)
        if parent >= 0:
            topology.append((i, parent))
    voxels, per_voxel = _stack_branches(branches, radii)
    data = _tube_intensity(dims, voxels, per_voxel)
    gt = CenterlineGT(dims=dims, branches=branches, topology=tuple(topology))
    return ScalarVolume(data=data), gt


# ---------------------------------------------------------------------------
# degradation

def degrade(v: ScalarVolume, spec: NoiseSpec, rng_seed: int) -> ScalarVolume:
    """Apply the noise recipe: Gaussian, shadow blobs, salt and pepper.

    Stages run in that fixed order on one generator seeded by rng_seed,
    and disabled stages draw nothing, so an all-zero spec is the exact
    identity. Salt and pepper flips exactly round(rate * N) voxels, half
    to 255 and half to 0. The result is clamped to [0, 255].
    """
    data = v.data
    if data.min() < 0.0 or data.max() > 255.0:
        raise ValueError("degrade expects intensities in [0, 255]")
    rng = np.random.default_rng(rng_seed)
    out = data.astype(np.float64, copy=True)
    dims = out.shape

    if spec.gaussian_sigma > 0.0:
        out += rng.normal(0.0, spec.gaussian_sigma, size=dims)

    if spec.n_shadows > 0:
        grids = np.meshgrid(
            *(np.arange(d, dtype=np.float64) for d in dims), indexing="ij"
        )
        sig = np.array(dims, dtype=np.float64) / 6.0
        for _ in range(spec.n_shadows):
            center = rng.uniform(0.0, 1.0, size=3) * (np.array(dims) - 1)
            depth = rng.uniform(0.3, 0.7)
            q = sum(
                ((g - c) / s) ** 2 for g, c, s in zip(grids, center, sig)
            )
            out *= 1.0 - depth * np.exp(-0.5 * q)

    if spec.salt_pepper_rate > 0.0:
        k = int(np.rint(spec.salt_pepper_rate * out.size))
        if k > 0:
            flat = rng.choice(out.size, size=k, replace=False)
            half = k // 2
            out.ravel()[flat[:half]] = 255.0
            out.ravel()[flat[half:]] = 0.0

    np.clip(out, 0.0, 255.0, out=out)
    return ScalarVolume(data=out, spacing=v.spacing)


# ---------------------------------------------------------------------------
# ground truth in the tree graph format

def centerline_to_tree(gt: CenterlineGT) -> GeodesicTree:
    """Express the ground truth as a geodesic tree (one edge per branch).

    Nodes are the unique branch endpoints; the branch polylines become
    edge paths with zero integral distance. Raises when the branch graph
    contains a cycle, which doubles as the acyclicity check.
    """
    ids = {}
    nodes = []

    def node_id(voxel):
        key = tuple(int(c) for c in voxel)
        if key not in ids:
            ids[key] = len(ids) + 1
            nodes.append(
                TreeNode(
                    id=ids[key],
                    position=tuple(float(c) for c in key),
                    voxels=np.array([key], dtype=np.int64),
                )
            )
        return ids[key]

    edges = []
    for b in gt.branches:
        a, z = node_id(b[0]), node_id(b[-1])
        edges.append(TreeEdge(node_a=a, node_b=z, path=Path(b, 0.0)))
    return GeodesicTree(
        nodes=tuple(nodes),
        edges=tuple(edges),
        roots=tuple(n.id for n in nodes),
    )


def centerline_from_tree(tree: GeodesicTree, dims) -> CenterlineGT:
    """Rebuild a centerline set from a tree file's edge polylines."""
    if tree.edges:
        branches = tuple(e.path.voxels for e in tree.edges)
    else:
        pts = [
            n.voxels if len(n.voxels) else
            np.rint([n.position]).astype(np.int64)
            for n in tree.nodes
        ]
        branches = tuple(p for p in pts if len(p))
    return CenterlineGT(dims=dims, branches=branches)
