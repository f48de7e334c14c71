"""Multi-source anisotropic fast marching and acyclic tree extraction.

The voxel metric folds the synthesized tensor field and vesselness map into
one SPD cost tensor per voxel: exp(TF) / (CVM + eps)^2, so travel is cheap
along well-supported vessel directions and expensive through background.
Labeled fronts grow from every seed component at once; when two fronts meet,
the meeting pair is backtraced to its sources, the traced polyline becomes a
new zero-distance source set, and a nested marching pass folds the improved
distances back in. Each collision contributes one tree edge, so P components
yield exactly P - 1 edges and the result is acyclic by construction.

All heavy loops live in `_fm_engine`; this module owns validation, state,
and orchestration.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import _fm_engine as eng
from ._fm_engine import TAG_FAR, TAG_FRONT, TAG_VISITED
from .filtering import SeedSet
from .tree import GeodesicTree, Path, TreeEdge, TreeNode
from .volume import (
    ScalarVolume,
    TensorFieldLE,
    sym_to_vec_field,
    trilinear,
    vec_to_sym_field,
)

__all__ = [
    "MetricField",
    "FrontState",
    "Collision",
    "align_seeds",
    "init_front",
    "afm_update",
    "propagate_until_collision",
    "trace_path",
    "merge_regions",
    "extract_tree",
]

EPSILON_FACTOR = 1e-3

_TABLES = (
    eng.OFFSETS,
    eng.NEGATED,
    eng.SIMPLEXES,
    eng.SIMPLEX_START,
    eng.SIMPLEX_ITEMS,
    eng.PARTNER_START,
    eng.PARTNER_ITEMS,
)

_UNLIMITED = np.int64(2**62)


@dataclass(frozen=True)
class MetricField:
    """Voxel-wise Riemannian cost metric for the marching fronts.

    tensors holds the log-domain direction model, speed_inv the scalar
    1 / (CVM + epsilon_c) cost scale. The dense cost tensor per voxel is
    exp(tensors) * speed_inv^2, SPD by construction; it is materialized
    once on first use and cached.
    """

    tensors: TensorFieldLE
    speed_inv: ScalarVolume
    epsilon_c: float

    def __post_init__(self):
        if self.tensors.dims != self.speed_inv.dims:
            raise ValueError("tensor and speed fields must share dims")
        if not float(self.epsilon_c) > 0.0:
            raise ValueError("epsilon_c must be positive")
        if np.any(self.speed_inv.data <= 0.0):
            raise ValueError("speed_inv must be strictly positive")
        object.__setattr__(self, "epsilon_c", float(self.epsilon_c))

    @classmethod
    def from_synthesis(
        cls,
        cvm: ScalarVolume,
        tf: TensorFieldLE,
        epsilon_factor: float = EPSILON_FACTOR,
    ) -> "MetricField":
        """Fold a vesselness map and tensor field into a metric."""
        peak = float(cvm.data.max())
        eps = epsilon_factor * peak if peak > 0.0 else epsilon_factor
        speed_inv = ScalarVolume(
            data=1.0 / (cvm.data + eps), spacing=cvm.spacing
        )
        return cls(tensors=tf, speed_inv=speed_inv, epsilon_c=eps)

    def cost_field(self) -> np.ndarray:
        """Dense (nx, ny, nz, 6) SPD cost tensors (cached)."""
        cached = self.__dict__.get("_cost")
        if cached is not None:
            return cached
        sym = vec_to_sym_field(self.tensors.data)
        w, q = np.linalg.eigh(sym)
        expm = np.einsum("...ij,...j,...kj->...ik", q, np.exp(w), q)
        cost = sym_to_vec_field(expm) * (self.speed_inv.data**2)[..., None]
        cost = np.ascontiguousarray(cost)
        object.__setattr__(self, "_cost", cost)
        return cost


@dataclass
class FrontState:
    """Mutable state of the labeled marching fronts.

    u is the geodesic distance (inf where untouched), voronoi the owning
    region label (0 = unclaimed), tag one of Far / Front / Visited. The
    priority queue is rebuilt from the Front voxels on every propagation
    call, keyed by (u, flat index); components keeps the initial seed
    component voxels, one entry per label, in label order.
    """

    u: np.ndarray
    voronoi: np.ndarray
    tag: np.ndarray
    n_regions: int
    components: tuple
    pops: int = 0
    monotone_breaks: int = 0

    @property
    def dims(self) -> tuple:
        return self.u.shape

    def u_volume(self, background: float = -1.0) -> ScalarVolume:
        """Distance field as a volume, untouched voxels set to background."""
        data = np.where(np.isfinite(self.u), self.u, background)
        return ScalarVolume(data=data)


@dataclass(frozen=True)
class Collision:
    """First meeting of two fronts: the adjacent Visited voxel pair."""

    voxel_a: tuple
    voxel_b: tuple
    region_a: int
    region_b: int


def align_seeds(seeds: SeedSet, cvm: ScalarVolume) -> SeedSet:
    """Nudge seeds uphill on the vesselness map and collapse duplicates.

    Fixed 0.5-voxel steps along the normalized trilinear gradient, at most
    10 of them, never leaving a 2-voxel ball around the start; the result
    is rounded back to the lattice and deduplicated keeping first
    occurrences. A seed sitting on a local maximum has a vanishing
    gradient and stays put.
    """
    if len(seeds) == 0:
        return seeds
    dims = cvm.dims
    vox = seeds.voxels
    if vox.min() < 0 or np.any(vox >= np.array(dims)):
        raise ValueError("seed voxels out of bounds")
    gx, gy, gz = np.gradient(cvm.data)
    pos = vox.astype(np.float64)
    start = pos.copy()
    for _ in range(10):
        g = np.stack(
            [
                trilinear(gx, pos[:, 0], pos[:, 1], pos[:, 2]),
                trilinear(gy, pos[:, 0], pos[:, 1], pos[:, 2]),
                trilinear(gz, pos[:, 0], pos[:, 1], pos[:, 2]),
            ],
            axis=1,
        )
        norm = np.linalg.norm(g, axis=1)
        move = norm > 1e-12
        if not move.any():
            break
        cand = pos.copy()
        cand[move] += 0.5 * g[move] / norm[move, None]
        drift = cand - start
        dn = np.linalg.norm(drift, axis=1)
        over = dn > 2.0
        if over.any():
            cand[over] = start[over] + 2.0 * drift[over] / dn[over, None]
        pos = cand
    snapped = np.rint(pos).astype(np.int64)
    np.clip(snapped, 0, np.array(dims, dtype=np.int64) - 1, out=snapped)
    seen = {}
    for i, v in enumerate(map(tuple, snapped.tolist())):
        if v not in seen:
            seen[v] = i
    keep = sorted(seen.values())
    return SeedSet(voxels=snapped[keep], orientations=seeds.orientations[keep])


def init_front(seeds: SeedSet, dims) -> FrontState:
    """Label 26-connected seed components and arm them as zero-cost fronts."""
    if len(seeds) == 0:
        raise ValueError("cannot initialize a front from an empty seed set")
    dims = tuple(int(d) for d in dims)
    vox = seeds.voxels
    if vox.min() < 0 or np.any(vox >= np.array(dims)):
        raise ValueError("seed voxels out of bounds")
    mask = np.zeros(dims, dtype=bool)
    mask[vox[:, 0], vox[:, 1], vox[:, 2]] = True
    labels, n_regions = ndimage.label(mask, structure=np.ones((3, 3, 3)))
    u = np.full(dims, np.inf, dtype=np.float64)
    tag = np.zeros(dims, dtype=np.uint8)
    u[mask] = 0.0
    tag[mask] = TAG_FRONT
    components = tuple(
        np.argwhere(labels == p) for p in range(1, n_regions + 1)
    )
    return FrontState(
        u=u,
        voronoi=labels.astype(np.int32),
        tag=tag,
        n_regions=int(n_regions),
        components=components,
    )


def afm_update(front: FrontState, metric: MetricField, voxel) -> float:
    """Candidate distance at a voxel from its Visited neighborhood.

    Minimum over every vertex, edge, and tetrahedron of the 26-neighborhood
    whose members are Visited and share a region label, then capped by the
    voxel's current value. Raises when no Visited neighbor exists.
    """
    x, y, z = (int(c) for c in voxel)
    nx, ny, nz = front.dims
    labels = set()
    for ox, oy, oz in eng.OFFSETS:
        px, py, pz = x + ox, y + oy, z + oz
        if 0 <= px < nx and 0 <= py < ny and 0 <= pz < nz:
            if front.tag[px, py, pz] == TAG_VISITED:
                labels.add(int(front.voronoi[px, py, pz]))
    if not labels:
        raise ValueError(
            "afm_update at %r: no Visited neighbor to update from" % (voxel,)
        )
    cost = metric.cost_field()
    vals = np.empty(26, np.float64)
    ok = np.zeros(26, np.bool_)
    best = np.inf
    for label in sorted(labels):
        cand = eng._candidate_full(
            front.u, front.tag, front.voronoi, cost, x, y, z, label,
            eng.OFFSETS, eng.EDGES, eng.SIMPLEXES, vals, ok,
        )
        best = min(best, cand)
    return min(best, float(front.u[x, y, z]))


def _run_kernel(front, cost, budget, stop_on_collision, prune, prune_ref,
                u=None, voronoi=None, tag=None):
    layers = (
        front.u if u is None else u,
        front.voronoi if voronoi is None else voronoi,
        front.tag if tag is None else tag,
    )
    status, pops, fa, fb, breaks = eng.propagate_kernel(
        *layers, cost, *_TABLES,
        np.int64(budget), stop_on_collision, prune, prune_ref,
    )
    front.pops += int(pops)
    front.monotone_breaks += int(breaks)
    return status, fa, fb


def propagate_until_collision(
    front: FrontState, metric: MetricField, budget: int | None = None
) -> Collision | None:
    """Grow all fronts until two regions meet; None means converged.

    Voxels are finalized in (u, flat index) order. The moment a finalized
    voxel touches a Visited voxel of another region, the minimal-(u_a + u_b)
    such pair around it is returned. A pop budget (when given) converts
    runaway propagation into an error instead of an endless loop.
    """
    cost = metric.cost_field()
    status, fa, fb = _run_kernel(
        front, cost, _UNLIMITED if budget is None else budget,
        True, False, front.u,
    )
    if status == eng.STATUS_CAP:
        raise RuntimeError(
            "fast-marching pop budget exhausted (%d pops, %d regions left, "
            "%.1f%% of voxels visited)"
            % (
                front.pops,
                front.n_regions,
                100.0 * float(np.mean(front.tag == TAG_VISITED)),
            )
        )
    if status == eng.STATUS_CONVERGED:
        return None
    return _collision_from_flats(front, fa, fb)


def _collision_from_flats(front: FrontState, fa: int, fb: int) -> Collision:
    nx, ny, nz = front.dims
    ax, ay, az = fa // (ny * nz), (fa // nz) % ny, fa % nz
    bx, by, bz = fb // (ny * nz), (fb // nz) % ny, fb % nz
    return Collision(
        voxel_a=(int(ax), int(ay), int(az)),
        voxel_b=(int(bx), int(by), int(bz)),
        region_a=int(front.voronoi[ax, ay, az]),
        region_b=int(front.voronoi[bx, by, bz]),
    )


def _polyline_cost(u: np.ndarray, polyline: np.ndarray) -> float:
    """Trapezoidal integral of u along a voxel polyline."""
    if polyline.shape[0] < 2:
        return 0.0
    vals = u[polyline[:, 0], polyline[:, 1], polyline[:, 2]]
    seg = np.linalg.norm(np.diff(polyline.astype(np.float64), axis=0), axis=1)
    return float(np.sum(0.5 * (vals[:-1] + vals[1:]) * seg))


def trace_path(u, start, sources=None, *, voronoi=None, label=None) -> Path:
    """Steepest-descent backtrace from start down to a zero-distance source.

    Descends the 26-neighborhood of u (restricted to one region when voronoi
    and label are given) until u reaches 0, and returns the polyline with
    its trapezoidal integral of u. `sources`, when given, is a boolean mask
    the endpoint must land in. A descent that stalls early means the
    distance field and the start disagree, which is a caller bug.
    """
    u_arr = u.data if isinstance(u, ScalarVolume) else np.asarray(u, np.float64)
    x, y, z = (int(c) for c in start)
    if not np.isfinite(u_arr[x, y, z]):
        raise ValueError("trace start has no finite distance")
    if voronoi is None:
        vor = np.zeros(u_arr.shape, dtype=np.int32)
        label = 0
    else:
        vor = voronoi
        label = int(voronoi[x, y, z]) if label is None else int(label)
    max_steps = int(np.isfinite(u_arr).sum()) + 1
    buf, count, reached = eng.trace_kernel(
        u_arr, vor, label, x, y, z, eng.OFFSETS, max_steps
    )
    if not reached:
        raise ValueError(
            "descent from %r stuck at a non-source local minimum "
            "(inconsistent distance field)" % (tuple(start),)
        )
    polyline = buf[:count].copy()
    end = polyline[-1]
    if sources is not None and not sources[end[0], end[1], end[2]]:
        raise ValueError("descent endpoint %r is not a source" % (tuple(end),))
    return Path(voxels=polyline, length_u=_polyline_cost(u_arr, polyline))


def merge_regions(
    front: FrontState,
    a: int,
    b: int,
    path: Path,
    metric: MetricField,
    budget: int | None = None,
) -> FrontState:
    """Fuse two collided regions through their connecting path.

    The union takes the smaller label, the path voxels become zero-distance
    sources, and a nested marching pass confined to the union re-solves the
    sub-region those sources improve (a popped voxel that does not beat the
    existing distance is sealed without expansion). Distances only ever
    decrease; the region count drops by one.
    """
    a, b = int(a), int(b)
    if a == b:
        raise ValueError("cannot merge a region with itself")
    merged = min(a, b)
    region = (front.voronoi == a) | (front.voronoi == b)
    pv = path.voxels
    if not (region[pv[0, 0], pv[0, 1], pv[0, 2]]
            and region[pv[-1, 0], pv[-1, 1], pv[-1, 2]]):
        raise ValueError("path endpoints must lie in the merging regions")
    front.voronoi[region] = merged

    u_nested = np.full(front.dims, np.inf, dtype=np.float64)
    tag_nested = np.full(front.dims, TAG_VISITED, dtype=np.uint8)
    tag_nested[region] = TAG_FAR
    vor_nested = np.zeros(front.dims, dtype=np.int32)
    vor_nested[region] = merged
    u_nested[pv[:, 0], pv[:, 1], pv[:, 2]] = 0.0
    tag_nested[pv[:, 0], pv[:, 1], pv[:, 2]] = TAG_FRONT

    cost = metric.cost_field()
    status, _, _ = _run_kernel(
        front, cost, _UNLIMITED if budget is None else budget,
        False, True, front.u,
        u=u_nested, voronoi=vor_nested, tag=tag_nested,
    )
    if status == eng.STATUS_CAP:
        raise RuntimeError("fast-marching pop budget exhausted during merge")
    np.minimum(front.u, u_nested, out=front.u)
    front.n_regions -= 1
    return front


def extract_tree(
    cvm: ScalarVolume,
    tf: TensorFieldLE,
    seeds: SeedSet,
    *,
    epsilon_factor: float = EPSILON_FACTOR,
    keep_fields: bool = False,
) -> GeodesicTree:
    """Extract the acyclic geodesic tree connecting all seed components.

    Seeds are aligned to the vesselness ridge, labeled into 26-connected
    components, and propagated as competing fronts; every collision is
    backtraced into an edge and merged, until one region remains (or the
    remaining regions are unreachable from each other, leaving a forest).
    No pruning is applied to the result. Total pops across all passes are
    capped at 10x the voxel count; exceeding the cap raises.
    """
    if len(seeds) == 0:
        raise ValueError("tree extraction needs at least one seed")
    if cvm.dims != tf.dims:
        raise ValueError("cvm and tf dims differ")
    aligned = align_seeds(seeds, cvm)
    front = init_front(aligned, cvm.dims)
    metric = MetricField.from_synthesis(cvm, tf, epsilon_factor)
    budget = 10 * int(np.prod(cvm.dims))
    edges = []
    while front.n_regions > 1:
        col = propagate_until_collision(
            front, metric, budget=budget - front.pops
        )
        if col is None:
            fa, fb = eng.scan_collision_kernel(
                front.u, front.voronoi, front.tag, eng.OFFSETS
            )
            if fa < 0:
                break
            col = _collision_from_flats(front, int(fa), int(fb))
        half_a = trace_path(
            front.u, col.voxel_a, voronoi=front.voronoi, label=col.region_a
        )
        half_b = trace_path(
            front.u, col.voxel_b, voronoi=front.voronoi, label=col.region_b
        )
        polyline = np.vstack([half_a.voxels[::-1], half_b.voxels])
        path = Path(
            voxels=polyline, length_u=_polyline_cost(front.u, polyline)
        )
        edges.append(
            TreeEdge(node_a=col.region_a, node_b=col.region_b, path=path)
        )
        merge_regions(
            front, col.region_a, col.region_b, path, metric,
            budget=budget - front.pops,
        )
    if keep_fields:
        # finish the remaining fronts so the emitted fields are complete
        propagate_until_collision(front, metric, budget=budget - front.pops)
    spacing = np.asarray(cvm.spacing, dtype=np.float64)
    nodes = tuple(
        TreeNode(
            id=p + 1,
            position=tuple(comp.mean(axis=0) * spacing),
            voxels=comp,
        )
        for p, comp in enumerate(front.components)
    )
    return GeodesicTree(
        nodes=nodes,
        edges=tuple(edges),
        roots=tuple(n.id for n in nodes),
        u=front.u.copy() if keep_fields else None,
        voronoi=front.voronoi.copy() if keep_fields else None,
    )
