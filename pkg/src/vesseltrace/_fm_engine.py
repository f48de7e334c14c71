"""Low-level anisotropic fast-marching kernels.

Everything in this module operates on plain numpy arrays and scalars so the
same source compiles under numba or runs interpreted, per `_backend`. The
public orchestration lives in `marching`; nothing here validates inputs.

Geometry: the 26-neighborhood of a voxel decomposes into 48 tetrahedra, six
per octant, each a (face, edge, corner) chain of neighbor offsets. The local
update at a voxel minimizes, over every tetrahedron and its faces, the
Hopf-Lax value sum(w * u_vertex) + ||offset combination||_M with barycentric
weights w, where M is the cost tensor at the voxel being updated. The
quadratic in the minimal value solves in closed form; infeasible interior
solutions fall back to the edge and vertex cases, which are enumerated
independently (the minimizer of a linear-plus-norm objective over a simplex
lies either interior or on a face, so the three levels together are exact).
"""

from __future__ import annotations

import itertools

import numpy as np

from ._backend import jit

TAG_FAR = 0
TAG_FRONT = 1
TAG_VISITED = 2

STATUS_CONVERGED = 0
STATUS_COLLISION = 1
STATUS_CAP = 2


def _build_tables():
    offs = [
        (x, y, z)
        for x in (-1, 0, 1)
        for y in (-1, 0, 1)
        for z in (-1, 0, 1)
        if x or y or z
    ]
    index = {o: i for i, o in enumerate(offs)}
    offsets = np.array(offs, dtype=np.int64)
    negated = np.array(
        [index[(-o[0], -o[1], -o[2])] for o in offs], dtype=np.int64
    )

    simplexes = []
    for sx in (-1, 1):
        for sy in (-1, 1):
            for sz in (-1, 1):
                sign = (sx, sy, sz)
                for perm in itertools.permutations((0, 1, 2)):
                    v = [0, 0, 0]
                    tri = []
                    for axis in perm:
                        v[axis] = sign[axis]
                        tri.append(index[tuple(v)])
                    simplexes.append(tri)
    simplexes = np.array(simplexes, dtype=np.int64)

    edge_set = {
        (min(t[i], t[j]), max(t[i], t[j]))
        for t in simplexes.tolist()
        for i in range(3)
        for j in range(i + 1, 3)
    }
    edges = np.array(sorted(edge_set), dtype=np.int64)

    def _csr(lists):
        start = np.zeros(27, dtype=np.int64)
        items = []
        for i in range(26):
            start[i + 1] = start[i] + len(lists[i])
            items.extend(sorted(lists[i]))
        return start, np.array(items, dtype=np.int64)

    by_vertex = [[] for _ in range(26)]
    for s, tri in enumerate(simplexes.tolist()):
        for v in tri:
            by_vertex[v].append(s)
    s_start, s_items = _csr(by_vertex)

    partners = [[] for _ in range(26)]
    for i, j in edges.tolist():
        partners[i].append(j)
        partners[j].append(i)
    p_start, p_items = _csr(partners)

    return offsets, negated, simplexes, edges, s_start, s_items, p_start, p_items


(
    OFFSETS,
    NEGATED,
    SIMPLEXES,
    EDGES,
    SIMPLEX_START,
    SIMPLEX_ITEMS,
    PARTNER_START,
    PARTNER_ITEMS,
) = _build_tables()


@jit
def _quad(m, a0, a1, a2, b0, b1, b2):
    """Bilinear form aT M b for a 6-component symmetric matrix m."""
    return (
        m[0] * a0 * b0
        + m[3] * a1 * b1
        + m[5] * a2 * b2
        + m[1] * (a0 * b1 + a1 * b0)
        + m[2] * (a0 * b2 + a2 * b0)
        + m[4] * (a1 * b2 + a2 * b1)
    )


@jit
def _solve2(q11, q12, q22, b1, b2):
    """Two-point Hopf-Lax value, inf when the interior solution is infeasible."""
    det = q11 * q22 - q12 * q12
    if det <= 0.0:
        return np.inf
    alpha = (q11 + q22 - 2.0 * q12) / det
    if alpha <= 0.0:
        return np.inf
    beta = ((q22 - q12) * b1 + (q11 - q12) * b2) / det
    gamma = (q22 * b1 * b1 - 2.0 * q12 * b1 * b2 + q11 * b2 * b2) / det
    disc = beta * beta - alpha * (gamma - 1.0)
    if disc < 0.0:
        return np.inf
    lam = (beta + np.sqrt(disc)) / alpha
    w1 = q22 * (lam - b1) - q12 * (lam - b2)
    w2 = q11 * (lam - b2) - q12 * (lam - b1)
    if w1 < 0.0 or w2 < 0.0:
        return np.inf
    return lam


@jit
def _solve3(q11, q12, q13, q22, q23, q33, b1, b2, b3):
    """Three-point Hopf-Lax value, inf when the interior solution is infeasible."""
    a11 = q22 * q33 - q23 * q23
    a12 = q13 * q23 - q12 * q33
    a13 = q12 * q23 - q13 * q22
    a22 = q11 * q33 - q13 * q13
    a23 = q12 * q13 - q11 * q23
    a33 = q11 * q22 - q12 * q12
    det = q11 * a11 + q12 * a12 + q13 * a13
    if det <= 0.0:
        return np.inf
    i11 = a11 / det
    i12 = a12 / det
    i13 = a13 / det
    i22 = a22 / det
    i23 = a23 / det
    i33 = a33 / det
    alpha = i11 + i22 + i33 + 2.0 * (i12 + i13 + i23)
    if alpha <= 0.0:
        return np.inf
    r1 = i11 * b1 + i12 * b2 + i13 * b3
    r2 = i12 * b1 + i22 * b2 + i23 * b3
    r3 = i13 * b1 + i23 * b2 + i33 * b3
    beta = r1 + r2 + r3
    gamma = b1 * r1 + b2 * r2 + b3 * r3
    disc = beta * beta - alpha * (gamma - 1.0)
    if disc < 0.0:
        return np.inf
    lam = (beta + np.sqrt(disc)) / alpha
    w1 = i11 * (lam - b1) + i12 * (lam - b2) + i13 * (lam - b3)
    w2 = i12 * (lam - b1) + i22 * (lam - b2) + i23 * (lam - b3)
    w3 = i13 * (lam - b1) + i23 * (lam - b2) + i33 * (lam - b3)
    if w1 < 0.0 or w2 < 0.0 or w3 < 0.0:
        return np.inf
    return lam


@jit
def _gather(u, tag, vor, x, y, z, label, offsets, vals, ok):
    """Load u at the Visited same-label 26-neighbors of (x, y, z)."""
    nx, ny, nz = u.shape
    for i in range(26):
        ok[i] = False
        px = x + offsets[i, 0]
        py = y + offsets[i, 1]
        pz = z + offsets[i, 2]
        if px >= 0 and px < nx and py >= 0 and py < ny and pz >= 0 and pz < nz:
            if tag[px, py, pz] == TAG_VISITED and vor[px, py, pz] == label:
                vals[i] = u[px, py, pz]
                ok[i] = True


@jit
def _candidate_full(u, tag, vor, m6, x, y, z, label, offsets, edges,
                    simplexes, vals, ok):
    """Best update at (x, y, z) over every vertex, edge, and tetrahedron."""
    _gather(u, tag, vor, x, y, z, label, offsets, vals, ok)
    m = m6[x, y, z]
    best = np.inf
    for i in range(26):
        if ok[i]:
            o0 = offsets[i, 0]
            o1 = offsets[i, 1]
            o2 = offsets[i, 2]
            c = vals[i] + np.sqrt(_quad(m, o0, o1, o2, o0, o1, o2))
            if c < best:
                best = c
    for e in range(edges.shape[0]):
        i = edges[e, 0]
        j = edges[e, 1]
        if ok[i] and ok[j]:
            a0 = offsets[i, 0]
            a1 = offsets[i, 1]
            a2 = offsets[i, 2]
            b0 = offsets[j, 0]
            b1 = offsets[j, 1]
            b2 = offsets[j, 2]
            c = _solve2(
                _quad(m, a0, a1, a2, a0, a1, a2),
                _quad(m, a0, a1, a2, b0, b1, b2),
                _quad(m, b0, b1, b2, b0, b1, b2),
                vals[i],
                vals[j],
            )
            if c < best:
                best = c
    for s in range(simplexes.shape[0]):
        i = simplexes[s, 0]
        j = simplexes[s, 1]
        k = simplexes[s, 2]
        if ok[i] and ok[j] and ok[k]:
            a0 = offsets[i, 0]
            a1 = offsets[i, 1]
            a2 = offsets[i, 2]
            b0 = offsets[j, 0]
            b1 = offsets[j, 1]
            b2 = offsets[j, 2]
            c0 = offsets[k, 0]
            c1 = offsets[k, 1]
            c2 = offsets[k, 2]
            c = _solve3(
                _quad(m, a0, a1, a2, a0, a1, a2),
                _quad(m, a0, a1, a2, b0, b1, b2),
                _quad(m, a0, a1, a2, c0, c1, c2),
                _quad(m, b0, b1, b2, b0, b1, b2),
                _quad(m, b0, b1, b2, c0, c1, c2),
                _quad(m, c0, c1, c2, c0, c1, c2),
                vals[i],
                vals[j],
                vals[k],
            )
            if c < best:
                best = c
    return best


@jit
def _candidate_from(u, tag, vor, m6, x, y, z, label, req, offsets,
                    p_start, p_items, s_start, s_items, simplexes, vals, ok):
    """Best update at (x, y, z) over configurations containing offset req.

    Restricting the enumeration to the simplexes that include the newly
    Visited vertex is the standard incremental form: every other simplex was
    already evaluated when its own last vertex was visited, and Visited
    values never change within one propagation run.
    """
    _gather(u, tag, vor, x, y, z, label, offsets, vals, ok)
    if not ok[req]:
        return np.inf
    m = m6[x, y, z]
    r0 = offsets[req, 0]
    r1 = offsets[req, 1]
    r2 = offsets[req, 2]
    qrr = _quad(m, r0, r1, r2, r0, r1, r2)
    best = vals[req] + np.sqrt(qrr)
    for t in range(p_start[req], p_start[req + 1]):
        j = p_items[t]
        if ok[j]:
            b0 = offsets[j, 0]
            b1 = offsets[j, 1]
            b2 = offsets[j, 2]
            c = _solve2(
                qrr,
                _quad(m, r0, r1, r2, b0, b1, b2),
                _quad(m, b0, b1, b2, b0, b1, b2),
                vals[req],
                vals[j],
            )
            if c < best:
                best = c
    for t in range(s_start[req], s_start[req + 1]):
        s = s_items[t]
        i = simplexes[s, 0]
        j = simplexes[s, 1]
        k = simplexes[s, 2]
        if ok[i] and ok[j] and ok[k]:
            a0 = offsets[i, 0]
            a1 = offsets[i, 1]
            a2 = offsets[i, 2]
            b0 = offsets[j, 0]
            b1 = offsets[j, 1]
            b2 = offsets[j, 2]
            c0 = offsets[k, 0]
            c1 = offsets[k, 1]
            c2 = offsets[k, 2]
            c = _solve3(
                _quad(m, a0, a1, a2, a0, a1, a2),
                _quad(m, a0, a1, a2, b0, b1, b2),
                _quad(m, a0, a1, a2, c0, c1, c2),
                _quad(m, b0, b1, b2, b0, b1, b2),
                _quad(m, b0, b1, b2, c0, c1, c2),
                _quad(m, c0, c1, c2, c0, c1, c2),
                vals[i],
                vals[j],
                vals[k],
            )
            if c < best:
                best = c
    return best


@jit
def _hless(hu, hix, a, b):
    return hu[a] < hu[b] or (hu[a] == hu[b] and hix[a] < hix[b])


@jit
def _hpush(hu, hix, hn, val, ix):
    i = hn
    hu[i] = val
    hix[i] = ix
    while i > 0:
        p = (i - 1) // 2
        if _hless(hu, hix, i, p):
            hu[i], hu[p] = hu[p], hu[i]
            hix[i], hix[p] = hix[p], hix[i]
            i = p
        else:
            break
    return hn + 1


@jit
def _hpop(hu, hix, hn):
    val = hu[0]
    ix = hix[0]
    hn -= 1
    hu[0] = hu[hn]
    hix[0] = hix[hn]
    i = 0
    while True:
        left = 2 * i + 1
        right = left + 1
        small = i
        if left < hn and _hless(hu, hix, left, small):
            small = left
        if right < hn and _hless(hu, hix, right, small):
            small = right
        if small == i:
            break
        hu[i], hu[small] = hu[small], hu[i]
        hix[i], hix[small] = hix[small], hix[i]
        i = small
    return val, ix, hn


@jit
def propagate_kernel(u, vor, tag, m6, offsets, negated, simplexes,
                     s_start, s_items, p_start, p_items, budget,
                     stop_on_collision, prune, prune_ref):
    """Run the labeled front until collision, convergence, or the pop budget.

    The queue is rebuilt from the Front voxels on entry (lexicographic scan),
    keyed by (u, flat index) for full determinism. Stale heap entries are
    skipped by comparing the popped value against the current u. Returns
    (status, pops, flat_a, flat_b, monotone_breaks); the flats identify the
    colliding pair when status is the collision code, -1 otherwise.

    With prune set, a popped voxel whose value does not improve on prune_ref
    is sealed without relaxing its neighbors: the nested merge pass uses this
    to confine work to the sub-region its new sources actually improve.
    """
    nx, ny, nz = u.shape
    nyz = ny * nz
    hu = np.empty(1024, np.float64)
    hix = np.empty(1024, np.int64)
    hn = 0
    for x in range(nx):
        for y in range(ny):
            for z in range(nz):
                if tag[x, y, z] == TAG_FRONT:
                    if hn >= hu.shape[0]:
                        hu2 = np.empty(2 * hu.shape[0], np.float64)
                        hix2 = np.empty(2 * hix.shape[0], np.int64)
                        hu2[:hn] = hu[:hn]
                        hix2[:hn] = hix[:hn]
                        hu = hu2
                        hix = hix2
                    hn = _hpush(hu, hix, hn, u[x, y, z], (x * ny + y) * nz + z)
    vals = np.empty(26, np.float64)
    ok = np.zeros(26, np.bool_)
    pops = 0
    breaks = 0
    last = -np.inf
    while hn > 0:
        val, ix, hn = _hpop(hu, hix, hn)
        z0 = ix % nz
        y0 = (ix // nz) % ny
        x0 = ix // nyz
        if tag[x0, y0, z0] == TAG_VISITED:
            continue
        if val != u[x0, y0, z0]:
            continue
        tag[x0, y0, z0] = TAG_VISITED
        pops += 1
        if val < last:
            breaks += 1
        last = val
        label = vor[x0, y0, z0]
        if stop_on_collision:
            best_b = np.int64(-1)
            best_ub = np.inf
            for i in range(26):
                px = x0 + offsets[i, 0]
                py = y0 + offsets[i, 1]
                pz = z0 + offsets[i, 2]
                if (px >= 0 and px < nx and py >= 0 and py < ny
                        and pz >= 0 and pz < nz):
                    if (tag[px, py, pz] == TAG_VISITED
                            and vor[px, py, pz] != label):
                        ub = u[px, py, pz]
                        fb = (px * ny + py) * nz + pz
                        if (best_b < 0 or ub < best_ub
                                or (ub == best_ub and fb < best_b)):
                            best_b = fb
                            best_ub = ub
            if best_b >= 0:
                return STATUS_COLLISION, pops, ix, best_b, breaks
        if pops > budget:
            return STATUS_CAP, pops, np.int64(-1), np.int64(-1), breaks
        if prune and val >= prune_ref[x0, y0, z0]:
            continue
        for i in range(26):
            px = x0 + offsets[i, 0]
            py = y0 + offsets[i, 1]
            pz = z0 + offsets[i, 2]
            if (px >= 0 and px < nx and py >= 0 and py < ny
                    and pz >= 0 and pz < nz):
                if tag[px, py, pz] != TAG_VISITED:
                    cand = _candidate_from(
                        u, tag, vor, m6, px, py, pz, label, negated[i],
                        offsets, p_start, p_items, s_start, s_items,
                        simplexes, vals, ok,
                    )
                    if cand < u[px, py, pz]:
                        u[px, py, pz] = cand
                        vor[px, py, pz] = label
                        tag[px, py, pz] = TAG_FRONT
                        if hn >= hu.shape[0]:
                            hu2 = np.empty(2 * hu.shape[0], np.float64)
                            hix2 = np.empty(2 * hix.shape[0], np.int64)
                            hu2[:hn] = hu[:hn]
                            hix2[:hn] = hix[:hn]
                            hu = hu2
                            hix = hix2
                        hn = _hpush(
                            hu, hix, hn, cand, (px * ny + py) * nz + pz
                        )
    return STATUS_CONVERGED, pops, np.int64(-1), np.int64(-1), breaks


@jit
def trace_kernel(u, vor, label, x, y, z, offsets, max_steps):
    """Steepest 26-neighbor descent on u within one region, down to u == 0.

    Ties go to the lexicographically first offset. Returns (buffer, count,
    reached) where buffer[:count] is the polyline; reached is False when the
    descent stalls at a non-source local minimum or overruns max_steps.
    """
    nx, ny, nz = u.shape
    path = np.empty((max_steps, 3), np.int64)
    path[0, 0] = x
    path[0, 1] = y
    path[0, 2] = z
    k = 1
    while u[x, y, z] > 0.0:
        best = u[x, y, z]
        bi = -1
        bx = x
        by = y
        bz = z
        for i in range(26):
            px = x + offsets[i, 0]
            py = y + offsets[i, 1]
            pz = z + offsets[i, 2]
            if (px >= 0 and px < nx and py >= 0 and py < ny
                    and pz >= 0 and pz < nz):
                if vor[px, py, pz] == label and u[px, py, pz] < best:
                    best = u[px, py, pz]
                    bi = i
                    bx = px
                    by = py
                    bz = pz
        if bi < 0 or k >= max_steps:
            return path, k, False
        x = bx
        y = by
        z = bz
        path[k, 0] = x
        path[k, 1] = y
        path[k, 2] = z
        k += 1
    return path, k, True


@jit
def scan_collision_kernel(u, vor, tag, offsets):
    """Find the minimal-(u_a + u_b) Visited pair with differing labels.

    Full lexicographic scan; ties break on (flat_a, flat_b). Returns
    (-1, -1) when no cross-label Visited adjacency exists. Used after the
    queue drains: a pair both of whose voxels were already Visited when
    their regions met (triple-point collisions hide this way) never
    triggers the in-loop detector.
    """
    nx, ny, nz = u.shape
    best = np.inf
    ba = np.int64(-1)
    bb = np.int64(-1)
    for x in range(nx):
        for y in range(ny):
            for z in range(nz):
                if tag[x, y, z] != TAG_VISITED:
                    continue
                label = vor[x, y, z]
                fa = (x * ny + y) * nz + z
                for i in range(26):
                    px = x + offsets[i, 0]
                    py = y + offsets[i, 1]
                    pz = z + offsets[i, 2]
                    if (px >= 0 and px < nx and py >= 0 and py < ny
                            and pz >= 0 and pz < nz):
                        if (tag[px, py, pz] == TAG_VISITED
                                and vor[px, py, pz] != label):
                            s = u[x, y, z] + u[px, py, pz]
                            fb = (px * ny + py) * nz + pz
                            if s < best or (
                                s == best
                                and (fa < ba or (fa == ba and fb < bb))
                            ):
                                best = s
                                ba = fa
                                bb = fb
    return ba, bb
