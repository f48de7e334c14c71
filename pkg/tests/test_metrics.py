import numpy as np
import pytest
from scipy.spatial.distance import cdist

from vesseltrace.metrics import (
    TreeMetrics,
    metrics_csv_header,
    metrics_csv_row,
    tree_metrics,
)
from vesseltrace.phantoms import CenterlineGT, centerline_to_tree, make_phantom
from vesseltrace.tree import GeodesicTree, Path, TreeEdge, TreeNode


def walk(rng, dims, n, start=None):
    """Random 26-connected voxel walk clipped to the volume."""
    pos = np.array(start if start is not None else np.array(dims) // 2)
    out = [pos.copy()]
    while len(out) < n:
        step = rng.integers(-1, 2, size=3)
        nxt = np.clip(pos + step, 0, np.array(dims) - 1)
        if np.any(nxt != pos):
            pos = nxt
            out.append(pos.copy())
    return np.array(out)


def tree_from_polyline(poly):
    nodes = (
        TreeNode(id=1, position=tuple(map(float, poly[0]))),
        TreeNode(id=2, position=tuple(map(float, poly[-1]))),
    )
    edge = TreeEdge(node_a=1, node_b=2, path=Path(poly, 0.0))
    return GeodesicTree(nodes=nodes, edges=(edge,), roots=(1, 2))


def brute_metrics(evox, gvox, rho):
    d = cdist(np.unique(evox, axis=0).astype(float),
              np.unique(gvox, axis=0).astype(float))
    to_gt = d.min(axis=1)
    to_e = d.min(axis=0)
    return (
        float(np.mean(to_gt <= rho)),
        float(np.mean(to_e <= rho)),
        float(np.mean(to_e)),
    )


def straight_gt(dims, y, z, x0=4, x1=28):
    xs = np.arange(x0, x1)
    line = np.stack([xs, np.full_like(xs, y), np.full_like(xs, z)], axis=1)
    return CenterlineGT(dims=dims, branches=(line,))


class TestTreeMetrics:
    def test_perfect_match_scores_one(self):
        dims = (32, 32, 32)
        gt = straight_gt(dims, 16, 16)
        m = tree_metrics(centerline_to_tree(gt), gt, rho=2.0)
        assert m.precision == 1.0
        assert m.recall == 1.0
        assert m.mean_error == 0.0
        assert m.acyclic
        assert m.n_nodes == 2 and m.n_edges == 1

    def test_unit_shift_scores_unit_error(self):
        dims = (32, 32, 32)
        gt = straight_gt(dims, 16, 16)
        shifted = straight_gt(dims, 17, 16)
        m = tree_metrics(centerline_to_tree(shifted), gt, rho=2.0)
        assert m.precision == 1.0
        assert m.recall == 1.0
        assert m.mean_error == 1.0

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(23)
        dims = (16, 16, 16)
        for _ in range(5):
            e_poly = walk(rng, dims, 30)
            g_poly = walk(rng, dims, 25, start=(4, 4, 4))
            tree = tree_from_polyline(e_poly)
            gt = CenterlineGT(dims=dims, branches=(g_poly,))
            rho = float(rng.uniform(1.0, 3.0))
            m = tree_metrics(tree, gt, rho=rho)
            p, r, eps = brute_metrics(e_poly, g_poly, rho)
            assert m.precision == pytest.approx(p, abs=1e-12)
            assert m.recall == pytest.approx(r, abs=1e-12)
            assert m.mean_error == pytest.approx(eps, abs=1e-9)

    def test_swapping_tree_and_gt_swaps_precision_and_recall(self):
        rng = np.random.default_rng(5)
        dims = (16, 16, 16)
        a = walk(rng, dims, 30)
        b = walk(rng, dims, 30, start=(10, 10, 10))
        ab = tree_metrics(
            tree_from_polyline(a), CenterlineGT(dims=dims, branches=(b,)), 2.0
        )
        ba = tree_metrics(
            tree_from_polyline(b), CenterlineGT(dims=dims, branches=(a,)), 2.0
        )
        assert ab.precision == ba.recall
        assert ab.recall == ba.precision

    def test_zero_error_iff_gt_covered(self):
        dims = (32, 32, 32)
        gt = straight_gt(dims, 16, 16, x0=8, x1=20)
        superset = straight_gt(dims, 16, 16, x0=4, x1=28)
        m = tree_metrics(centerline_to_tree(superset), gt, rho=2.0)
        assert m.mean_error == 0.0
        assert m.recall == 1.0
        m2 = tree_metrics(centerline_to_tree(gt), superset, rho=2.0)
        assert m2.mean_error > 0.0

    def test_monotone_in_rho(self):
        rng = np.random.default_rng(17)
        dims = (16, 16, 16)
        tree = tree_from_polyline(walk(rng, dims, 25))
        gt = CenterlineGT(dims=dims, branches=(walk(rng, dims, 25,
                                                     start=(3, 12, 5)),))
        last_p, last_r = 0.0, 0.0
        for rho in (0.5, 1.0, 2.0, 4.0, 8.0):
            m = tree_metrics(tree, gt, rho=rho)
            assert m.precision >= last_p and m.recall >= last_r
            last_p, last_r = m.precision, m.recall

    def test_phantom_ground_truth_is_self_consistent(self):
        _, gt = make_phantom("bifurcation")
        m = tree_metrics(centerline_to_tree(gt), gt, rho=2.0)
        assert m.precision == 1.0 and m.recall == 1.0
        assert m.mean_error == 0.0
        assert m.acyclic

    def test_bad_rho_rejected(self):
        gt = straight_gt((32, 32, 32), 16, 16)
        with pytest.raises(ValueError, match="rho"):
            tree_metrics(centerline_to_tree(gt), gt, rho=0.0)

    def test_empty_tree_rejected(self):
        gt = straight_gt((32, 32, 32), 16, 16)
        empty = GeodesicTree(nodes=(), edges=(), roots=())
        with pytest.raises(ValueError, match="empty"):
            tree_metrics(empty, gt, rho=2.0)

    def test_tree_outside_volume_rejected(self):
        gt = straight_gt((32, 32, 32), 16, 16)
        stray = tree_from_polyline(np.array([[30, 16, 16], [31, 16, 16],
                                             [32, 16, 16]]))
        with pytest.raises(ValueError, match="outside"):
            tree_metrics(stray, gt, rho=2.0)

    def test_metrics_range_validation(self):
        with pytest.raises(ValueError, match="precision"):
            TreeMetrics(precision=1.5, recall=0.5, mean_error=0.0,
                        rho=2.0, acyclic=True, n_nodes=1, n_edges=0)


class TestCsv:
    def test_header_and_row_agree(self):
        header = metrics_csv_header()
        m = TreeMetrics(precision=0.975, recall=1.0, mean_error=0.8125,
                        rho=2.0, acyclic=True, n_nodes=3, n_edges=2)
        row = metrics_csv_row("svt_04", "N1", m)
        assert len(header.split(",")) == len(row.split(","))
        cells = row.split(",")
        assert cells[0] == "svt_04" and cells[1] == "N1"
        assert float(cells[2]) == 2.0
        assert float(cells[3]) == 0.975
        assert float(cells[5]) == 0.8125
        assert cells[6] == "1"
