"""Filterbank tests.

Oracles: scipy.stats.norm for the impulse values, closed-form separable
Gaussian derivatives for the finite-difference machinery, exact power-of-two
expressions for the unit-ellipsoid triple, and exact signed-permutation
resampling for the steering operator.
"""

import numpy as np
import pytest
from scipy.stats import norm

from vesseltrace.kernels import (
    Dictionary,
    DiscreteKernel,
    KernelConfig,
    KernelParams,
    build_kernel,
    default_dictionary,
    degenerate_kernels,
    dump_dictionary,
    eval_gamma,
    gauge_frame_at,
    load_dictionary,
    response_identity_residuals,
    steer_kernel,
    unit_ellipsoid_semiaxes,
)
from vesseltrace.kernels import _fd_grad_hess, _support_centers
from vesseltrace.volume import eig_sym3, eig_sym3_field, spd_exp, vec_to_sym_field


def oracle_gamma(x, sigma, curvature):
    """Independent impulse evaluation: warp, then product of 1D pdfs."""
    x1, x2, x3 = x
    c0, c1, c2 = curvature
    w2 = x2 + c0 * x1 + c1 * x1 * x1
    w3 = x3 + c2 * x1 * x1 * x1
    return (
        norm.pdf(x1, scale=sigma[0])
        * norm.pdf(w2, scale=sigma[1])
        * norm.pdf(w3, scale=sigma[2])
    )


def separable_grad_hess(x, sigma):
    """Closed-form derivatives of the zero-curvature impulse."""
    g = oracle_gamma(x, sigma, (0.0, 0.0, 0.0))
    s2 = np.asarray(sigma, dtype=float) ** 2
    x = np.asarray(x, dtype=float)
    grad = -(x / s2) * g
    hess = np.outer(x / s2, x / s2) * g
    hess[np.diag_indices(3)] = (x * x / s2**2 - 1.0 / s2) * g
    return grad, hess


TUBE = KernelParams(sigma=(2.0, 0.5, 0.5))
BENT = KernelParams(sigma=(2.0, 0.5, 0.5), curvature=(0.0, 0.15, 0.0))


class TestEvalGamma:
    def test_peak_value_at_unit_sigma(self):
        p = KernelParams(sigma=(1.0, 1.0, 1.0))
        assert eval_gamma(np.zeros(3), p) == pytest.approx(
            0.06349363593424097, rel=1e-12
        )

    def test_matches_pdf_product_oracle(self):
        rng = np.random.default_rng(7)
        p = KernelParams(sigma=(2.0, 0.5, 0.8), curvature=(0.3, 0.1, 0.05))
        pts = rng.uniform(-3, 3, size=(50, 3))
        expected = [oracle_gamma(x, p.sigma, p.curvature) for x in pts]
        np.testing.assert_allclose(eval_gamma(pts, p), expected, rtol=1e-12)

    def test_hand_computed_value(self):
        # x=(1, 0.2, -0.3), sigma=(2, .5, .5), c=(0.3, 0.1, 0.05):
        # warped = (1, 0.6, -0.25), exponent -0.97, norm 2*(2pi)^(-3/2)
        p = KernelParams(sigma=(2.0, 0.5, 0.5), curvature=(0.3, 0.1, 0.05))
        expected = 2.0 * 0.06349363593424097 * np.exp(-0.97)
        assert eval_gamma(np.array([1.0, 0.2, -0.3]), p) == pytest.approx(
            expected, rel=1e-12
        )

    def test_even_symmetry_without_curvature(self):
        pts = np.array([[1.0, 0.3, -0.2], [0.5, -1.0, 2.0]])
        v1 = eval_gamma(pts, TUBE)
        v2 = eval_gamma(-pts, TUBE)
        np.testing.assert_array_equal(v1, v2)

    def test_warped_point_symmetry_with_curvature(self):
        p = KernelParams(sigma=(2.0, 0.5, 0.5), curvature=(0.3, 0.1, 0.05))
        x1, x2, x3 = 1.2, 0.4, -0.6
        mirrored = np.array([-x1, x2 + 2 * 0.3 * x1, x3 + 2 * 0.05 * x1**3])
        assert eval_gamma(np.array([x1, x2, x3]), p) == pytest.approx(
            eval_gamma(mirrored, p), rel=1e-12
        )

    def test_nonnegative_and_unit_mass(self):
        # sigma >= 0.8 keeps the unit-step Riemann sum within 1e-4 of the
        # continuous unit mass; sharper kernels carry a few-percent excess.
        centers = _support_centers(11)
        g = eval_gamma(centers, KernelParams(sigma=(1.0, 0.8, 0.8)))
        assert np.all(g >= 0)
        assert np.sum(g) == pytest.approx(1.0, abs=1e-4)
        sharp = eval_gamma(centers, KernelParams(sigma=(1.0, 0.5, 0.5)))
        assert np.sum(sharp) == pytest.approx(1.0, abs=0.05)

    def test_param_validation_names_field(self):
        with pytest.raises(ValueError, match=r"sigma\[0\]"):
            KernelParams(sigma=(0.1, 1.0, 1.0))
        with pytest.raises(ValueError, match=r"sigma\[2\]"):
            KernelParams(sigma=(1.0, 1.0, 11.0))
        with pytest.raises(ValueError, match=r"curvature\[1\]"):
            KernelParams(sigma=(1.0, 1.0, 1.0), curvature=(0.0, 1.5, 0.0))


class TestFiniteDifferences:
    def test_gradient_matches_closed_form(self):
        ax = np.linspace(-1.0, 1.0, 5)
        pts = np.stack(np.meshgrid(ax * 4, ax, ax, indexing="ij"), axis=-1)
        pts = pts.reshape(-1, 3)
        grad, _ = _fd_grad_hess(pts, TUBE, h=1.0 / 16)
        exact = np.array([separable_grad_hess(x, TUBE.sigma)[0] for x in pts])
        scale = np.abs(exact).max()
        assert np.abs(grad - exact).max() <= 1e-4 * scale

    def test_hessian_matches_closed_form(self):
        ax = np.linspace(-1.0, 1.0, 5)
        pts = np.stack(np.meshgrid(ax * 4, ax, ax, indexing="ij"), axis=-1)
        pts = pts.reshape(-1, 3)
        _, hess = _fd_grad_hess(pts, TUBE, h=1.0 / 16)
        exact = np.array([separable_grad_hess(x, TUBE.sigma)[1] for x in pts])
        scale = np.abs(exact).max()
        assert np.abs(hess - exact).max() <= 1e-4 * scale

    def test_hessian_symmetry(self):
        rng = np.random.default_rng(3)
        pts = rng.uniform(-2, 2, size=(20, 3))
        _, hess = _fd_grad_hess(pts, BENT, h=0.25)
        np.testing.assert_array_equal(hess, np.swapaxes(hess, 1, 2))


class TestUnitEllipsoid:
    def test_frozen_triple(self):
        psi = unit_ellipsoid_semiaxes(np.array([1.0, 2.0, 4.0]))
        np.testing.assert_allclose(
            psi, [2.0 ** (-2.0 / 3.0), 2.0 ** (-1.0 / 6.0), 2.0 ** (5.0 / 6.0)],
            rtol=1e-12,
        )
        np.testing.assert_allclose(psi, [0.6300, 0.8909, 1.7818], atol=5e-5)

    def test_unit_product(self):
        rng = np.random.default_rng(11)
        w = rng.uniform(0.01, 100, size=(200, 3))
        w.sort(axis=1)
        psi = unit_ellipsoid_semiaxes(w)
        np.testing.assert_allclose(np.prod(psi, axis=-1), 1.0, rtol=1e-12)

    def test_sign_insensitive(self):
        a = unit_ellipsoid_semiaxes(np.array([1.0, -2.0, 4.0]))
        b = unit_ellipsoid_semiaxes(np.array([1.0, 2.0, 4.0]))
        np.testing.assert_array_equal(a, b)

    def test_all_zero_collapses_to_unit_sphere(self):
        np.testing.assert_array_equal(
            unit_ellipsoid_semiaxes(np.zeros(3)), np.ones(3)
        )

    def test_vanishing_leading_pair_stays_finite(self):
        psi = unit_ellipsoid_semiaxes(np.array([0.0, 0.0, 5.0]))
        assert np.all(np.isfinite(psi))
        assert np.prod(psi) == pytest.approx(1.0, rel=1e-9)


class TestBuildKernel:
    def test_response_zero_mean_unit_norm(self):
        k = build_kernel(TUBE)
        assert abs(k.k_patch.mean()) < 1e-10
        assert np.linalg.norm(k.k_patch) == pytest.approx(1.0, rel=1e-12)

    def test_center_response_positive(self):
        k = build_kernel(TUBE)
        c = (k.support - 1) // 2
        assert k.k_patch[c, c, c] > 0

    def test_gauge_identity_on_dictionary_params(self):
        params = [KernelParams(s, c) for s, c in (
            ((2.0, 0.5, 0.5), (0.0, 0.0, 0.0)),
            ((2.0, 0.5, 0.5), (0.0, 0.15, 0.0)),
            ((2.0, 0.5, 0.5), (0.0, 0.3, 0.0)),
            ((2.0, 0.5, 0.5), (0.0, 0.0, 0.05)),
            ((2.0, 0.5, 0.5), (0.3, 0.1, 0.0)),
        )]
        for p in params:
            residuals, gamma_sums = response_identity_residuals(p)
            assert residuals.max() <= 1e-9
            np.testing.assert_allclose(gamma_sums, 1.0, atol=1e-10)

    def test_tensor_unit_determinant(self):
        k = build_kernel(BENT)
        k.validate()
        mats = spd_exp(k.tensor_patch.reshape(-1, 6)[0])
        assert np.linalg.det(mats) == pytest.approx(1.0, abs=1e-9)

    def test_tube_phi_first_axis(self):
        k = build_kernel(TUBE, kind="tube")
        axis = k.phi[:, 0]
        assert abs(np.dot(axis, [1.0, 0.0, 0.0])) >= np.cos(np.deg2rad(1.0))

    def test_tube_center_tensor_fast_along_axis(self):
        # center Hessian diag(-G/4, -4G, -4G): short semiaxis ratio 1/16
        k = build_kernel(TUBE, kind="tube")
        c = (k.support - 1) // 2
        t = spd_exp(k.tensor_patch[c, c, c])
        dec = eig_sym3(t)
        w = np.sort(dec.eigenvalues)
        assert w[0] / w[2] == pytest.approx(1.0 / 16.0, rel=0.05)
        # eigenvalues of exp(T) are all positive; smallest = cheapest direction
        small = dec.eigenvectors[:, int(np.argmin(dec.eigenvalues))]
        assert abs(small[0]) >= np.cos(np.deg2rad(1.0))

    def test_gamma_patch_is_impulse(self):
        k = build_kernel(TUBE)
        centers = _support_centers(k.support)
        np.testing.assert_allclose(
            k.gamma_patch.ravel(), eval_gamma(centers, TUBE), rtol=1e-12
        )

    def test_rejects_bad_support(self):
        with pytest.raises(ValueError, match="support"):
            build_kernel(TUBE, support=8)
        with pytest.raises(ValueError, match="oversample"):
            build_kernel(TUBE, oversample=1)


class TestGaugeFrame:
    def test_off_axis_tube_point(self):
        f = gauge_frame_at(np.array([0.0, 0.3, 0.0]), TUBE)
        np.testing.assert_allclose(f.omega, [0.0, -1.0, 0.0], atol=1e-9)
        np.testing.assert_allclose(f.gamma_weights, [0.0, 1.0, 0.0], atol=1e-9)
        assert f.gamma_weights.sum() == pytest.approx(1.0, abs=1e-10)
        assert abs(np.dot(f.omega, f.upsilon)) < 1e-12
        assert np.linalg.norm(f.upsilon) == pytest.approx(1.0, rel=1e-12)

    def test_weights_sum_to_one_generic(self):
        rng = np.random.default_rng(5)
        for x in rng.uniform(-2, 2, size=(10, 3)):
            f = gauge_frame_at(x, BENT)
            assert f.gamma_weights.sum() == pytest.approx(1.0, abs=1e-10)
            assert np.linalg.norm(f.omega) == pytest.approx(1.0, rel=1e-12)


class TestDegenerateKernels:
    def test_delta_matches_log_closed_form(self):
        delta, _ = degenerate_kernels(sigma_delta=0.5, support=11)
        centers = _support_centers(11)
        s2 = 0.25
        g = eval_gamma(centers, KernelParams(sigma=(0.5, 0.5, 0.5)))
        r2 = np.sum(centers * centers, axis=1)
        log = g * (r2 / (s2 * s2) - 3.0 / s2)
        expected = -(log - log.mean())
        expected /= np.linalg.norm(expected)
        np.testing.assert_allclose(delta.k_patch.ravel(), expected, rtol=1e-12)

    def test_delta_center_positive(self):
        delta, _ = degenerate_kernels()
        c = (delta.support - 1) // 2
        assert delta.k_patch[c, c, c] > 0

    def test_delta_isotropic_under_axis_rotations(self):
        delta, _ = degenerate_kernels()
        for axes in ((0, 1), (0, 2), (1, 2)):
            np.testing.assert_allclose(
                np.rot90(delta.k_patch, axes=axes), delta.k_patch, atol=1e-10
            )

    def test_flat_is_negated_delta_with_uniform_impulse(self):
        delta, flat = degenerate_kernels(support=11)
        np.testing.assert_array_equal(flat.k_patch, -delta.k_patch)
        np.testing.assert_array_equal(flat.gamma_patch, np.full((11,) * 3, 1.0 / 11**3))
        assert flat.gamma_patch.sum() == pytest.approx(1.0, rel=1e-12)

    def test_identity_tensors(self):
        delta, flat = degenerate_kernels()
        np.testing.assert_array_equal(delta.tensor_patch, 0.0)
        np.testing.assert_array_equal(flat.tensor_patch, 0.0)

    def test_delta_impulse_mass_close_to_unit(self):
        delta, _ = degenerate_kernels(sigma_delta=0.5, support=11)
        assert delta.gamma_patch.sum() == pytest.approx(1.0, abs=0.05)

    def test_delta_response_to_impulse_reproduces_patch(self):
        from scipy.ndimage import convolve

        delta, _ = degenerate_kernels(support=7)
        impulse = np.zeros((7, 7, 7))
        impulse[3, 3, 3] = 1.0
        response = convolve(impulse, delta.k_patch, mode="constant")
        np.testing.assert_allclose(response, delta.k_patch, atol=1e-15)

    def test_sigma_delta_range(self):
        with pytest.raises(ValueError, match="sigma_delta"):
            degenerate_kernels(sigma_delta=0.0)
        with pytest.raises(ValueError, match="sigma_delta"):
            degenerate_kernels(sigma_delta=1.5)


def synthetic_kernel(seed=0, support=11):
    """Identity-phi kernel with random patches (steering operator fixture)."""
    rng = np.random.default_rng(seed)
    s = support
    k = rng.standard_normal((s, s, s))
    k -= k.mean()
    k /= np.linalg.norm(k)
    gamma = rng.uniform(0.0, 1.0, size=(s, s, s))
    tensor = np.zeros((s, s, s, 6))
    # trace-free random logs keep determinants at exactly one
    a = rng.standard_normal((s, s, s))
    b = rng.standard_normal((s, s, s))
    tensor[..., 0] = a
    tensor[..., 3] = b
    tensor[..., 5] = -(a + b)
    tensor[..., 1] = 0.1 * rng.standard_normal((s, s, s))
    return DiscreteKernel(
        support=s, k_patch=k, gamma_patch=gamma, tensor_patch=tensor,
        phi=np.eye(3), kind="tube", params=None,
    )


ROT90_Z = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
ROT90_Y = np.array([[0.0, 0.0, 1.0], [0.0, 1.0, 0.0], [-1.0, 0.0, 0.0]])


class TestSteering:
    def test_identity_steer_is_noop(self):
        k = build_kernel(TUBE, kind="tube")
        s = steer_kernel(k, k.phi)
        assert np.abs(s.k_patch - k.k_patch).max() <= 1e-6
        assert np.abs(s.tensor_patch - k.tensor_patch).max() <= 1e-6

    def test_exact_quarter_turn_permutes_grid(self):
        k = synthetic_kernel()
        s = steer_kernel(k, ROT90_Z)
        # out(y) = in(R^T y): rotating +90 about z sends +x to +y
        expected = np.rot90(k.k_patch, k=1, axes=(0, 1))
        np.testing.assert_array_equal(s.k_patch, expected)
        np.testing.assert_array_equal(
            s.gamma_patch, np.rot90(k.gamma_patch, k=1, axes=(0, 1))
        )

    def test_exact_quarter_turn_conjugates_tensors(self):
        k = synthetic_kernel()
        s = steer_kernel(k, ROT90_Z)
        logs = vec_to_sym_field(k.tensor_patch.reshape(-1, 6))
        rotated = np.einsum("ij,njk,lk->nil", ROT90_Z, logs, ROT90_Z)
        expected = np.rot90(
            rotated.reshape(11, 11, 11, 3, 3), k=1, axes=(0, 1)
        )
        got = vec_to_sym_field(s.tensor_patch.reshape(-1, 6)).reshape(
            11, 11, 11, 3, 3
        )
        np.testing.assert_array_equal(got, expected)

    def test_compose_of_exact_turns_matches_direct(self):
        k = synthetic_kernel(seed=4)
        two_step = steer_kernel(steer_kernel(k, ROT90_Z), ROT90_Y @ ROT90_Z)
        direct = steer_kernel(k, ROT90_Y @ ROT90_Z)
        np.testing.assert_array_equal(two_step.k_patch, direct.k_patch)
        np.testing.assert_array_equal(two_step.tensor_patch, direct.tensor_patch)

    def test_real_kernel_quarter_turn(self):
        k = build_kernel(TUBE, kind="tube")
        s = steer_kernel(k, ROT90_Z @ k.phi)
        expected = np.rot90(k.k_patch, k=1, axes=(0, 1))
        assert np.abs(s.k_patch - expected).max() <= 1e-9

    def test_l2_norm_attenuation_envelope(self):
        # The cross-profile peaks near Nyquist, so trilinear resampling at
        # generic angles attenuates it (measured 0.81-0.96 here); the
        # envelope is pinned so a resampling regression cannot hide.
        from scipy.spatial.transform import Rotation

        k = build_kernel(TUBE, kind="tube")
        diag = np.ones(3) / np.sqrt(3.0)
        rotations = [
            Rotation.from_rotvec([np.deg2rad(30), 0.0, 0.0]).as_matrix(),
            Rotation.from_rotvec(np.deg2rad(5) * diag).as_matrix(),
            Rotation.from_rotvec(np.deg2rad(30) * diag).as_matrix(),
            Rotation.from_rotvec(np.deg2rad(45) * diag).as_matrix(),
        ]
        for r in rotations:
            s = steer_kernel(k, r @ k.phi)
            assert 0.78 <= np.linalg.norm(s.k_patch) <= 1.0 + 1e-9

    def test_steered_tensors_keep_unit_determinant(self):
        from scipy.spatial.transform import Rotation

        k = build_kernel(BENT)
        r = Rotation.from_rotvec([0.4, -0.2, 0.7]).as_matrix()
        s = steer_kernel(k, r @ k.phi)
        w, _ = eig_sym3_field(vec_to_sym_field(s.tensor_patch.reshape(-1, 6)))
        dets = np.exp(np.sum(w, axis=-1))
        assert np.abs(dets - 1.0).max() <= 1e-6
        assert np.allclose(s.phi, r @ k.phi)

    def test_rejects_non_orthonormal_basis(self):
        k = build_kernel(TUBE, kind="tube")
        bad = np.eye(3)
        bad[0, 0] = 1.1
        with pytest.raises(ValueError, match="orthonormal"):
            steer_kernel(k, bad)

    def test_rejects_degenerate_kinds(self):
        delta, flat = degenerate_kernels()
        with pytest.raises(ValueError, match="kind"):
            steer_kernel(delta, np.eye(3))
        with pytest.raises(ValueError, match="kind"):
            steer_kernel(flat, np.eye(3))


class TestDictionary:
    def test_default_counts_and_kinds(self):
        d = default_dictionary()
        assert len(d.curvilinear) == 5
        assert d.tube.kind == "tube"
        assert d.delta.kind == "delta"
        assert d.flat.kind == "flat"
        assert len(d.all_kernels()) == 8
        assert len(d.oriented_kernels()) == 6
        assert d.support == 11
        for k in d.all_kernels():
            k.validate()

    def test_support_override(self):
        d = default_dictionary(KernelConfig(support=7))
        assert {k.support for k in d.all_kernels()} == {7}

    def test_invalid_config_names_field(self):
        with pytest.raises(ValueError, match="support"):
            KernelConfig(support=8)
        with pytest.raises(ValueError, match="oversample"):
            KernelConfig(oversample=1)
        with pytest.raises(ValueError, match="sigma_delta"):
            KernelConfig(sigma_delta=2.0)
        with pytest.raises(ValueError, match="curvilinear"):
            KernelConfig(curvilinear=())

    def test_mixed_supports_rejected(self):
        d = default_dictionary()
        small = build_kernel(TUBE, support=7, kind="tube")
        with pytest.raises(ValueError, match="support"):
            Dictionary(
                curvilinear=d.curvilinear, tube=small, delta=d.delta, flat=d.flat
            )

    def test_dump_load_round_trip(self, tmp_path):
        d = default_dictionary(KernelConfig(support=7))
        dump_dictionary(d, tmp_path / "dict")
        loaded = load_dictionary(tmp_path / "dict")
        assert len(loaded.curvilinear) == len(d.curvilinear)
        for a, b in zip(d.all_kernels(), loaded.all_kernels()):
            assert a.kind == b.kind
            np.testing.assert_array_equal(a.k_patch, b.k_patch)
            np.testing.assert_array_equal(a.gamma_patch, b.gamma_patch)
            np.testing.assert_array_equal(a.tensor_patch, b.tensor_patch)
            if a.phi is None:
                assert b.phi is None
            else:
                np.testing.assert_array_equal(a.phi, b.phi)
            if a.params is None:
                assert b.params is None
            else:
                assert a.params.sigma == b.params.sigma
                assert a.params.curvature == b.params.curvature
