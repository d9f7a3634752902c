"""Tests for streamlined BLUP fitting against dense mixed-model references."""

import numpy as np
import pytest

from curvestream.blup import (
    build_three_level_blup_blocks,
    build_two_level_blup_blocks,
    fit_blup_three_level,
    fit_blup_two_level,
    predict_curve,
)
from curvestream.designs import (
    VarianceParamsThreeLevel,
    VarianceParamsTwoLevel,
    build_three_level_design,
    build_two_level_design,
)
from curvestream.exceptions import UnknownGroupError
from curvestream.solvers import stack_three_level, stack_two_level

from helpers import (
    dense_blup,
    random_three_level_data,
    random_two_level_data,
    stack_three_level_design,
    stack_two_level_design,
    three_level_penalty,
    two_level_penalty,
)


def default_var2(rng=None):
    Sigma = np.array([[0.8, 0.2], [0.2, 0.5]])
    return VarianceParamsTwoLevel(sigma_eps_sq=0.04, sigma_gbl_sq=2.0,
                                  sigma_grp_sq=0.7, Sigma=Sigma)


def default_var3():
    return VarianceParamsThreeLevel(
        sigma_eps_sq=0.04, sigma_gbl_sq=2.0,
        sigma_grp_g_sq=0.7, sigma_grp_h_sq=0.4,
        Sigma_g=np.array([[0.8, 0.2], [0.2, 0.5]]),
        Sigma_h=np.array([[0.6, -0.1], [-0.1, 0.3]]),
    )


class TestBlockAssemblyTwoLevel:
    def test_block_shapes(self):
        rng = np.random.default_rng(40)
        x, y, g = random_two_level_data(rng, m=2, n_lo=3, n_hi=3)
        design = build_two_level_design(x, y, g, K_gbl=3, K_grp=3)
        problem = build_two_level_blup_blocks(design, default_var2())
        # rows = n_i + K_gbl + 2 + K_grp; columns p = 2 + K_gbl, q = 2 + K_grp
        b, B, Bd = problem.groups[0]
        assert b.shape == (3 + 3 + 2 + 3,)
        assert B.shape == (11, 5) and Bd.shape == (11, 5)

    def test_unit_scales_embed_design_verbatim(self):
        rng = np.random.default_rng(41)
        x, y, g = random_two_level_data(rng, m=1, n_lo=6, n_hi=6)
        design = build_two_level_design(x, y, g, K_gbl=3, K_grp=3)
        var = VarianceParamsTwoLevel(sigma_eps_sq=1.0, sigma_gbl_sq=1.0,
                                     sigma_grp_sq=1.0, Sigma=np.eye(2))
        problem = build_two_level_blup_blocks(design, var)
        _, B, _ = problem.groups[0]
        np.testing.assert_array_equal(B[:6, :2], design.X[0])
        np.testing.assert_array_equal(B[:6, 2:], design.Zgbl[0])

    def test_normal_equations_identity(self):
        rng = np.random.default_rng(42)
        x, y, g = random_two_level_data(rng, m=4)
        design = build_two_level_design(x, y, g, K_gbl=4, K_grp=3)
        var = default_var2()
        problem = build_two_level_blup_blocks(design, var)
        B, b = stack_two_level(problem)
        C, ystack = stack_two_level_design(design)
        D = two_level_penalty(design, var)
        lhs = B.T @ B
        rhs = C.T @ C / var.sigma_eps_sq + D
        np.testing.assert_allclose(lhs, rhs, rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(B.T @ b, C.T @ ystack / var.sigma_eps_sq,
                                   rtol=1e-12, atol=1e-12)


class TestBlockAssemblyThreeLevel:
    def test_row_count(self):
        rng = np.random.default_rng(43)
        x, y, g, s = random_three_level_data(rng, m=2, n_lo=2, n_hi=2,
                                             o_lo=4, o_hi=4)
        design = build_three_level_design(x, y, g, s, K_gbl=3, K_g=3, K_h=3)
        problem = build_three_level_blup_blocks(design, default_var3())
        b, B, Bd, Bdd = problem.groups[0][0]
        assert b.shape == (4 + 3 + 2 + 3 + 2 + 3,)
        assert B.shape[1] == 5 and Bd.shape[1] == 5 and Bdd.shape[1] == 5

    def test_unit_scaling_prefactors(self):
        rng = np.random.default_rng(44)
        x, y, g, s = random_three_level_data(rng, m=1, n_lo=1, n_hi=1)
        design = build_three_level_design(x, y, g, s, K_gbl=3, K_g=3, K_h=3)
        var = VarianceParamsThreeLevel(
            sigma_eps_sq=1.0, sigma_gbl_sq=1.0, sigma_grp_g_sq=1.0,
            sigma_grp_h_sq=1.0, Sigma_g=np.eye(2), Sigma_h=np.eye(2))
        problem = build_three_level_blup_blocks(design, var)
        _, B, Bd, Bdd = problem.groups[0][0]
        o = design.y[0][0].shape[0]
        np.testing.assert_allclose(B[o:o + 3, 2:], np.eye(3), atol=1e-15)
        np.testing.assert_allclose(Bd[o + 3:o + 5, :2], np.eye(2), atol=1e-15)
        np.testing.assert_allclose(Bdd[o + 3 + 2 + 3:o + 3 + 2 + 3 + 2, :2],
                                   np.eye(2), atol=1e-15)

    def test_normal_equations_identity(self):
        rng = np.random.default_rng(45)
        x, y, g, s = random_three_level_data(rng)
        design = build_three_level_design(x, y, g, s, K_gbl=3, K_g=3, K_h=3)
        var = default_var3()
        problem = build_three_level_blup_blocks(design, var)
        B, b = stack_three_level(problem)
        C, ystack = stack_three_level_design(design)
        D = three_level_penalty(design, var)
        np.testing.assert_allclose(B.T @ B, C.T @ C / var.sigma_eps_sq + D,
                                   rtol=1e-11, atol=1e-11)


class TestFitTwoLevel:
    def test_matches_dense_reference(self):
        rng = np.random.default_rng(46)
        x, y, g = random_two_level_data(rng, m=5)
        design = build_two_level_design(x, y, g, K_gbl=4, K_grp=3)
        var = default_var2()
        fit = fit_blup_two_level(design, var)
        coef, cov = dense_blup(design, var, level=2)
        p, q = design.p, design.q
        np.testing.assert_allclose(fit.beta_u_gbl, coef[:p], rtol=1e-8, atol=1e-10)
        np.testing.assert_allclose(fit.Cov_beta_u_gbl, cov[:p, :p],
                                   rtol=1e-8, atol=1e-10)
        for i in range(design.m):
            sl = slice(p + i * q, p + (i + 1) * q)
            np.testing.assert_allclose(fit.group_coefs[i], coef[sl],
                                       rtol=1e-8, atol=1e-10)
            np.testing.assert_allclose(fit.group_covs[i], cov[sl, sl],
                                       rtol=1e-8, atol=1e-10)
            np.testing.assert_allclose(fit.group_cross[i], cov[:p, sl],
                                       rtol=1e-8, atol=1e-10)

    def test_single_group_matches_dense(self):
        rng = np.random.default_rng(47)
        x, y, g = random_two_level_data(rng, m=1, n_lo=8, n_hi=8)
        design = build_two_level_design(x, y, g, K_gbl=3, K_grp=3)
        var = default_var2()
        fit = fit_blup_two_level(design, var)
        coef, _ = dense_blup(design, var, level=2)
        np.testing.assert_allclose(fit.beta_u_gbl, coef[:design.p],
                                   rtol=1e-8, atol=1e-10)

    def test_every_group_count_matches_dense(self):
        rng = np.random.default_rng(58)
        var = default_var2()
        for m in range(1, 9):
            x, y, g = random_two_level_data(rng, m=m, n_lo=6, n_hi=10)
            design = build_two_level_design(x, y, g, K_gbl=4, K_grp=3)
            fit = fit_blup_two_level(design, var)
            coef, cov = dense_blup(design, var, level=2)
            p, q = design.p, design.q
            np.testing.assert_allclose(fit.beta_u_gbl, coef[:p],
                                       rtol=1e-8, atol=1e-10)
            for i in range(m):
                sl = slice(p + i * q, p + (i + 1) * q)
                np.testing.assert_allclose(fit.group_covs[i], cov[sl, sl],
                                           rtol=1e-8, atol=1e-10)

    def test_low_noise_recovery(self):
        """Data generated exactly from coefficients is reproduced when the
        noise variance is tiny and the priors are diffuse."""
        rng = np.random.default_rng(48)
        m, K_gbl, K_grp = 3, 4, 3
        x, y0, g = random_two_level_data(rng, m=m, n_lo=12, n_hi=12)
        design0 = build_two_level_design(x, y0, g, K_gbl=K_gbl, K_grp=K_grp)
        beta = np.array([0.5, -1.0])
        ugbl = 0.5 * rng.standard_normal(K_gbl)
        y = []
        for i in range(m):
            ulin = 0.3 * rng.standard_normal(2)
            ugrp = 0.3 * rng.standard_normal(K_grp)
            y.append(design0.X[i] @ (beta + ulin) + design0.Zgbl[i] @ ugbl
                     + design0.Zgrp[i] @ ugrp)
        design = build_two_level_design(x, np.concatenate(y), g,
                                        K_gbl=K_gbl, K_grp=K_grp)
        var = VarianceParamsTwoLevel(sigma_eps_sq=1e-8, sigma_gbl_sq=1e4,
                                     sigma_grp_sq=1e4, Sigma=1e4 * np.eye(2))
        fit = fit_blup_two_level(design, var)
        for i in range(m):
            fitted = (design.X[i] @ fit.beta_u_gbl[:2]
                      + design.Zgbl[i] @ fit.beta_u_gbl[2:]
                      + design.X[i] @ fit.group_coefs[i][:2]
                      + design.Zgrp[i] @ fit.group_coefs[i][2:])
            assert np.abs(fitted - design.y[i]).max() < 1e-2

    def test_shrinkage_monotonicity(self):
        rng = np.random.default_rng(49)
        x, y, g = random_two_level_data(rng, m=4)
        design = build_two_level_design(x, y, g, K_gbl=4, K_grp=3)
        base = default_var2()
        small = VarianceParamsTwoLevel(
            sigma_eps_sq=base.sigma_eps_sq, sigma_gbl_sq=base.sigma_gbl_sq,
            sigma_grp_sq=1e-6, Sigma=base.Sigma)
        unit = VarianceParamsTwoLevel(
            sigma_eps_sq=base.sigma_eps_sq, sigma_gbl_sq=base.sigma_gbl_sq,
            sigma_grp_sq=1.0, Sigma=base.Sigma)
        fit_small = fit_blup_two_level(design, small)
        fit_unit = fit_blup_two_level(design, unit)
        for i in range(design.m):
            small_norm = np.linalg.norm(fit_small.group_coefs[i][2:])
            unit_norm = np.linalg.norm(fit_unit.group_coefs[i][2:])
            assert small_norm < unit_norm


class TestFitThreeLevel:
    def test_matches_dense_reference(self):
        rng = np.random.default_rng(50)
        x, y, g, s = random_three_level_data(rng, m=3, n_lo=2, n_hi=3)
        design = build_three_level_design(x, y, g, s, K_gbl=3, K_g=3, K_h=3)
        var = default_var3()
        fit = fit_blup_three_level(design, var)
        coef, cov = dense_blup(design, var, level=3)
        p, q1, q2 = design.p, design.q1, design.q2
        np.testing.assert_allclose(fit.beta_u_gbl, coef[:p], rtol=1e-8, atol=1e-10)
        col = p
        for i in range(design.m):
            gsl = slice(col, col + q1)
            np.testing.assert_allclose(fit.group_coefs[i], coef[gsl],
                                       rtol=1e-8, atol=1e-10)
            np.testing.assert_allclose(fit.group_covs[i], cov[gsl, gsl],
                                       rtol=1e-8, atol=1e-10)
            for j in range(design.n[i]):
                hsl = slice(col + q1 + j * q2, col + q1 + (j + 1) * q2)
                np.testing.assert_allclose(fit.sub_coefs[i][j], coef[hsl],
                                           rtol=1e-8, atol=1e-10)
                np.testing.assert_allclose(fit.sub_covs[i][j], cov[hsl, hsl],
                                           rtol=1e-8, atol=1e-10)
                np.testing.assert_allclose(fit.sub_cross[i][j], cov[:p, hsl],
                                           rtol=1e-8, atol=1e-10)
                np.testing.assert_allclose(fit.sub_cross_gh[i][j], cov[gsl, hsl],
                                           rtol=1e-8, atol=1e-10)
            col += q1 + design.n[i] * q2

    def test_single_group_boundary(self):
        rng = np.random.default_rng(51)
        x, y, g, s = random_three_level_data(rng, m=1, n_lo=1, n_hi=1,
                                             o_lo=10, o_hi=10)
        design = build_three_level_design(x, y, g, s, K_gbl=3, K_g=3, K_h=3)
        fit = fit_blup_three_level(design, default_var3())
        coef, _ = dense_blup(design, default_var3(), level=3)
        np.testing.assert_allclose(fit.beta_u_gbl, coef[:design.p],
                                   rtol=1e-8, atol=1e-10)

    def test_balanced_deep_shape_runs(self):
        # ten groups of five subgroups with 128 points each: the shape of a
        # frequency-sweep dataset with slices nested in specimens
        from curvestream.simbench import simulate_three_level
        sim = simulate_three_level(m=10, n_range=(5, 5), o_range=(128, 128),
                                   seed=13)
        design = build_three_level_design(sim.x, sim.y, sim.group,
                                          sim.subgroup,
                                          K_gbl=8, K_g=5, K_h=5)
        fit = fit_blup_three_level(design, default_var3())
        assert np.all(np.isfinite(fit.beta_u_gbl))
        grid = np.linspace(0.05, 0.95, 9)
        _, sd = predict_curve(fit, grid, group="g3", subgroup="s2")
        assert np.all(sd > 0)


class TestPredictCurve:
    def test_global_variance_matches_dense(self):
        rng = np.random.default_rng(52)
        x, y, g = random_two_level_data(rng, m=4)
        design = build_two_level_design(x, y, g, K_gbl=4, K_grp=3)
        var = default_var2()
        fit = fit_blup_two_level(design, var)
        _, cov = dense_blup(design, var, level=2)
        grid = np.linspace(x.min(), x.max(), 5)
        from curvestream.splines import osullivan_basis
        Cg = np.column_stack([np.ones(5), grid,
                              osullivan_basis(grid, design.gbl_basis)])
        mean, sd = predict_curve(fit, grid)
        p = design.p
        for k in range(5):
            want = Cg[k] @ cov[:p, :p] @ Cg[k]
            assert abs(sd[k] ** 2 - want) < 1e-8 * max(1.0, want)

    def test_group_variance_matches_dense(self):
        rng = np.random.default_rng(53)
        x, y, g = random_two_level_data(rng, m=3)
        design = build_two_level_design(x, y, g, K_gbl=4, K_grp=3)
        var = default_var2()
        fit = fit_blup_two_level(design, var)
        coef, cov = dense_blup(design, var, level=2)
        grid = np.linspace(x.min(), x.max(), 5)
        from curvestream.splines import osullivan_basis
        p, q = design.p, design.q
        Cg = np.column_stack([np.ones(5), grid,
                              osullivan_basis(grid, design.gbl_basis)])
        Cr = np.column_stack([np.ones(5), grid,
                              osullivan_basis(grid, design.grp_basis)])
        i = 1
        mean, sd = predict_curve(fit, grid, group=design.group_labels[i])
        full = np.zeros((5, p + design.m * q))
        full[:, :p] = Cg
        full[:, p + i * q:p + (i + 1) * q] = Cr
        for k in range(5):
            want_mean = full[k] @ coef
            want_var = full[k] @ cov @ full[k]
            assert abs(mean[k] - want_mean) < 1e-8 * max(1.0, abs(want_mean))
            assert abs(sd[k] ** 2 - want_var) < 1e-8 * max(1.0, want_var)

    def test_subgroup_variance_matches_dense(self):
        rng = np.random.default_rng(54)
        x, y, g, s = random_three_level_data(rng, m=2, n_lo=2, n_hi=2)
        design = build_three_level_design(x, y, g, s, K_gbl=3, K_g=3, K_h=3)
        var = default_var3()
        fit = fit_blup_three_level(design, var)
        coef, cov = dense_blup(design, var, level=3)
        grid = np.linspace(x.min(), x.max(), 4)
        from curvestream.splines import osullivan_basis
        p, q1, q2 = design.p, design.q1, design.q2
        Cg = np.column_stack([np.ones(4), grid,
                              osullivan_basis(grid, design.gbl_basis)])
        Cr = np.column_stack([np.ones(4), grid,
                              osullivan_basis(grid, design.g_basis)])
        Ch = np.column_stack([np.ones(4), grid,
                              osullivan_basis(grid, design.h_basis)])
        i, j = 1, 0
        mean, sd = predict_curve(fit, grid, group=design.group_labels[i],
                                 subgroup=design.subgroup_labels[i][j])
        col_g = p + sum(q1 + design.n[k] * q2 for k in range(i))
        full = np.zeros((4, cov.shape[0]))
        full[:, :p] = Cg
        full[:, col_g:col_g + q1] = Cr
        h0 = col_g + q1 + j * q2
        full[:, h0:h0 + q2] = Ch
        for k in range(4):
            want_mean = full[k] @ coef
            want_var = full[k] @ cov @ full[k]
            assert abs(mean[k] - want_mean) < 1e-8 * max(1.0, abs(want_mean))
            assert abs(sd[k] ** 2 - want_var) < 1e-8 * max(1.0, want_var)

    def test_mirrored_groups_give_mirrored_curves(self):
        rng = np.random.default_rng(55)
        n = 20
        x1 = rng.uniform(0, 1, n)
        v = np.sin(2 * np.pi * x1) + 0.2
        x = np.concatenate([x1, x1])
        y = np.concatenate([v, -v])
        g = ["a"] * n + ["b"] * n
        design = build_two_level_design(x, y, g, K_gbl=4, K_grp=3)
        fit = fit_blup_two_level(design, default_var2())
        grid = np.linspace(0.05, 0.95, 11)
        mean_a, _ = predict_curve(fit, grid, group="a")
        mean_b, _ = predict_curve(fit, grid, group="b")
        np.testing.assert_allclose(mean_a, -mean_b, atol=1e-8)

    def test_variance_positive_everywhere(self):
        rng = np.random.default_rng(56)
        x, y, g = random_two_level_data(rng, m=3)
        design = build_two_level_design(x, y, g, K_gbl=4, K_grp=3)
        fit = fit_blup_two_level(design, default_var2())
        grid = np.linspace(x.min(), x.max(), 33)
        for label in [None, "g0", "g1", "g2"]:
            _, sd = predict_curve(fit, grid, group=label)
            assert np.all(sd > 0)

    def test_unknown_group_rejected(self):
        rng = np.random.default_rng(57)
        x, y, g = random_two_level_data(rng, m=2)
        design = build_two_level_design(x, y, g, K_gbl=3, K_grp=3)
        fit = fit_blup_two_level(design, default_var2())
        with pytest.raises(UnknownGroupError):
            predict_curve(fit, np.linspace(0.2, 0.8, 3), group="nope")
