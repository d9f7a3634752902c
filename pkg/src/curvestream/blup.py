"""Streamlined best linear unbiased prediction for group-specific curves.

Variance parameters are supplied by the caller; estimation belongs to the
variational path.  The fits carry exactly the covariance sub-blocks needed
for pointwise confidence bands, which is what distinguishes them from what
generic mixed-model software returns.
"""

from dataclasses import dataclass, field

import numpy as np

from .designs import (
    ThreeLevelDesign,
    TwoLevelDesign,
    VarianceParamsThreeLevel,
    VarianceParamsTwoLevel,
)
from .distributions import matrix_inv_sqrt
from .exceptions import UnknownGroupError
from .solvers import (
    ThreeLevelSparseProblem,
    TwoLevelSparseProblem,
    solve_three_level,
    solve_two_level,
)
from .splines import osullivan_basis


def build_two_level_blup_blocks(design: TwoLevelDesign,
                                var: VarianceParamsTwoLevel) -> TwoLevelSparseProblem:
    """Per-group sparse blocks whose normal equations are the BLUP equations."""
    m = design.m
    K_gbl, K_grp = design.K_gbl, design.K_grp
    p, q = design.p, design.q
    inv_se = 1.0 / np.sqrt(var.sigma_eps_sq)
    inv_sgbl = 1.0 / np.sqrt(var.sigma_gbl_sq)
    inv_sgrp = 1.0 / np.sqrt(var.sigma_grp_sq)
    Sigma_inv_half = matrix_inv_sqrt(var.Sigma)

    groups = []
    for i in range(m):
        n_i = design.n[i]
        rows = n_i + K_gbl + 2 + K_grp
        b = np.zeros(rows)
        b[:n_i] = inv_se * design.y[i]

        B = np.zeros((rows, p))
        B[:n_i, :2] = inv_se * design.X[i]
        B[:n_i, 2:] = inv_se * design.Zgbl[i]
        B[n_i:n_i + K_gbl, 2:] = (m ** -0.5) * inv_sgbl * np.eye(K_gbl)

        Bd = np.zeros((rows, q))
        Bd[:n_i, :2] = inv_se * design.X[i]
        Bd[:n_i, 2:] = inv_se * design.Zgrp[i]
        Bd[n_i + K_gbl:n_i + K_gbl + 2, :2] = Sigma_inv_half
        Bd[n_i + K_gbl + 2:, 2:] = inv_sgrp * np.eye(K_grp)
        groups.append((b, B, Bd))
    return TwoLevelSparseProblem(groups=groups)


def build_three_level_blup_blocks(design: ThreeLevelDesign,
                                  var: VarianceParamsThreeLevel) -> ThreeLevelSparseProblem:
    """Per-subgroup sparse blocks for the three-level BLUP equations."""
    K_gbl, K_g, K_h = design.K_gbl, design.K_g, design.K_h
    p, q1, q2 = design.p, design.q1, design.q2
    n_total = sum(design.n)
    inv_se = 1.0 / np.sqrt(var.sigma_eps_sq)
    inv_sgbl = 1.0 / np.sqrt(var.sigma_gbl_sq)
    inv_sg = 1.0 / np.sqrt(var.sigma_grp_g_sq)
    inv_sh = 1.0 / np.sqrt(var.sigma_grp_h_sq)
    Sg_inv_half = matrix_inv_sqrt(var.Sigma_g)
    Sh_inv_half = matrix_inv_sqrt(var.Sigma_h)

    groups = []
    for i in range(design.m):
        n_i = design.n[i]
        inner = []
        for j in range(n_i):
            o_ij = design.y[i][j].shape[0]
            rows = o_ij + K_gbl + 2 + K_g + 2 + K_h
            b = np.zeros(rows)
            b[:o_ij] = inv_se * design.y[i][j]

            B = np.zeros((rows, p))
            B[:o_ij, :2] = inv_se * design.X[i][j]
            B[:o_ij, 2:] = inv_se * design.Zgbl[i][j]
            B[o_ij:o_ij + K_gbl, 2:] = (n_total ** -0.5) * inv_sgbl * np.eye(K_gbl)

            Bd = np.zeros((rows, q1))
            Bd[:o_ij, :2] = inv_se * design.X[i][j]
            Bd[:o_ij, 2:] = inv_se * design.Zg[i][j]
            r0 = o_ij + K_gbl
            Bd[r0:r0 + 2, :2] = (n_i ** -0.5) * Sg_inv_half
            Bd[r0 + 2:r0 + 2 + K_g, 2:] = (n_i ** -0.5) * inv_sg * np.eye(K_g)

            Bdd = np.zeros((rows, q2))
            Bdd[:o_ij, :2] = inv_se * design.X[i][j]
            Bdd[:o_ij, 2:] = inv_se * design.Zh[i][j]
            r1 = o_ij + K_gbl + 2 + K_g
            Bdd[r1:r1 + 2, :2] = Sh_inv_half
            Bdd[r1 + 2:, 2:] = inv_sh * np.eye(K_h)
            inner.append((b, B, Bd, Bdd))
        groups.append(inner)
    return ThreeLevelSparseProblem(groups=groups)


@dataclass(frozen=True)
class BlupFitTwoLevel:
    """Coefficients and covariance sub-blocks of a two-level BLUP fit."""

    beta_u_gbl: np.ndarray       # (p,) fixed effects then global spline coefs
    Cov_beta_u_gbl: np.ndarray   # (p, p)
    group_coefs: list            # per group: (q,) linear then spline deviations
    group_covs: list             # per group: (q, q)
    group_cross: list            # per group: (p, q)
    gbl_basis: object
    grp_basis: object
    group_labels: list
    variance: VarianceParamsTwoLevel = field(compare=False, default=None)

    @property
    def level(self):
        return 2


@dataclass(frozen=True)
class BlupFitThreeLevel:
    beta_u_gbl: np.ndarray
    Cov_beta_u_gbl: np.ndarray
    group_coefs: list
    group_covs: list
    group_cross: list            # per i: (p, q1)
    sub_coefs: list              # per i, j: (q2,)
    sub_covs: list               # per i, j: (q2, q2)
    sub_cross: list              # per i, j: (p, q2)
    sub_cross_gh: list           # per i, j: (q1, q2)
    gbl_basis: object
    g_basis: object
    h_basis: object
    group_labels: list
    subgroup_labels: list
    variance: VarianceParamsThreeLevel = field(compare=False, default=None)

    @property
    def level(self):
        return 3


def fit_blup_two_level(design: TwoLevelDesign,
                       var: VarianceParamsTwoLevel) -> BlupFitTwoLevel:
    """Best linear unbiased prediction with covariance sub-blocks, in O(m)."""
    problem = build_two_level_blup_blocks(design, var)
    sol = solve_two_level(problem)
    return BlupFitTwoLevel(
        beta_u_gbl=sol.x1, Cov_beta_u_gbl=sol.A11,
        group_coefs=sol.x2, group_covs=sol.A22, group_cross=sol.A12,
        gbl_basis=design.gbl_basis, grp_basis=design.grp_basis,
        group_labels=design.group_labels, variance=var,
    )


def fit_blup_three_level(design: ThreeLevelDesign,
                         var: VarianceParamsThreeLevel) -> BlupFitThreeLevel:
    problem = build_three_level_blup_blocks(design, var)
    sol = solve_three_level(problem)
    return BlupFitThreeLevel(
        beta_u_gbl=sol.x1, Cov_beta_u_gbl=sol.A11,
        group_coefs=sol.x2, group_covs=sol.A22, group_cross=sol.A12,
        sub_coefs=sol.x2_inner, sub_covs=sol.A22_inner,
        sub_cross=sol.A12_inner, sub_cross_gh=sol.A12_cross,
        gbl_basis=design.gbl_basis, g_basis=design.g_basis, h_basis=design.h_basis,
        group_labels=design.group_labels, subgroup_labels=design.subgroup_labels,
        variance=var,
    )


def _row_quad(C1, A, C2):
    """Row-wise c1^T A c2 for stacked evaluation rows."""
    return np.einsum("ij,jk,ik->i", C1, A, C2)


def _resolve_target(fit, group, subgroup):
    if subgroup is not None and group is None:
        raise UnknownGroupError("subgroup requires a group label")
    i = j = None
    if group is not None:
        try:
            i = fit.group_labels.index(str(group))
        except ValueError:
            raise UnknownGroupError(f"unknown group {group!r}") from None
    if subgroup is not None:
        if fit.level != 3:
            raise UnknownGroupError("subgroup targets need a three-level fit")
        try:
            j = fit.subgroup_labels[i].index(str(subgroup))
        except ValueError:
            raise UnknownGroupError(
                f"unknown subgroup {subgroup!r} in group {group!r}") from None
    return i, j


def curve_mean_sd(fit, grid, group=None, subgroup=None):
    """Pointwise curve estimate and its standard deviation on a grid.

    The variance is the quadratic form of the evaluation rows against the
    stored covariance sub-blocks, including every cross block linking the
    levels that contribute to the requested curve.
    """
    grid = np.asarray(grid, dtype=float)
    i, j = _resolve_target(fit, group, subgroup)

    C_gbl = np.column_stack([np.ones(grid.size), grid,
                             osullivan_basis(grid, fit.gbl_basis)])
    mean = C_gbl @ fit.beta_u_gbl
    var = _row_quad(C_gbl, fit.Cov_beta_u_gbl, C_gbl)
    if i is None:
        return mean, np.sqrt(var)

    grp_basis = fit.grp_basis if fit.level == 2 else fit.g_basis
    C_grp = np.column_stack([np.ones(grid.size), grid,
                             osullivan_basis(grid, grp_basis)])
    mean = mean + C_grp @ fit.group_coefs[i]
    var = (var + _row_quad(C_grp, fit.group_covs[i], C_grp)
           + 2.0 * _row_quad(C_gbl, fit.group_cross[i], C_grp))
    if j is None:
        return mean, np.sqrt(var)

    C_h = np.column_stack([np.ones(grid.size), grid,
                           osullivan_basis(grid, fit.h_basis)])
    mean = mean + C_h @ fit.sub_coefs[i][j]
    var = (var + _row_quad(C_h, fit.sub_covs[i][j], C_h)
           + 2.0 * _row_quad(C_gbl, fit.sub_cross[i][j], C_h)
           + 2.0 * _row_quad(C_grp, fit.sub_cross_gh[i][j], C_h))
    return mean, np.sqrt(var)


def predict_curve(fit, grid, group=None, subgroup=None):
    """Curve estimate with pointwise standard errors; see curve_mean_sd."""
    return curve_mean_sd(fit, grid, group=group, subgroup=subgroup)
