"""Shared generators and reference implementations for the test suite."""

import numpy as np

from curvestream.solvers import (
    ThreeLevelSparseProblem,
    TwoLevelSparseProblem,
)


def random_two_level_problem(rng, m=None, p=None, q=None, max_rows=12):
    """Random well-posed two-level problem with small dimensions."""
    m = m or int(rng.integers(1, 9))
    p = p or int(rng.integers(1, 7))
    q = q or int(rng.integers(1, 7))
    groups = []
    surplus = 0
    for i in range(m):
        lo = q + (1 if i < m - 1 else max(0, p - surplus))
        rows = int(rng.integers(lo, max(lo + 1, max_rows + 1)))
        surplus += rows - q
        groups.append((rng.standard_normal(rows),
                       rng.standard_normal((rows, p)),
                       rng.standard_normal((rows, q))))
    return TwoLevelSparseProblem(groups=groups)


def random_three_level_problem(rng, m=None, n=None, p=None, q1=None, q2=None):
    """Random well-posed three-level problem with small dimensions."""
    m = m or int(rng.integers(1, 4))
    p = p or int(rng.integers(1, 4))
    q1 = q1 or int(rng.integers(1, 4))
    q2 = q2 or int(rng.integers(1, 3))
    groups = []
    for i in range(m):
        n_i = (n[i] if n is not None else int(rng.integers(1, 4)))
        inner = []
        surplus = 0
        for j in range(n_i):
            lo = q2 + (1 if j < n_i - 1 else max(0, q1 + (p if i == 0 and j == n_i - 1 else 0) - surplus))
            rows = int(rng.integers(lo, lo + 5))
            surplus += rows - q2
            inner.append((rng.standard_normal(rows),
                          rng.standard_normal((rows, p)),
                          rng.standard_normal((rows, q1)),
                          rng.standard_normal((rows, q2))))
        groups.append(inner)
    return ThreeLevelSparseProblem(groups=groups)


def assert_two_level_close(got, want, rtol, atol=1e-12):
    np.testing.assert_allclose(got.x1, want.x1, rtol=rtol, atol=atol)
    np.testing.assert_allclose(got.A11, want.A11, rtol=rtol, atol=atol)
    for i in range(len(got.x2)):
        np.testing.assert_allclose(got.x2[i], want.x2[i], rtol=rtol, atol=atol)
        np.testing.assert_allclose(got.A22[i], want.A22[i], rtol=rtol, atol=atol)
        np.testing.assert_allclose(got.A12[i], want.A12[i], rtol=rtol, atol=atol)


def assert_three_level_close(got, want, rtol, atol=1e-12):
    np.testing.assert_allclose(got.x1, want.x1, rtol=rtol, atol=atol)
    np.testing.assert_allclose(got.A11, want.A11, rtol=rtol, atol=atol)
    for i in range(len(got.x2)):
        np.testing.assert_allclose(got.x2[i], want.x2[i], rtol=rtol, atol=atol)
        np.testing.assert_allclose(got.A22[i], want.A22[i], rtol=rtol, atol=atol)
        np.testing.assert_allclose(got.A12[i], want.A12[i], rtol=rtol, atol=atol)
        for j in range(len(got.x2_inner[i])):
            np.testing.assert_allclose(got.x2_inner[i][j], want.x2_inner[i][j],
                                       rtol=rtol, atol=atol)
            np.testing.assert_allclose(got.A22_inner[i][j], want.A22_inner[i][j],
                                       rtol=rtol, atol=atol)
            np.testing.assert_allclose(got.A12_inner[i][j], want.A12_inner[i][j],
                                       rtol=rtol, atol=atol)
            np.testing.assert_allclose(got.A12_cross[i][j], want.A12_cross[i][j],
                                       rtol=rtol, atol=atol)


# ---------------------------------------------------------------------------
# Grouped-design generators and dense mixed-model references
# ---------------------------------------------------------------------------

def random_two_level_data(rng, m=5, n_lo=5, n_hi=9):
    """Long-format (x, y, group) with a wiggly signal per group."""
    xs, ys, gs = [], [], []
    for i in range(m):
        n_i = int(rng.integers(n_lo, n_hi + 1))
        x = rng.uniform(0, 1, n_i)
        y = (np.sin(2 * np.pi * x) + 0.5 * rng.standard_normal()
             + 0.3 * x * rng.standard_normal() + 0.1 * rng.standard_normal(n_i))
        xs.append(x)
        ys.append(y)
        gs.extend([f"g{i}"] * n_i)
    return np.concatenate(xs), np.concatenate(ys), gs


def random_three_level_data(rng, m=3, n_lo=2, n_hi=3, o_lo=5, o_hi=8):
    xs, ys, gs, ss = [], [], [], []
    for i in range(m):
        n_i = int(rng.integers(n_lo, n_hi + 1))
        for j in range(n_i):
            o_ij = int(rng.integers(o_lo, o_hi + 1))
            x = rng.uniform(0, 1, o_ij)
            y = (np.sin(2 * np.pi * x) + 0.4 * rng.standard_normal()
                 + 0.2 * rng.standard_normal() + 0.1 * rng.standard_normal(o_ij))
            xs.append(x)
            ys.append(y)
            gs.extend([f"g{i}"] * o_ij)
            ss.extend([f"s{j}"] * o_ij)
    return np.concatenate(xs), np.concatenate(ys), gs, ss


def stack_two_level_design(design):
    """C = [X | Zgbl | blockdiag([X_i Zgrp_i])] plus the stacked response."""
    m, p, q = design.m, design.p, design.q
    N = sum(design.n)
    C = np.zeros((N, p + m * q))
    y = np.empty(N)
    row = 0
    for i in range(m):
        n_i = design.n[i]
        C[row:row + n_i, :2] = design.X[i]
        C[row:row + n_i, 2:p] = design.Zgbl[i]
        C[row:row + n_i, p + i * q:p + i * q + 2] = design.X[i]
        C[row:row + n_i, p + i * q + 2:p + (i + 1) * q] = design.Zgrp[i]
        y[row:row + n_i] = design.y[i]
        row += n_i
    return C, y


def stack_three_level_design(design):
    """Full dense C with columns [global | per i: (g-block | per j: h-block)]."""
    m, p, q1, q2 = design.m, design.p, design.q1, design.q2
    n = design.n
    N = sum(yij.shape[0] for inner in design.y for yij in inner)
    ncols = p + sum(q1 + n_i * q2 for n_i in n)
    C = np.zeros((N, ncols))
    y = np.empty(N)
    row = 0
    col_g = p
    for i in range(m):
        col_h = col_g + q1
        for j in range(n[i]):
            o_ij = design.y[i][j].shape[0]
            sl = slice(row, row + o_ij)
            C[sl, :2] = design.X[i][j]
            C[sl, 2:p] = design.Zgbl[i][j]
            C[sl, col_g:col_g + 2] = design.X[i][j]
            C[sl, col_g + 2:col_g + q1] = design.Zg[i][j]
            h0 = col_h + j * q2
            C[sl, h0:h0 + 2] = design.X[i][j]
            C[sl, h0 + 2:h0 + q2] = design.Zh[i][j]
            y[sl] = design.y[i][j]
            row += o_ij
        col_g += q1 + n[i] * q2
    return C, y


def two_level_penalty(design, var):
    """D with zero block for the fixed effects and G^{-1} for the random ones."""
    from scipy.linalg import block_diag
    m, K_gbl, K_grp = design.m, design.K_gbl, design.K_grp
    per_group = block_diag(var.Sigma, var.sigma_grp_sq * np.eye(K_grp))
    G = block_diag(var.sigma_gbl_sq * np.eye(K_gbl),
                   *([per_group] * m))
    return block_diag(np.zeros((2, 2)), np.linalg.inv(G))


def three_level_penalty(design, var):
    from scipy.linalg import block_diag
    blocks = [var.sigma_gbl_sq * np.eye(design.K_gbl)]
    for n_i in design.n:
        per_sub = block_diag(var.Sigma_h, var.sigma_grp_h_sq * np.eye(design.K_h))
        blocks.append(block_diag(var.Sigma_g,
                                 var.sigma_grp_g_sq * np.eye(design.K_g),
                                 *([per_sub] * n_i)))
    G = block_diag(*blocks)
    return block_diag(np.zeros((2, 2)), np.linalg.inv(G))


def dense_blup(design, var, level):
    """Reference mixed-model solution: coefficient vector and full covariance."""
    if level == 2:
        C, y = stack_two_level_design(design)
        D = two_level_penalty(design, var)
    else:
        C, y = stack_three_level_design(design)
        D = three_level_penalty(design, var)
    A = C.T @ C / var.sigma_eps_sq + D
    cov = np.linalg.inv(A)
    coef = cov @ (C.T @ y / var.sigma_eps_sq)
    return coef, cov
