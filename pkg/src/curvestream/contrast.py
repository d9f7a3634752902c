"""Two-category contrast extension of the two-level variational fit.

The fixed-effect block carries the second category as an offset (so the
between-category contrast and its band read directly off the fit), while
every random-effect block is masked per category: a row from one category
has exact zeros in the other category's columns.  The group-level linear
deviations of both categories share one unstructured 4x4 covariance; the
group-level spline deviations share a single scale across categories.
"""

import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.stats import norm

from .designs import _group_in_order
from .distributions import _require_spd, matrix_inv_sqrt, matrix_sqrt
from .exceptions import DimensionMismatchError, SingleCategoryError
from .mfvb import DEFAULT_BETA_VARIANCE, DEFAULT_PRIOR_SCALE, FitOptions
from .solvers import TwoLevelSparseProblem, solve_two_level
from .splines import basis_from_data, osullivan_basis


@dataclass(frozen=True)
class CategorizedTwoLevelData:
    """Long-format two-level data with a 0/1 category indicator (1 = first
    category)."""

    x: np.ndarray
    y: np.ndarray
    group: list
    indicator: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        y = np.asarray(self.y, dtype=float)
        iota = np.asarray(self.indicator)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "indicator", iota.astype(float))
        if not (x.shape == y.shape == iota.shape and x.ndim == 1
                and len(self.group) == x.size):
            raise DimensionMismatchError(
                "x, y, group, indicator must be equal-length columns")
        if not np.all((iota == 0) | (iota == 1)):
            raise ValueError("indicator entries must be 0 or 1")


@dataclass(frozen=True)
class ContrastDesign:
    """Per-group blocks in the contrast layout.

    X carries [1, x, 1-iota, (1-iota) x]; L carries the per-category masked
    linear columns [iota, iota x, 1-iota, (1-iota) x]; the spline blocks
    stack the first category's masked columns before the second's.
    """

    y: list
    X: list                      # (n_i, 4)
    L: list                      # (n_i, 4)
    Zgbl: list                   # (n_i, 2 K_gbl)
    Zgrp: list                   # (n_i, 2 K_grp)
    gbl_basis: object
    grp_basis: object
    group_labels: list
    K_gbl: int
    K_grp: int

    @property
    def m(self):
        return len(self.y)

    @property
    def n(self):
        return [yi.shape[0] for yi in self.y]

    @property
    def p(self):
        return 4 + 2 * self.K_gbl

    @property
    def q(self):
        return 4 + 2 * self.K_grp


def build_contrast_design(data: CategorizedTwoLevelData, K_gbl=20, K_grp=10,
                          gbl_basis=None, grp_basis=None) -> ContrastDesign:
    """Assemble the masked two-category design from long-format columns."""
    iota = data.indicator
    if np.all(iota == iota[0]):
        raise SingleCategoryError(
            "only one category present; the contrast is unidentifiable")
    gbl = gbl_basis or basis_from_data(data.x, K_gbl)
    grp = grp_basis or basis_from_data(data.x, K_grp)
    labels, idx = _group_in_order([str(g) for g in data.group])
    ys, Xs, Ls, Zgbls, Zgrps = [], [], [], [], []
    for i in range(len(labels)):
        rows = np.flatnonzero(idx == i)
        x_i = data.x[rows]
        iota_i = iota[rows]
        other = 1.0 - iota_i
        ones = np.ones(x_i.size)
        ys.append(data.y[rows])
        Xs.append(np.column_stack([ones, x_i, other, other * x_i]))
        Ls.append(np.column_stack([iota_i, iota_i * x_i, other, other * x_i]))
        zg = osullivan_basis(x_i, gbl)
        zr = osullivan_basis(x_i, grp)
        Zgbls.append(np.column_stack([iota_i[:, None] * zg,
                                      other[:, None] * zg]))
        Zgrps.append(np.column_stack([iota_i[:, None] * zr,
                                      other[:, None] * zr]))
    return ContrastDesign(y=ys, X=Xs, L=Ls, Zgbl=Zgbls, Zgrp=Zgrps,
                          gbl_basis=gbl, grp_basis=grp, group_labels=labels,
                          K_gbl=gbl.K, K_grp=grp.K)


@dataclass(frozen=True)
class ContrastHyperparameters:
    """Priors for the contrast model: per-category global-spline scales, one
    shared group-spline scale, and a 4x4 linear-deviation covariance."""

    mu_beta: np.ndarray = None
    Sigma_beta: np.ndarray = None
    nu_eps: float = 1.0
    s_eps: float = DEFAULT_PRIOR_SCALE
    nu_gbl: float = 1.0
    s_gbl_a: float = DEFAULT_PRIOR_SCALE
    s_gbl_b: float = DEFAULT_PRIOR_SCALE
    nu_grp: float = 1.0
    s_grp: float = DEFAULT_PRIOR_SCALE
    nu_Sigma: float = 2.0
    s_Sigma: tuple = (DEFAULT_PRIOR_SCALE,) * 4

    def __post_init__(self):
        mu = np.zeros(4) if self.mu_beta is None else np.asarray(self.mu_beta, float)
        Sig = (DEFAULT_BETA_VARIANCE * np.eye(4) if self.Sigma_beta is None
               else np.asarray(self.Sigma_beta, float))
        object.__setattr__(self, "mu_beta", mu)
        object.__setattr__(self, "Sigma_beta", Sig)
        object.__setattr__(self, "s_Sigma", tuple(float(v) for v in self.s_Sigma))
        if mu.shape != (4,) or Sig.shape != (4, 4):
            raise ValueError("mu_beta must be length 4 and Sigma_beta 4x4")
        _require_spd(Sig)
        if len(self.s_Sigma) != 4 or any(v <= 0 for v in self.s_Sigma):
            raise ValueError("s_Sigma must be four positive scales")
        for name in ("nu_eps", "s_eps", "nu_gbl", "s_gbl_a", "s_gbl_b",
                     "nu_grp", "s_grp", "nu_Sigma"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class QStateContrast:
    mu: np.ndarray               # (4 + 2 K_gbl,)
    Sigma: np.ndarray
    group_mu: list               # per i: (4 + 2 K_grp,)
    group_Sigma: list
    group_cross: list
    xi_sigma_eps: float
    lambda_sigma_eps: float
    xi_sigma_gbl_a: float
    lambda_sigma_gbl_a: float
    xi_sigma_gbl_b: float
    lambda_sigma_gbl_b: float
    xi_sigma_grp: float
    lambda_sigma_grp: float
    xi_Sigma: float
    Lambda_Sigma: np.ndarray     # 4x4
    xi_a_eps: float
    lambda_a_eps: float
    xi_a_gbl_a: float
    lambda_a_gbl_a: float
    xi_a_gbl_b: float
    lambda_a_gbl_b: float
    xi_a_grp: float
    lambda_a_grp: float
    xi_A_Sigma: float
    Lambda_A_Sigma: np.ndarray   # 4x4 diagonal
    recip_sigma_eps: float
    recip_sigma_gbl_a: float
    recip_sigma_gbl_b: float
    recip_sigma_grp: float
    recip_a_eps: float
    recip_a_gbl_a: float
    recip_a_gbl_b: float
    recip_a_grp: float
    M_Sigma_inv: np.ndarray
    M_A_Sigma_inv: np.ndarray
    resid_expansion: float = field(default=float("nan"), compare=False)


def init_contrast_state(design: ContrastDesign,
                        hyper: ContrastHyperparameters) -> QStateContrast:
    """Neutral-scale start, mirroring the single-category initialization.

    The 4x4 covariance family uses the four-dimensional shape constants:
    the covariance shape grows by the group count, its auxiliary shape is
    nu + 4, and the inverse-moment factor is shape - 3.
    """
    m = design.m
    p, q = design.p, design.q
    K_gbl, K_grp = design.K_gbl, design.K_grp
    xi_eps = hyper.nu_eps + sum(design.n)
    xi_gbl = hyper.nu_gbl + K_gbl
    xi_grp = hyper.nu_grp + m * 2 * K_grp
    xi_Sig = hyper.nu_Sigma + 2 * (4 - 1) + m
    xi_AS = hyper.nu_Sigma + 4
    return QStateContrast(
        mu=np.zeros(p), Sigma=np.eye(p),
        group_mu=[np.zeros(q) for _ in range(m)],
        group_Sigma=[np.eye(q) for _ in range(m)],
        group_cross=[np.zeros((p, q)) for _ in range(m)],
        xi_sigma_eps=xi_eps, lambda_sigma_eps=xi_eps,
        xi_sigma_gbl_a=xi_gbl, lambda_sigma_gbl_a=xi_gbl,
        xi_sigma_gbl_b=xi_gbl, lambda_sigma_gbl_b=xi_gbl,
        xi_sigma_grp=xi_grp, lambda_sigma_grp=xi_grp,
        xi_Sigma=xi_Sig, Lambda_Sigma=(xi_Sig - 3.0) * np.eye(4),
        xi_a_eps=hyper.nu_eps + 1, lambda_a_eps=hyper.nu_eps + 1,
        xi_a_gbl_a=hyper.nu_gbl + 1, lambda_a_gbl_a=hyper.nu_gbl + 1,
        xi_a_gbl_b=hyper.nu_gbl + 1, lambda_a_gbl_b=hyper.nu_gbl + 1,
        xi_a_grp=hyper.nu_grp + 1, lambda_a_grp=hyper.nu_grp + 1,
        xi_A_Sigma=xi_AS, Lambda_A_Sigma=xi_AS * np.eye(4),
        recip_sigma_eps=1.0, recip_sigma_gbl_a=1.0, recip_sigma_gbl_b=1.0,
        recip_sigma_grp=1.0,
        recip_a_eps=1.0, recip_a_gbl_a=1.0, recip_a_gbl_b=1.0, recip_a_grp=1.0,
        M_Sigma_inv=np.eye(4), M_A_Sigma_inv=np.eye(4),
    )


def _contrast_problem(state, design, hyper):
    m = design.m
    K_gbl, K_grp = design.K_gbl, design.K_grp
    p, q = design.p, design.q
    se = np.sqrt(state.recip_sigma_eps)
    sa = np.sqrt(state.recip_sigma_gbl_a)
    sb = np.sqrt(state.recip_sigma_gbl_b)
    sgrp = np.sqrt(state.recip_sigma_grp)
    Sb_inv_half = matrix_inv_sqrt(hyper.Sigma_beta)
    M_half = matrix_sqrt(state.M_Sigma_inv)
    prior_rows = (m ** -0.5) * Sb_inv_half
    prior_rhs = prior_rows @ hyper.mu_beta
    gbl_scale = (m ** -0.5) * np.concatenate([np.full(K_gbl, sa),
                                              np.full(K_gbl, sb)])

    groups = []
    for i in range(m):
        n_i = design.n[i]
        rows = n_i + 4 + 2 * K_gbl + 4 + 2 * K_grp
        b = np.zeros(rows)
        b[:n_i] = se * design.y[i]
        b[n_i:n_i + 4] = prior_rhs

        B = np.zeros((rows, p))
        B[:n_i, :4] = se * design.X[i]
        B[:n_i, 4:] = se * design.Zgbl[i]
        B[n_i:n_i + 4, :4] = prior_rows
        B[n_i + 4:n_i + 4 + 2 * K_gbl, 4:] = np.diag(gbl_scale)

        Bd = np.zeros((rows, q))
        Bd[:n_i, :4] = se * design.L[i]
        Bd[:n_i, 4:] = se * design.Zgrp[i]
        r0 = n_i + 4 + 2 * K_gbl
        Bd[r0:r0 + 4, :4] = M_half
        Bd[r0 + 4:, 4:] = sgrp * np.eye(2 * K_grp)
        groups.append((b, B, Bd))
    return TwoLevelSparseProblem(groups=groups)


def contrast_cycle(state: QStateContrast, design: ContrastDesign,
                   hyper: ContrastHyperparameters,
                   workers=None) -> QStateContrast:
    """One coordinate-ascent cycle of the contrast model."""
    K_gbl = design.K_gbl
    sol = solve_two_level(_contrast_problem(state, design, hyper),
                          workers=workers)
    mu = sol.x1
    Sigma = sol.A11

    resid_total = 0.0
    Lambda_Sigma = state.M_A_Sigma_inv.copy()
    lam_grp = state.recip_a_grp
    for i in range(design.m):
        C_gbl = np.column_stack([design.X[i], design.Zgbl[i]])
        C_grp = np.column_stack([design.L[i], design.Zgrp[i]])
        mu_i = sol.x2[i]
        Sigma_i = sol.A22[i]
        resid = design.y[i] - C_gbl @ mu - C_grp @ mu_i
        resid_total += (
            float(resid @ resid)
            + float(np.sum((C_gbl.T @ C_gbl) * Sigma.T))
            + float(np.sum((C_grp.T @ C_grp) * Sigma_i.T))
            + 2.0 * float(np.sum((C_grp.T @ C_gbl).T * sol.A12[i]))
        )
        Lambda_Sigma += np.outer(mu_i[:4], mu_i[:4]) + Sigma_i[:4, :4]
        lam_grp += float(mu_i[4:] @ mu_i[4:]) + float(np.trace(Sigma_i[4:, 4:]))
    lam_eps = state.recip_a_eps + resid_total
    mu_a = mu[4:4 + K_gbl]
    mu_b = mu[4 + K_gbl:]
    lam_gbl_a = (state.recip_a_gbl_a + float(mu_a @ mu_a)
                 + float(np.trace(Sigma[4:4 + K_gbl, 4:4 + K_gbl])))
    lam_gbl_b = (state.recip_a_gbl_b + float(mu_b @ mu_b)
                 + float(np.trace(Sigma[4 + K_gbl:, 4 + K_gbl:])))

    recip_eps = state.xi_sigma_eps / lam_eps
    recip_gbl_a = state.xi_sigma_gbl_a / lam_gbl_a
    recip_gbl_b = state.xi_sigma_gbl_b / lam_gbl_b
    M_Sigma_inv = (state.xi_Sigma - 3.0) * np.linalg.inv(Lambda_Sigma)
    M_Sigma_inv = (M_Sigma_inv + M_Sigma_inv.T) / 2.0
    recip_grp = state.xi_sigma_grp / lam_grp

    lam_a_eps = recip_eps + 1.0 / (hyper.nu_eps * hyper.s_eps ** 2)
    recip_a_eps = state.xi_a_eps / lam_a_eps
    prior = 1.0 / (hyper.nu_Sigma * np.asarray(hyper.s_Sigma) ** 2)
    Lambda_A_Sigma = np.diag(np.diagonal(M_Sigma_inv) + prior)
    M_A_Sigma_inv = state.xi_A_Sigma * np.diag(1.0 / np.diagonal(Lambda_A_Sigma))
    lam_a_gbl_a = recip_gbl_a + 1.0 / (hyper.nu_gbl * hyper.s_gbl_a ** 2)
    recip_a_gbl_a = state.xi_a_gbl_a / lam_a_gbl_a
    lam_a_gbl_b = recip_gbl_b + 1.0 / (hyper.nu_gbl * hyper.s_gbl_b ** 2)
    recip_a_gbl_b = state.xi_a_gbl_b / lam_a_gbl_b
    lam_a_grp = recip_grp + 1.0 / (hyper.nu_grp * hyper.s_grp ** 2)
    recip_a_grp = state.xi_a_grp / lam_a_grp

    return replace(
        state,
        mu=mu, Sigma=Sigma,
        group_mu=sol.x2, group_Sigma=sol.A22, group_cross=sol.A12,
        lambda_sigma_eps=lam_eps,
        lambda_sigma_gbl_a=lam_gbl_a, lambda_sigma_gbl_b=lam_gbl_b,
        lambda_sigma_grp=lam_grp,
        Lambda_Sigma=Lambda_Sigma, Lambda_A_Sigma=Lambda_A_Sigma,
        lambda_a_eps=lam_a_eps,
        lambda_a_gbl_a=lam_a_gbl_a, lambda_a_gbl_b=lam_a_gbl_b,
        lambda_a_grp=lam_a_grp,
        recip_sigma_eps=recip_eps,
        recip_sigma_gbl_a=recip_gbl_a, recip_sigma_gbl_b=recip_gbl_b,
        recip_sigma_grp=recip_grp,
        recip_a_eps=recip_a_eps,
        recip_a_gbl_a=recip_a_gbl_a, recip_a_gbl_b=recip_a_gbl_b,
        recip_a_grp=recip_a_grp,
        M_Sigma_inv=M_Sigma_inv, M_A_Sigma_inv=M_A_Sigma_inv,
        resid_expansion=resid_total,
    )


@dataclass(frozen=True)
class ContrastFit:
    state: QStateContrast
    gbl_basis: object
    grp_basis: object
    group_labels: list
    K_gbl: int
    K_grp: int
    iterations: int
    converged: bool
    wall_time_s: float = 0.0


def fit_contrast(data: CategorizedTwoLevelData,
                 hyper: ContrastHyperparameters = None,
                 opts: FitOptions = None,
                 K_gbl=20, K_grp=10, design: ContrastDesign = None,
                 workers=None) -> ContrastFit:
    """Coordinate ascent for the contrast model.

    Stops on relative parameter change: the single-category lower bound does
    not cover the per-category scale families, so no bound is evaluated.
    """
    hyper = hyper or ContrastHyperparameters()
    opts = opts or FitOptions()
    if opts.convergence_metric == "elbo":
        raise ValueError("the lower-bound stopping rule is not available "
                         "for contrast fits")
    design = design or build_contrast_design(data, K_gbl=K_gbl, K_grp=K_grp)
    state = init_contrast_state(design, hyper)
    converged = False
    iterations = 0
    start = time.perf_counter()
    limit = opts.fixed_iterations or opts.max_iterations
    for it in range(limit):
        new_state = contrast_cycle(state, design, hyper, workers=workers)
        iterations = it + 1
        if opts.fixed_iterations is None:
            changes = [np.linalg.norm(new_state.mu - state.mu)
                       / max(np.linalg.norm(state.mu), 1e-300)]
            for name in vars(new_state):
                if name.startswith("lambda_"):
                    o = getattr(state, name)
                    changes.append(abs(getattr(new_state, name) - o)
                                   / max(abs(o), 1e-300))
            o = np.linalg.norm(state.Lambda_Sigma)
            changes.append(abs(np.linalg.norm(new_state.Lambda_Sigma) - o)
                           / max(o, 1e-300))
            if max(changes) < opts.rel_tol:
                converged = True
        state = new_state
        if converged:
            break
    if opts.fixed_iterations is not None:
        converged = True
    return ContrastFit(state=state, gbl_basis=design.gbl_basis,
                       grp_basis=design.grp_basis,
                       group_labels=design.group_labels,
                       K_gbl=design.K_gbl, K_grp=design.K_grp,
                       iterations=iterations, converged=converged,
                       wall_time_s=time.perf_counter() - start)


def contrast_selector(fit: ContrastFit, grid) -> np.ndarray:
    """Rows mapping the global coefficient block to the contrast curve."""
    grid = np.asarray(grid, dtype=float)
    z = osullivan_basis(grid, fit.gbl_basis)
    K = fit.K_gbl
    S = np.zeros((grid.size, 4 + 2 * K))
    S[:, 2] = 1.0
    S[:, 3] = grid
    S[:, 4:4 + K] = -z
    S[:, 4 + K:] = z
    return S


def contrast_curve(fit: ContrastFit, grid, level: float = 0.95):
    """Between-category curve with a pointwise credible band."""
    if not 0.0 <= level < 1.0:
        raise ValueError("level must lie in [0, 1)")
    S = contrast_selector(fit, grid)
    mean = S @ fit.state.mu
    sd = np.sqrt(np.einsum("ij,jk,ik->i", S, fit.state.Sigma, S))
    z = norm.ppf(0.5 * (1.0 + level))
    return mean, mean - z * sd, mean + z * sd
