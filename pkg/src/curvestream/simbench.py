"""Simulation-study data generation, the naive dense baseline, and timing.

The generator follows the benchmark protocol: a fixed smooth global curve,
random sinusoidal group deviations, uniform predictors, and Gaussian noise
with sd 0.2.  Group-level randomness comes from independently spawned
counter-based streams (Philox), so generation is reproducible whether or
not groups are generated in parallel.

The naive baseline runs the same coordinate ascent but stores and inverts
the full coefficient covariance each cycle; it refuses to run once that
matrix dimension crosses a configurable cap.
"""

import csv
import json
import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import block_diag, cho_factor
from scipy.linalg.lapack import dpotri
from scipy.special import ndtr

from .designs import ThreeLevelDesign, TwoLevelDesign, build_two_level_design
from .exceptions import (
    DimensionCapExceededError,
    GridMismatchError,
    NotNormalizedError,
)
from .mfvb import (
    FitOptions,
    HyperparametersTwoLevel,
    MfvbFit,
    fit_mfvb,
    init_q_state,
)

DEFAULT_DENSE_CAP = 20000


def true_global_curve(x):
    """The benchmark's global mean: a smooth bump with a sigmoidal onset."""
    x = np.asarray(x, dtype=float)
    return 3.0 * np.sqrt(x * (1.3 - x)) * ndtr(6.0 * x - 3.0)


def _group_deviation(rng, x, amplitude=1.0):
    """Random sinusoid a1 * a2 * sin(2 pi x^a3), a1 ~ N(1/4, 1/4)."""
    a1 = 0.25 + 0.5 * rng.standard_normal()
    a2 = rng.choice([-1.0, 1.0])
    a3 = float(rng.integers(1, 4))
    return amplitude * a1 * a2 * np.sin(2.0 * np.pi * x ** a3)


@dataclass(frozen=True)
class SimConfig:
    """Two-level generator settings; n_range bounds are inclusive."""

    m: int
    n_range: tuple = (30, 60)
    sigma_eps: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.m < 1:
            raise ValueError("m must be at least 1")


@dataclass(frozen=True)
class SimulatedTwoLevel:
    x: np.ndarray
    y: np.ndarray
    group: list                  # per-row string labels


@dataclass(frozen=True)
class SimulatedThreeLevel:
    x: np.ndarray
    y: np.ndarray
    group: list
    subgroup: list


def simulate_two_level(cfg: SimConfig) -> SimulatedTwoLevel:
    """Deterministic two-level dataset; per-group streams are independent."""
    ss = np.random.SeedSequence(cfg.seed)
    streams = ss.spawn(cfg.m + 1)
    parent = np.random.Generator(np.random.Philox(streams[0]))
    lo, hi = cfg.n_range
    n = parent.integers(lo, hi + 1, size=cfg.m)
    xs, ys, groups = [], [], []
    for i in range(cfg.m):
        rng = np.random.Generator(np.random.Philox(streams[i + 1]))
        x = rng.uniform(0.0, 1.0, int(n[i]))
        g = _group_deviation(rng, x)
        y = true_global_curve(x) + g + cfg.sigma_eps * rng.standard_normal(x.size)
        xs.append(x)
        ys.append(y)
        groups.extend([f"g{i}"] * x.size)
    return SimulatedTwoLevel(x=np.concatenate(xs), y=np.concatenate(ys),
                             group=groups)


def simulate_three_level(m, n_range=(2, 5), o_range=(20, 40),
                         sigma_eps=0.2, seed=0) -> SimulatedThreeLevel:
    """Deterministic three-level dataset.

    Subgroup deviations reuse the sinusoid family at half amplitude so the
    nested signal is visibly smaller than the group signal.
    """
    if m < 1:
        raise ValueError("m must be at least 1")
    ss = np.random.SeedSequence(seed)
    streams = ss.spawn(m + 1)
    parent = np.random.Generator(np.random.Philox(streams[0]))
    n = parent.integers(n_range[0], n_range[1] + 1, size=m)
    xs, ys, groups, subgroups = [], [], [], []
    for i in range(m):
        inner_streams = streams[i + 1].spawn(int(n[i]) + 1)
        grng = np.random.Generator(np.random.Philox(inner_streams[0]))
        o = grng.integers(o_range[0], o_range[1] + 1, size=int(n[i]))
        g_draw = (0.25 + 0.5 * grng.standard_normal(),
                  grng.choice([-1.0, 1.0]), float(grng.integers(1, 4)))
        for j in range(int(n[i])):
            rng = np.random.Generator(np.random.Philox(inner_streams[j + 1]))
            x = rng.uniform(0.0, 1.0, int(o[j]))
            g = g_draw[0] * g_draw[1] * np.sin(2.0 * np.pi * x ** g_draw[2])
            h = _group_deviation(rng, x, amplitude=0.5)
            y = true_global_curve(x) + g + h + sigma_eps * rng.standard_normal(x.size)
            xs.append(x)
            ys.append(y)
            groups.extend([f"g{i}"] * x.size)
            subgroups.extend([f"s{j}"] * x.size)
    return SimulatedThreeLevel(x=np.concatenate(xs), y=np.concatenate(ys),
                               group=groups, subgroup=subgroups)


# ---------------------------------------------------------------------------
# Naive dense baseline
# ---------------------------------------------------------------------------

def _stack_two_level(design):
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


def _stack_three_level(design):
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


def _spd_inverse(A):
    """Cholesky-based inverse with its log determinant; A must be SPD."""
    c, _ = cho_factor(A, lower=False, check_finite=False)
    log_det = 2.0 * np.log(np.abs(np.diagonal(c))).sum()
    inv, info = dpotri(c, lower=0)
    if info != 0:
        raise np.linalg.LinAlgError(f"dpotri failed with info={info}")
    inv = np.triu(inv) + np.triu(inv, 1).T
    return inv, log_det


def _naive_cycle_two_level(state, design, hyper, ws):
    C, y, CtC, Cty = ws
    m, p, q = design.m, design.p, design.q
    Sb_inv = np.linalg.inv(hyper.Sigma_beta)
    D = block_diag(
        Sb_inv,
        state.recip_sigma_gbl * np.eye(design.K_gbl),
        *[block_diag(state.M_Sigma_inv,
                     state.recip_sigma_grp * np.eye(design.K_grp))
          for _ in range(m)])
    A = state.recip_sigma_eps * CtC + D
    Sigma_full, log_det_prec = _spd_inverse(A)
    offset = np.zeros(C.shape[1])
    offset[:2] = Sb_inv @ hyper.mu_beta
    mu_full = Sigma_full @ (state.recip_sigma_eps * Cty + offset)

    mu = mu_full[:p]
    Sigma = Sigma_full[:p, :p]
    group_mu = [mu_full[p + i * q:p + (i + 1) * q] for i in range(m)]
    group_Sigma = [Sigma_full[p + i * q:p + (i + 1) * q,
                              p + i * q:p + (i + 1) * q] for i in range(m)]
    group_cross = [Sigma_full[:p, p + i * q:p + (i + 1) * q] for i in range(m)]

    resid = y - C @ mu_full
    resid_total = float(resid @ resid) + float(np.sum(CtC * Sigma_full))
    lam_eps = state.recip_a_eps + resid_total
    Lambda_Sigma = state.M_A_Sigma_inv.copy()
    lam_grp = state.recip_a_grp
    for i in range(m):
        Lambda_Sigma += (np.outer(group_mu[i][:2], group_mu[i][:2])
                         + group_Sigma[i][:2, :2])
        lam_grp += (float(group_mu[i][2:] @ group_mu[i][2:])
                    + float(np.trace(group_Sigma[i][2:, 2:])))
    lam_gbl = (state.recip_a_gbl + float(mu[2:] @ mu[2:])
               + float(np.trace(Sigma[2:, 2:])))

    recip_eps = state.xi_sigma_eps / lam_eps
    recip_gbl = state.xi_sigma_gbl / lam_gbl
    M_Sigma_inv = (state.xi_Sigma - 1.0) * np.linalg.inv(Lambda_Sigma)
    M_Sigma_inv = (M_Sigma_inv + M_Sigma_inv.T) / 2.0
    recip_grp = state.xi_sigma_grp / lam_grp

    lam_a_eps = recip_eps + 1.0 / (hyper.nu_eps * hyper.s_eps ** 2)
    recip_a_eps = state.xi_a_eps / lam_a_eps
    Lambda_A_Sigma = (np.diag(np.diagonal(M_Sigma_inv))
                      + np.diag(1.0 / (hyper.nu_Sigma
                                       * np.array([hyper.s_Sigma_1 ** 2,
                                                   hyper.s_Sigma_2 ** 2]))))
    M_A_Sigma_inv = state.xi_A_Sigma * np.diag(1.0 / np.diagonal(Lambda_A_Sigma))
    lam_a_gbl = recip_gbl + 1.0 / (hyper.nu_gbl * hyper.s_gbl ** 2)
    recip_a_gbl = state.xi_a_gbl / lam_a_gbl
    lam_a_grp = recip_grp + 1.0 / (hyper.nu_grp * hyper.s_grp ** 2)
    recip_a_grp = state.xi_a_grp / lam_a_grp

    return replace(
        state,
        mu=mu, Sigma=Sigma, group_mu=group_mu, group_Sigma=group_Sigma,
        group_cross=group_cross,
        lambda_sigma_eps=lam_eps, lambda_sigma_gbl=lam_gbl,
        lambda_sigma_grp=lam_grp,
        Lambda_Sigma=Lambda_Sigma, Lambda_A_Sigma=Lambda_A_Sigma,
        lambda_a_eps=lam_a_eps, lambda_a_gbl=lam_a_gbl, lambda_a_grp=lam_a_grp,
        recip_sigma_eps=recip_eps, recip_sigma_gbl=recip_gbl,
        recip_sigma_grp=recip_grp,
        recip_a_eps=recip_a_eps, recip_a_gbl=recip_a_gbl,
        recip_a_grp=recip_a_grp,
        M_Sigma_inv=M_Sigma_inv, M_A_Sigma_inv=M_A_Sigma_inv,
        log_det_Sigma_q=-log_det_prec,
        resid_expansion=resid_total,
    )


def _naive_cycle_three_level(state, design, hyper, ws):
    C, y, CtC, Cty = ws
    m, p, q1, q2 = design.m, design.p, design.q1, design.q2
    n = design.n
    Sb_inv = np.linalg.inv(hyper.Sigma_beta)
    blocks = [Sb_inv, state.recip_sigma_gbl * np.eye(design.K_gbl)]
    for n_i in n:
        per_sub = block_diag(state.M_Sigma_h_inv,
                             state.recip_sigma_grp_h * np.eye(design.K_h))
        blocks.append(block_diag(state.M_Sigma_g_inv,
                                 state.recip_sigma_grp_g * np.eye(design.K_g),
                                 *([per_sub] * n_i)))
    D = block_diag(*blocks)
    A = state.recip_sigma_eps * CtC + D
    Sigma_full, log_det_prec = _spd_inverse(A)
    offset = np.zeros(C.shape[1])
    offset[:2] = Sb_inv @ hyper.mu_beta
    mu_full = Sigma_full @ (state.recip_sigma_eps * Cty + offset)

    mu = mu_full[:p]
    Sigma = Sigma_full[:p, :p]
    group_mu, group_Sigma, group_cross = [], [], []
    sub_mu, sub_Sigma, sub_cross, sub_cross_gh = [], [], [], []
    col = p
    for i in range(m):
        gsl = slice(col, col + q1)
        group_mu.append(mu_full[gsl])
        group_Sigma.append(Sigma_full[gsl, gsl])
        group_cross.append(Sigma_full[:p, gsl])
        mus, Sigmas, crosses, crosses_gh = [], [], [], []
        for j in range(n[i]):
            hsl = slice(col + q1 + j * q2, col + q1 + (j + 1) * q2)
            mus.append(mu_full[hsl])
            Sigmas.append(Sigma_full[hsl, hsl])
            crosses.append(Sigma_full[:p, hsl])
            crosses_gh.append(Sigma_full[gsl, hsl])
        sub_mu.append(mus)
        sub_Sigma.append(Sigmas)
        sub_cross.append(crosses)
        sub_cross_gh.append(crosses_gh)
        col += q1 + n[i] * q2

    resid = y - C @ mu_full
    resid_total = float(resid @ resid) + float(np.sum(CtC * Sigma_full))
    lam_eps = state.recip_a_eps + resid_total
    Lambda_Sigma_g = state.M_A_Sigma_g_inv.copy()
    Lambda_Sigma_h = state.M_A_Sigma_h_inv.copy()
    lam_grp_g = state.recip_a_grp_g
    lam_grp_h = state.recip_a_grp_h
    for i in range(m):
        Lambda_Sigma_g += (np.outer(group_mu[i][:2], group_mu[i][:2])
                           + group_Sigma[i][:2, :2])
        lam_grp_g += (float(group_mu[i][2:] @ group_mu[i][2:])
                      + float(np.trace(group_Sigma[i][2:, 2:])))
        for j in range(n[i]):
            Lambda_Sigma_h += (np.outer(sub_mu[i][j][:2], sub_mu[i][j][:2])
                               + sub_Sigma[i][j][:2, :2])
            lam_grp_h += (float(sub_mu[i][j][2:] @ sub_mu[i][j][2:])
                          + float(np.trace(sub_Sigma[i][j][2:, 2:])))
    lam_gbl = (state.recip_a_gbl + float(mu[2:] @ mu[2:])
               + float(np.trace(Sigma[2:, 2:])))

    recip_eps = state.xi_sigma_eps / lam_eps
    recip_gbl = state.xi_sigma_gbl / lam_gbl
    M_Sigma_g_inv = (state.xi_Sigma_g - 1.0) * np.linalg.inv(Lambda_Sigma_g)
    M_Sigma_g_inv = (M_Sigma_g_inv + M_Sigma_g_inv.T) / 2.0
    M_Sigma_h_inv = (state.xi_Sigma_h - 1.0) * np.linalg.inv(Lambda_Sigma_h)
    M_Sigma_h_inv = (M_Sigma_h_inv + M_Sigma_h_inv.T) / 2.0
    recip_grp_g = state.xi_sigma_grp_g / lam_grp_g
    recip_grp_h = state.xi_sigma_grp_h / lam_grp_h

    lam_a_eps = recip_eps + 1.0 / (hyper.nu_eps * hyper.s_eps ** 2)
    recip_a_eps = state.xi_a_eps / lam_a_eps
    Lambda_A_Sigma_g = (np.diag(np.diagonal(M_Sigma_g_inv))
                        + np.diag(1.0 / (hyper.nu_Sigma_g
                                         * np.array([hyper.s_Sigma_g_1 ** 2,
                                                     hyper.s_Sigma_g_2 ** 2]))))
    M_A_Sigma_g_inv = state.xi_A_Sigma_g * np.diag(
        1.0 / np.diagonal(Lambda_A_Sigma_g))
    Lambda_A_Sigma_h = (np.diag(np.diagonal(M_Sigma_h_inv))
                        + np.diag(1.0 / (hyper.nu_Sigma_h
                                         * np.array([hyper.s_Sigma_h_1 ** 2,
                                                     hyper.s_Sigma_h_2 ** 2]))))
    M_A_Sigma_h_inv = state.xi_A_Sigma_h * np.diag(
        1.0 / np.diagonal(Lambda_A_Sigma_h))
    lam_a_gbl = recip_gbl + 1.0 / (hyper.nu_gbl * hyper.s_gbl ** 2)
    recip_a_gbl = state.xi_a_gbl / lam_a_gbl
    lam_a_grp_g = recip_grp_g + 1.0 / (hyper.nu_grp_g * hyper.s_grp_g ** 2)
    recip_a_grp_g = state.xi_a_grp_g / lam_a_grp_g
    lam_a_grp_h = recip_grp_h + 1.0 / (hyper.nu_grp_h * hyper.s_grp_h ** 2)
    recip_a_grp_h = state.xi_a_grp_h / lam_a_grp_h

    return replace(
        state,
        mu=mu, Sigma=Sigma, group_mu=group_mu, group_Sigma=group_Sigma,
        group_cross=group_cross,
        sub_mu=sub_mu, sub_Sigma=sub_Sigma, sub_cross=sub_cross,
        sub_cross_gh=sub_cross_gh,
        lambda_sigma_eps=lam_eps, lambda_sigma_gbl=lam_gbl,
        lambda_sigma_grp_g=lam_grp_g, lambda_sigma_grp_h=lam_grp_h,
        Lambda_Sigma_g=Lambda_Sigma_g, Lambda_Sigma_h=Lambda_Sigma_h,
        lambda_a_eps=lam_a_eps, lambda_a_gbl=lam_a_gbl,
        lambda_a_grp_g=lam_a_grp_g, lambda_a_grp_h=lam_a_grp_h,
        Lambda_A_Sigma_g=Lambda_A_Sigma_g, Lambda_A_Sigma_h=Lambda_A_Sigma_h,
        recip_sigma_eps=recip_eps, recip_sigma_gbl=recip_gbl,
        recip_sigma_grp_g=recip_grp_g, recip_sigma_grp_h=recip_grp_h,
        recip_a_eps=recip_a_eps, recip_a_gbl=recip_a_gbl,
        recip_a_grp_g=recip_a_grp_g, recip_a_grp_h=recip_a_grp_h,
        M_Sigma_g_inv=M_Sigma_g_inv, M_A_Sigma_g_inv=M_A_Sigma_g_inv,
        M_Sigma_h_inv=M_Sigma_h_inv, M_A_Sigma_h_inv=M_A_Sigma_h_inv,
        log_det_Sigma_q=-log_det_prec,
        resid_expansion=resid_total,
    )


def naive_mfvb(design, hyper, iterations, dense_cap=DEFAULT_DENSE_CAP) -> MfvbFit:
    """Coordinate ascent with full dense covariance storage.

    Mathematically identical to the streamlined path from the same
    initialization; refuses to run when the full covariance dimension
    exceeds dense_cap, which is the failure mode that makes streamlining
    necessary in the first place.
    """
    two_level = isinstance(design, TwoLevelDesign)
    if two_level:
        dim = design.p + design.m * design.q
    elif isinstance(design, ThreeLevelDesign):
        dim = design.p + sum(design.q1 + n_i * design.q2 for n_i in design.n)
    else:
        raise TypeError(f"unsupported design type {type(design).__name__}")
    if dim > dense_cap:
        raise DimensionCapExceededError(
            f"dense covariance dimension {dim} exceeds cap {dense_cap}")

    state = init_q_state(design, hyper)
    start = time.perf_counter()
    if two_level:
        C, y = _stack_two_level(design)
        ws = (C, y, C.T @ C, C.T @ y)
        for _ in range(iterations):
            state = _naive_cycle_two_level(state, design, hyper, ws)
        elapsed = time.perf_counter() - start
        return MfvbFit(level=2, state=state,
                       gbl_basis=design.gbl_basis, grp_basis=design.grp_basis,
                       group_labels=design.group_labels,
                       iterations=iterations, converged=True,
                       wall_time_s=elapsed)
    C, y = _stack_three_level(design)
    ws = (C, y, C.T @ C, C.T @ y)
    for _ in range(iterations):
        state = _naive_cycle_three_level(state, design, hyper, ws)
    elapsed = time.perf_counter() - start
    return MfvbFit(level=3, state=state,
                   gbl_basis=design.gbl_basis, g_basis=design.g_basis,
                   h_basis=design.h_basis,
                   group_labels=design.group_labels,
                   subgroup_labels=design.subgroup_labels,
                   iterations=iterations, converged=True,
                   wall_time_s=elapsed)


# ---------------------------------------------------------------------------
# Timing harness
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TimingRecord:
    m: int
    variant: str                 # "naive" or "streamlined"
    seconds_mean: float
    seconds_sd: float
    iterations: int
    parallel: bool = False

    def __post_init__(self):
        if not self.seconds_mean > 0:
            raise ValueError("seconds must be positive")


@dataclass(frozen=True)
class BenchmarkResult:
    records: list
    slopes: dict                 # variant -> log-log slope of seconds vs m
    skipped: list = field(default_factory=list)   # (m, variant, reason)


def _loglog_slope(ms, seconds):
    if len(ms) < 2:
        return float("nan")
    coeffs = np.polyfit(np.log(np.asarray(ms, float)),
                        np.log(np.asarray(seconds, float)), 1)
    return float(coeffs[0])


def run_benchmark(ms, replications=3, fixed_iterations=50, seed=0,
                  K_gbl=20, K_grp=10, dense_cap=DEFAULT_DENSE_CAP,
                  parallel=False) -> BenchmarkResult:
    """Time streamlined and naive fits over ascending group counts.

    The same simulated dataset (per m) is reused across replications and
    variants, so timing spread reflects the machine, not the data.  Naive
    runs are skipped, not attempted, above the dense cap.
    """
    if list(ms) != sorted(ms):
        raise ValueError("ms must be ascending")
    from threadpoolctl import threadpool_limits

    from .config import max_workers
    workers = max_workers() if parallel else 1
    records = []
    skipped = []
    by_variant = {"streamlined": ([], []), "naive": ([], [])}
    for m in ms:
        data = simulate_two_level(SimConfig(m=m, seed=seed))
        design = build_two_level_design(data.x, data.y, data.group,
                                        K_gbl=K_gbl, K_grp=K_grp)
        hyper = HyperparametersTwoLevel()
        opts = FitOptions(fixed_iterations=fixed_iterations)

        # pin BLAS pools during timing: oversubscribed BLAS threads make
        # small-matrix timings erratic and would swamp the scaling signal
        times = []
        with threadpool_limits(limits=1):
            for _ in range(replications):
                t0 = time.perf_counter()
                fit_mfvb(design, hyper, opts, workers=workers)
                times.append(time.perf_counter() - t0)
        records.append(TimingRecord(
            m=m, variant="streamlined",
            seconds_mean=float(np.mean(times)),
            seconds_sd=float(np.std(times, ddof=1)) if len(times) > 1 else 0.0,
            iterations=fixed_iterations, parallel=parallel))
        by_variant["streamlined"][0].append(m)
        by_variant["streamlined"][1].append(float(np.mean(times)))

        dim = design.p + m * design.q
        if dim > dense_cap:
            skipped.append((m, "naive",
                            f"dimension {dim} exceeds cap {dense_cap}"))
            continue
        times = []
        with threadpool_limits(limits=1):
            for _ in range(replications):
                t0 = time.perf_counter()
                naive_mfvb(design, hyper, fixed_iterations, dense_cap=dense_cap)
                times.append(time.perf_counter() - t0)
        records.append(TimingRecord(
            m=m, variant="naive",
            seconds_mean=float(np.mean(times)),
            seconds_sd=float(np.std(times, ddof=1)) if len(times) > 1 else 0.0,
            iterations=fixed_iterations, parallel=parallel))
        by_variant["naive"][0].append(m)
        by_variant["naive"][1].append(float(np.mean(times)))

    slopes = {variant: _loglog_slope(ms_v, secs)
              for variant, (ms_v, secs) in by_variant.items() if ms_v}
    return BenchmarkResult(records=records, slopes=slopes, skipped=skipped)


def timing_records_to_csv(result: BenchmarkResult, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["m", "variant", "mean_s", "sd_s", "iterations",
                         "parallel"])
        seen = {(r.m, r.variant) for r in result.records}
        for rec in result.records:
            writer.writerow([rec.m, rec.variant, repr(rec.seconds_mean),
                             repr(rec.seconds_sd), rec.iterations,
                             rec.parallel])
        for m, variant, _ in result.skipped:
            if (m, variant) not in seen:
                writer.writerow([m, variant, "NA", "NA", "", ""])


def timing_records_to_json(result: BenchmarkResult, path):
    payload = {
        "records": [vars(rec) for rec in result.records],
        "slopes": result.slopes,
        "skipped": [{"m": m, "variant": v, "reason": r}
                    for m, v, r in result.skipped],
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2)


# ---------------------------------------------------------------------------
# Posterior accuracy functional
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GriddedDensity:
    grid: np.ndarray
    density: np.ndarray

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=float)
        dens = np.asarray(self.density, dtype=float)
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "density", dens)
        if grid.shape != dens.shape or grid.ndim != 1 or grid.size < 2:
            raise ValueError("grid and density must be equal-length vectors")


def accuracy(q: GriddedDensity, ref: GriddedDensity) -> float:
    """Percentage overlap 100 (1 - total variation distance) on a shared grid."""
    if q.grid.shape != ref.grid.shape or not np.array_equal(q.grid, ref.grid):
        raise GridMismatchError("densities are not on the same grid")
    for name, d in (("first", q), ("second", ref)):
        if np.any(d.density < 0):
            raise NotNormalizedError(f"{name} density has negative values")
        mass = float(np.trapezoid(d.density, d.grid))
        if abs(mass - 1.0) > 1e-3:
            raise NotNormalizedError(
                f"{name} density integrates to {mass:.6f}, not 1")
    tv = 0.5 * float(np.trapezoid(np.abs(q.density - ref.density), q.grid))
    return 100.0 * (1.0 - tv)
