"""QR-based solvers for two- and three-level sparse least-squares problems.

The problems minimise ||b - B x||^2 where B is block-sparse: a dense column
block shared by every row group plus one block-diagonal column block per
group (two-level), nested one level deeper in the three-level case.  The
solvers return the minimiser split into its labelled blocks together with
exactly the sub-blocks of (B^T B)^{-1} that sit on the non-sparse positions,
without ever forming a matrix whose both dimensions grow with the number of
groups.

Dense oracles that stack the full B and invert B^T B directly are provided
for cross-checking and as the core of the naive baseline.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import partial

import numpy as np
from scipy.linalg import solve_triangular as _scipy_solve_triangular

from .config import max_workers
from .exceptions import (
    DimensionMismatchError,
    RankDeficientError,
    SingularMatrixError,
)

RANK_TOL = 1e-10

# finiteness of inputs is the caller's concern; skipping the scan roughly
# halves the cost of the many small triangular solves
solve_triangular = partial(_scipy_solve_triangular, check_finite=False)


def qr_full(M):
    """Householder QR of an r x c matrix (r >= c) with a rank guard.

    Returns (Q, R) with Q orthonormal r x r and R upper-triangular c x c,
    so that M = Q @ [R; 0].  Raises RankDeficientError when any |R_kk| falls
    at or below RANK_TOL * max|R|, which is how degenerate variance inputs
    surface.
    """
    M = np.asarray(M, dtype=float)
    r, c = M.shape
    if r < c:
        raise DimensionMismatchError(f"qr_full needs r >= c, got {r} x {c}")
    Q, R = np.linalg.qr(M, mode="complete")
    R = R[:c, :c]
    _check_rank(R)
    return Q, R


def _qr_reduced(M):
    """Economy QR used for the tall reduction stages; same rank guard."""
    Q1, R = np.linalg.qr(M, mode="reduced")
    _check_rank(R)
    return Q1, R


def _check_rank(R):
    c = R.shape[0]
    if c == 0:
        return
    diag = np.abs(np.diagonal(R))
    scale = np.abs(R).max()
    if scale == 0.0 or np.any(diag <= RANK_TOL * scale):
        raise RankDeficientError(
            "triangular factor numerically rank deficient "
            f"(min |diag| = {diag.min():.3e}, scale = {scale:.3e})"
        )


def _symmetrize(A):
    return (A + A.T) / 2.0


@dataclass(frozen=True)
class TwoLevelSparseProblem:
    """Per-group blocks (b_i, B_i, Bdot_i) of a two-level sparse problem.

    Every group shares the column counts p (of B_i) and q (of Bdot_i); within
    a group the three blocks share their row count.  Row counts must satisfy
    n_i >= q and sum_i (n_i - q) >= p, otherwise the stacked system is rank
    deficient by construction.
    """

    groups: list  # of (b_i, B_i, Bdot_i) ndarray triples

    def __post_init__(self):
        if not self.groups:
            raise DimensionMismatchError("problem has no groups")
        p = self.groups[0][1].shape[1]
        q = self.groups[0][2].shape[1]
        surplus = 0
        for i, (b, B, Bd) in enumerate(self.groups):
            rows = b.shape[0]
            if b.ndim != 1:
                raise DimensionMismatchError(f"group {i}: b must be a vector")
            if B.shape != (rows, p) or Bd.shape != (rows, q):
                raise DimensionMismatchError(
                    f"group {i}: inconsistent block shapes "
                    f"{B.shape}, {Bd.shape} for {rows} rows"
                )
            if rows < q:
                raise DimensionMismatchError(f"group {i}: fewer rows than q={q}")
            surplus += rows - q
        if surplus < p:
            raise DimensionMismatchError(
                f"sum of (rows - q) = {surplus} < p = {p}; system rank deficient"
            )

    @property
    def m(self):
        return len(self.groups)

    @property
    def p(self):
        return self.groups[0][1].shape[1]

    @property
    def q(self):
        return self.groups[0][2].shape[1]


@dataclass(frozen=True)
class TwoLevelSolution:
    """Solution blocks and labelled inverse sub-blocks of a two-level problem.

    log_det_btb carries log|B^T B| (assembled from the triangular factors);
    consumers use it for normal-entropy bookkeeping.
    """

    x1: np.ndarray               # (p,)
    A11: np.ndarray              # (p, p)
    x2: list                     # m arrays (q,)
    A22: list                    # m arrays (q, q)
    A12: list                    # m arrays (p, q)
    log_det_btb: float = field(default=float("nan"), compare=False)


@dataclass(frozen=True)
class ThreeLevelSparseProblem:
    """Nested blocks (b_ij, B_ij, Bdot_ij, Bddot_ij) of a three-level problem."""

    groups: list  # list over i of lists over j of 4-tuples

    def __post_init__(self):
        if not self.groups or any(not inner for inner in self.groups):
            raise DimensionMismatchError("problem has an empty group")
        first = self.groups[0][0]
        p, q1, q2 = first[1].shape[1], first[2].shape[1], first[3].shape[1]
        for i, inner in enumerate(self.groups):
            inner_surplus = 0
            for j, (b, B, Bd, Bdd) in enumerate(inner):
                rows = b.shape[0]
                shapes = (B.shape, Bd.shape, Bdd.shape)
                if shapes != ((rows, p), (rows, q1), (rows, q2)):
                    raise DimensionMismatchError(
                        f"group ({i},{j}): inconsistent block shapes {shapes}"
                    )
                if rows < q2:
                    raise DimensionMismatchError(
                        f"group ({i},{j}): fewer rows than q2={q2}"
                    )
                inner_surplus += rows - q2
            if inner_surplus < q1:
                raise DimensionMismatchError(
                    f"group {i}: sum of (rows - q2) < q1; system rank deficient"
                )

    @property
    def m(self):
        return len(self.groups)

    @property
    def n(self):
        return [len(inner) for inner in self.groups]

    @property
    def p(self):
        return self.groups[0][0][1].shape[1]

    @property
    def q1(self):
        return self.groups[0][0][2].shape[1]

    @property
    def q2(self):
        return self.groups[0][0][3].shape[1]


@dataclass(frozen=True)
class ThreeLevelSolution:
    """Solution blocks and labelled inverse sub-blocks of a three-level problem."""

    x1: np.ndarray               # (p,)
    A11: np.ndarray              # (p, p)
    x2: list                     # per i: (q1,)
    A22: list                    # per i: (q1, q1)
    A12: list                    # per i: (p, q1)
    x2_inner: list               # per i: list per j of (q2,)
    A22_inner: list              # per i: list per j of (q2, q2)
    A12_inner: list              # per i: list per j of (p, q2)
    A12_cross: list              # per i: list per j of (q1, q2)
    log_det_btb: float = field(default=float("nan"), compare=False)


def _two_level_group_stage(b, B, Bd, q):
    """Rotate one group's blocks by Q_i^T and split at row q."""
    Q, R = np.linalg.qr(Bd, mode="complete")
    _check_rank(R[:q, :q])
    rotated = Q.T @ np.column_stack([b, B])
    c0 = rotated[:, 0]
    C0 = rotated[:, 1:]
    return R[:q, :q], c0[:q], C0[:q], c0[q:], C0[q:]


def solve_two_level(problem: TwoLevelSparseProblem, workers: int | None = None) -> TwoLevelSolution:
    """Solve a two-level sparse least-squares problem.

    Each group is reduced by its own orthogonal factor (applied and then
    discarded), surplus rows are collected into accumulators that grow
    linearly in the number of groups, and one final QR of the accumulated
    global block yields x1 and A11.  Per-group back-substitutions then
    recover x2_i and the A22/A12 sub-blocks.
    """
    m, p, q = problem.m, problem.p, problem.q
    rows = [g[0].shape[0] for g in problem.groups]
    total = sum(r - q for r in rows)
    omega = np.empty(total)
    Omega = np.empty((total, p))
    R_i = [None] * m
    c1 = [None] * m
    C1 = [None] * m

    def stage(i):
        b, B, Bd = problem.groups[i]
        try:
            return _two_level_group_stage(b, B, Bd, q)
        except RankDeficientError as err:
            raise RankDeficientError(str(err), group=i) from None

    n_workers = max_workers() if workers is None else max(1, workers)
    if n_workers > 1 and m > 1:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            staged = list(pool.map(stage, range(m)))
    else:
        staged = [stage(i) for i in range(m)]

    offset = 0
    for i, (Ri, c1i, C1i, c2i, C2i) in enumerate(staged):
        R_i[i] = Ri
        c1[i] = c1i
        C1[i] = C1i
        k = c2i.shape[0]
        omega[offset:offset + k] = c2i
        Omega[offset:offset + k] = C2i
        offset += k

    Q1, R = _qr_reduced(Omega)
    c = Q1.T @ omega
    x1 = solve_triangular(R, c)
    Rinv_T = solve_triangular(R, np.eye(p), trans="T")
    A11 = _symmetrize(solve_triangular(R, Rinv_T))

    x2, A22, A12 = [], [], []
    for i in range(m):
        x2.append(solve_triangular(R_i[i], c1[i] - C1[i] @ x1))
        RinvC1 = solve_triangular(R_i[i], C1[i])
        A12_i = -A11 @ RinvC1.T
        Ri_inv_T = solve_triangular(R_i[i], np.eye(q), trans="T")
        A22_i = _symmetrize(solve_triangular(R_i[i], Ri_inv_T - C1[i] @ A12_i))
        A12.append(A12_i)
        A22.append(A22_i)

    log_det = 2.0 * (
        np.log(np.abs(np.diagonal(R))).sum()
        + sum(np.log(np.abs(np.diagonal(Ri))).sum() for Ri in R_i)
    )
    return TwoLevelSolution(x1=x1, A11=A11, x2=x2, A22=A22, A12=A12,
                            log_det_btb=float(log_det))


def solve_three_level(problem: ThreeLevelSparseProblem, workers: int | None = None) -> ThreeLevelSolution:
    """Solve a three-level sparse least-squares problem.

    The innermost blocks are reduced per (i, j) and discarded, the surplus
    rows are reduced once per group i, and a final QR of the global
    accumulator yields x1 and A11.  Back-substitutions recover the per-group
    and per-subgroup blocks together with all labelled cross sub-blocks.
    """
    m, p, q1, q2 = problem.m, problem.p, problem.q1, problem.q2

    omega7_parts, Omega8_parts = [], []
    R_i = [None] * m
    c1 = [None] * m
    C1 = [None] * m
    R_ij = [[None] * len(inner) for inner in problem.groups]
    d1 = [[None] * len(inner) for inner in problem.groups]
    D1 = [[None] * len(inner) for inner in problem.groups]
    Dd1 = [[None] * len(inner) for inner in problem.groups]
    log_det = 0.0

    def inner_stage(args):
        i, j, b, B, Bd, Bdd = args
        try:
            Q, R = np.linalg.qr(Bdd, mode="complete")
            _check_rank(R[:q2, :q2])
        except RankDeficientError as err:
            raise RankDeficientError(str(err), group=i, subgroup=j) from None
        rotated = Q.T @ np.column_stack([b, B, Bd])
        d0 = rotated[:, 0]
        D0 = rotated[:, 1:1 + p]
        Dd0 = rotated[:, 1 + p:]
        return R[:q2, :q2], d0, D0, Dd0

    n_workers = max_workers() if workers is None else max(1, workers)
    pool = ThreadPoolExecutor(max_workers=n_workers) if n_workers > 1 else None
    try:
        for i, inner in enumerate(problem.groups):
            n_i = len(inner)
            tasks = [(i, j, *inner[j]) for j in range(n_i)]
            if pool is not None and n_i > 1:
                staged = list(pool.map(inner_stage, tasks))
            else:
                staged = [inner_stage(t) for t in tasks]

            total = sum(inner[j][0].shape[0] - q2 for j in range(n_i))
            omega9 = np.empty(total)
            Omega10 = np.empty((total, p))
            Omega11 = np.empty((total, q1))
            offset = 0
            for j, (Rij, d0, D0, Dd0) in enumerate(staged):
                R_ij[i][j] = Rij
                d1[i][j] = d0[:q2]
                D1[i][j] = D0[:q2]
                Dd1[i][j] = Dd0[:q2]
                k = d0.shape[0] - q2
                omega9[offset:offset + k] = d0[q2:]
                Omega10[offset:offset + k] = D0[q2:]
                Omega11[offset:offset + k] = Dd0[q2:]
                offset += k
                log_det += 2.0 * np.log(np.abs(np.diagonal(Rij))).sum()

            try:
                Qi, Ri = np.linalg.qr(Omega11, mode="complete")
                _check_rank(Ri[:q1, :q1])
            except RankDeficientError as err:
                raise RankDeficientError(str(err), group=i) from None
            R_i[i] = Ri[:q1, :q1]
            c0 = Qi.T @ omega9
            C0 = Qi.T @ Omega10
            c1[i] = c0[:q1]
            C1[i] = C0[:q1]
            omega7_parts.append(c0[q1:])
            Omega8_parts.append(C0[q1:])
            log_det += 2.0 * np.log(np.abs(np.diagonal(R_i[i]))).sum()
    finally:
        if pool is not None:
            pool.shutdown()

    omega7 = np.concatenate(omega7_parts)
    Omega8 = np.vstack(Omega8_parts)
    Q1g, R = _qr_reduced(Omega8)
    c = Q1g.T @ omega7
    x1 = solve_triangular(R, c)
    Rinv_T = solve_triangular(R, np.eye(p), trans="T")
    A11 = _symmetrize(solve_triangular(R, Rinv_T))
    log_det += 2.0 * np.log(np.abs(np.diagonal(R))).sum()

    x2, A22, A12 = [], [], []
    x2_inner, A22_inner, A12_inner, A12_cross = [], [], [], []
    for i in range(m):
        x2_i = solve_triangular(R_i[i], c1[i] - C1[i] @ x1)
        RinvC1 = solve_triangular(R_i[i], C1[i])
        A12_i = -A11 @ RinvC1.T
        Ri_inv_T = solve_triangular(R_i[i], np.eye(q1), trans="T")
        A22_i = _symmetrize(solve_triangular(R_i[i], Ri_inv_T - C1[i] @ A12_i))
        x2.append(x2_i)
        A12.append(A12_i)
        A22.append(A22_i)

        xs, A22s, A12s, crosses = [], [], [], []
        for j in range(len(problem.groups[i])):
            Rij, d1ij, D1ij, Dd1ij = R_ij[i][j], d1[i][j], D1[i][j], Dd1[i][j]
            x2_ij = solve_triangular(Rij, d1ij - D1ij @ x1 - Dd1ij @ x2_i)
            A12_ij = -solve_triangular(Rij, D1ij @ A11 + Dd1ij @ A12_i.T).T
            A12_i_j = -solve_triangular(Rij, D1ij @ A12_i + Dd1ij @ A22_i).T
            Rij_inv_T = solve_triangular(Rij, np.eye(q2), trans="T")
            A22_ij = _symmetrize(solve_triangular(
                Rij, Rij_inv_T - D1ij @ A12_ij - Dd1ij @ A12_i_j))
            xs.append(x2_ij)
            A22s.append(A22_ij)
            A12s.append(A12_ij)
            crosses.append(A12_i_j)
        x2_inner.append(xs)
        A22_inner.append(A22s)
        A12_inner.append(A12s)
        A12_cross.append(crosses)

    return ThreeLevelSolution(
        x1=x1, A11=A11, x2=x2, A22=A22, A12=A12,
        x2_inner=x2_inner, A22_inner=A22_inner,
        A12_inner=A12_inner, A12_cross=A12_cross,
        log_det_btb=float(log_det),
    )


def stack_two_level(problem: TwoLevelSparseProblem):
    """Explicitly stacked (B, b) of a two-level problem, for dense work."""
    m, p, q = problem.m, problem.p, problem.q
    rows = [g[0].shape[0] for g in problem.groups]
    B = np.zeros((sum(rows), p + m * q))
    b = np.empty(sum(rows))
    offset = 0
    for i, (bi, Bi, Bdi) in enumerate(problem.groups):
        r = rows[i]
        B[offset:offset + r, :p] = Bi
        B[offset:offset + r, p + i * q:p + (i + 1) * q] = Bdi
        b[offset:offset + r] = bi
        offset += r
    return B, b


def stack_three_level(problem: ThreeLevelSparseProblem):
    """Explicitly stacked (B, b) of a three-level problem, for dense work."""
    m, p, q1, q2 = problem.m, problem.p, problem.q1, problem.q2
    n = problem.n
    total_rows = sum(blk[0].shape[0] for inner in problem.groups for blk in inner)
    ncols = p + sum(q1 + n_i * q2 for n_i in n)
    B = np.zeros((total_rows, ncols))
    b = np.empty(total_rows)
    row = 0
    col_group = p
    for i, inner in enumerate(problem.groups):
        col_inner = col_group + q1
        for j, (bij, Bij, Bdij, Bddij) in enumerate(inner):
            r = bij.shape[0]
            B[row:row + r, :p] = Bij
            B[row:row + r, col_group:col_group + q1] = Bdij
            B[row:row + r, col_inner + j * q2:col_inner + (j + 1) * q2] = Bddij
            b[row:row + r] = bij
            row += r
        col_group += q1 + n[i] * q2
    return B, b


def _dense_inverse(B):
    A = B.T @ B
    sign, log_det = np.linalg.slogdet(A)
    if sign <= 0 or not np.isfinite(log_det):
        raise SingularMatrixError("stacked normal equations are singular")
    try:
        Ainv = np.linalg.inv(A)
    except np.linalg.LinAlgError as err:
        raise SingularMatrixError(str(err)) from None
    return Ainv, log_det


def dense_two_level_oracle(problem: TwoLevelSparseProblem) -> TwoLevelSolution:
    """Reference solution via the fully stacked (B^T B)^{-1}."""
    m, p, q = problem.m, problem.p, problem.q
    B, b = stack_two_level(problem)
    Ainv, log_det = _dense_inverse(B)
    x = Ainv @ (B.T @ b)
    x2 = [x[p + i * q:p + (i + 1) * q] for i in range(m)]
    A22 = [Ainv[p + i * q:p + (i + 1) * q, p + i * q:p + (i + 1) * q] for i in range(m)]
    A12 = [Ainv[:p, p + i * q:p + (i + 1) * q] for i in range(m)]
    return TwoLevelSolution(x1=x[:p], A11=Ainv[:p, :p], x2=x2, A22=A22, A12=A12,
                            log_det_btb=float(log_det))


def dense_three_level_oracle(problem: ThreeLevelSparseProblem) -> ThreeLevelSolution:
    """Reference solution via the fully stacked (B^T B)^{-1}."""
    m, p, q1, q2 = problem.m, problem.p, problem.q1, problem.q2
    n = problem.n
    B, b = stack_three_level(problem)
    Ainv, log_det = _dense_inverse(B)
    x = Ainv @ (B.T @ b)

    x2, A22, A12 = [], [], []
    x2_inner, A22_inner, A12_inner, A12_cross = [], [], [], []
    col_group = p
    for i in range(m):
        g = slice(col_group, col_group + q1)
        x2.append(x[g])
        A22.append(Ainv[g, g])
        A12.append(Ainv[:p, g])
        xs, A22s, A12s, crosses = [], [], [], []
        col_inner = col_group + q1
        for j in range(n[i]):
            h = slice(col_inner + j * q2, col_inner + (j + 1) * q2)
            xs.append(x[h])
            A22s.append(Ainv[h, h])
            A12s.append(Ainv[:p, h])
            crosses.append(Ainv[g, h])
        x2_inner.append(xs)
        A22_inner.append(A22s)
        A12_inner.append(A12s)
        A12_cross.append(crosses)
        col_group += q1 + n[i] * q2

    return ThreeLevelSolution(
        x1=x[:p], A11=Ainv[:p, :p], x2=x2, A22=A22, A12=A12,
        x2_inner=x2_inner, A22_inner=A22_inner,
        A12_inner=A12_inner, A12_cross=A12_cross,
        log_det_btb=float(log_det),
    )
