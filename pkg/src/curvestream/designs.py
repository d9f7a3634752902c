"""Design containers for grouped curve data and their builders.

Designs hold, per group (or per subgroup), the response vector together with
the linear columns [1, x] and the global and group-level spline columns.
Group labels are arbitrary strings mapped to dense indices in ingestion
order; the mapping travels with the design so fits can be queried by label.
"""

from dataclasses import dataclass, field

import numpy as np

from .distributions import _require_spd
from .exceptions import DimensionMismatchError
from .splines import SplineBasis, basis_from_data, osullivan_basis


@dataclass(frozen=True)
class TwoLevelDesign:
    y: list                      # per group: (n_i,)
    X: list                      # per group: (n_i, 2), first column ones
    Zgbl: list                   # per group: (n_i, K_gbl)
    Zgrp: list                   # per group: (n_i, K_grp)
    gbl_basis: SplineBasis
    grp_basis: SplineBasis
    group_labels: list = field(default=None)

    def __post_init__(self):
        if not self.y:
            raise DimensionMismatchError("design has no groups")
        K_gbl = self.Zgbl[0].shape[1]
        K_grp = self.Zgrp[0].shape[1]
        for i in range(len(self.y)):
            n_i = self.y[i].shape[0]
            if self.X[i].shape != (n_i, 2):
                raise DimensionMismatchError(f"group {i}: X must be (n_i, 2)")
            if not np.all(self.X[i][:, 0] == 1.0):
                raise DimensionMismatchError(f"group {i}: first X column must be ones")
            if self.Zgbl[i].shape != (n_i, K_gbl) or self.Zgrp[i].shape != (n_i, K_grp):
                raise DimensionMismatchError(f"group {i}: spline column mismatch")
        if self.group_labels is None:
            object.__setattr__(self, "group_labels",
                               [str(i) for i in range(len(self.y))])

    @property
    def m(self):
        return len(self.y)

    @property
    def n(self):
        return [yi.shape[0] for yi in self.y]

    @property
    def K_gbl(self):
        return self.Zgbl[0].shape[1]

    @property
    def K_grp(self):
        return self.Zgrp[0].shape[1]

    @property
    def p(self):
        """Columns carried by the shared block: intercept, slope, global spline."""
        return self.X[0].shape[1] + self.K_gbl

    @property
    def q(self):
        return self.X[0].shape[1] + self.K_grp

    def group_index(self, label):
        return self.group_labels.index(label)


@dataclass(frozen=True)
class ThreeLevelDesign:
    y: list                      # per (i, j): (o_ij,), as list of lists
    X: list
    Zgbl: list
    Zg: list                     # level-3 group deviation spline columns
    Zh: list                     # level-2 subgroup deviation spline columns
    gbl_basis: SplineBasis
    g_basis: SplineBasis
    h_basis: SplineBasis
    group_labels: list = field(default=None)
    subgroup_labels: list = field(default=None)

    def __post_init__(self):
        if not self.y or any(not inner for inner in self.y):
            raise DimensionMismatchError("design has an empty group")
        K_gbl = self.Zgbl[0][0].shape[1]
        Kg = self.Zg[0][0].shape[1]
        Kh = self.Zh[0][0].shape[1]
        for i, inner in enumerate(self.y):
            for j in range(len(inner)):
                o_ij = inner[j].shape[0]
                shapes = (self.X[i][j].shape, self.Zgbl[i][j].shape,
                          self.Zg[i][j].shape, self.Zh[i][j].shape)
                want = ((o_ij, 2), (o_ij, K_gbl), (o_ij, Kg), (o_ij, Kh))
                if shapes != want:
                    raise DimensionMismatchError(
                        f"group ({i},{j}): blocks {shapes} != {want}")
                if not np.all(self.X[i][j][:, 0] == 1.0):
                    raise DimensionMismatchError(
                        f"group ({i},{j}): first X column must be ones")
        if self.group_labels is None:
            object.__setattr__(self, "group_labels",
                               [str(i) for i in range(len(self.y))])
        if self.subgroup_labels is None:
            object.__setattr__(self, "subgroup_labels",
                               [[str(j) for j in range(len(inner))]
                                for inner in self.y])

    @property
    def m(self):
        return len(self.y)

    @property
    def n(self):
        return [len(inner) for inner in self.y]

    @property
    def K_gbl(self):
        return self.Zgbl[0][0].shape[1]

    @property
    def K_g(self):
        return self.Zg[0][0].shape[1]

    @property
    def K_h(self):
        return self.Zh[0][0].shape[1]

    @property
    def p(self):
        return 2 + self.K_gbl

    @property
    def q1(self):
        return 2 + self.K_g

    @property
    def q2(self):
        return 2 + self.K_h

    def group_index(self, label):
        return self.group_labels.index(label)

    def subgroup_index(self, group_label, subgroup_label):
        i = self.group_index(group_label)
        return i, self.subgroup_labels[i].index(subgroup_label)


@dataclass(frozen=True)
class VarianceParamsTwoLevel:
    """Known variance parameters for the frequentist two-level fit."""

    sigma_eps_sq: float
    sigma_gbl_sq: float
    sigma_grp_sq: float
    Sigma: np.ndarray            # 2x2 linear-deviation covariance

    def __post_init__(self):
        for name in ("sigma_eps_sq", "sigma_gbl_sq", "sigma_grp_sq"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        Sig = np.asarray(self.Sigma, dtype=float)
        object.__setattr__(self, "Sigma", Sig)
        if Sig.shape != (2, 2):
            raise ValueError("Sigma must be 2x2")
        _require_spd(Sig)


@dataclass(frozen=True)
class VarianceParamsThreeLevel:
    sigma_eps_sq: float
    sigma_gbl_sq: float
    sigma_grp_g_sq: float
    sigma_grp_h_sq: float
    Sigma_g: np.ndarray
    Sigma_h: np.ndarray

    def __post_init__(self):
        for name in ("sigma_eps_sq", "sigma_gbl_sq",
                     "sigma_grp_g_sq", "sigma_grp_h_sq"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("Sigma_g", "Sigma_h"):
            M = np.asarray(getattr(self, name), dtype=float)
            object.__setattr__(self, name, M)
            if M.shape != (2, 2):
                raise ValueError(f"{name} must be 2x2")
            _require_spd(M)


def _group_in_order(labels):
    """Unique labels in first-appearance order plus a per-row index array."""
    order = []
    index = {}
    idx = np.empty(len(labels), dtype=int)
    for r, lab in enumerate(labels):
        if lab not in index:
            index[lab] = len(order)
            order.append(lab)
        idx[r] = index[lab]
    return order, idx


def build_two_level_design(x, y, group, K_gbl=20, K_grp=10,
                           gbl_basis=None, grp_basis=None) -> TwoLevelDesign:
    """Assemble a two-level design from long-format columns.

    Bases default to data-driven quantile knots over the pooled x range.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    group = [str(g) for g in group]
    if not (x.shape == y.shape and x.ndim == 1 and len(group) == x.size):
        raise DimensionMismatchError("x, y, group must be equal-length columns")
    gbl = gbl_basis or basis_from_data(x, K_gbl)
    grp = grp_basis or basis_from_data(x, K_grp)
    labels, idx = _group_in_order(group)
    ys, Xs, Zgbls, Zgrps = [], [], [], []
    for i in range(len(labels)):
        rows = np.flatnonzero(idx == i)
        xi = x[rows]
        ys.append(y[rows])
        Xs.append(np.column_stack([np.ones(xi.size), xi]))
        Zgbls.append(osullivan_basis(xi, gbl))
        Zgrps.append(osullivan_basis(xi, grp))
    return TwoLevelDesign(y=ys, X=Xs, Zgbl=Zgbls, Zgrp=Zgrps,
                          gbl_basis=gbl, grp_basis=grp, group_labels=labels)


def build_three_level_design(x, y, group, subgroup, K_gbl=20, K_g=10, K_h=10,
                             gbl_basis=None, g_basis=None, h_basis=None) -> ThreeLevelDesign:
    """Assemble a three-level design from long-format columns."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    group = [str(g) for g in group]
    subgroup = [str(s) for s in subgroup]
    if not (x.shape == y.shape and x.ndim == 1
            and len(group) == x.size and len(subgroup) == x.size):
        raise DimensionMismatchError(
            "x, y, group, subgroup must be equal-length columns")
    gbl = gbl_basis or basis_from_data(x, K_gbl)
    gb = g_basis or basis_from_data(x, K_g)
    hb = h_basis or basis_from_data(x, K_h)
    glabels, gidx = _group_in_order(group)

    ys, Xs, Zgbls, Zgs, Zhs, slabels = [], [], [], [], [], []
    for i in range(len(glabels)):
        rows_i = np.flatnonzero(gidx == i)
        sub_i, sidx = _group_in_order([subgroup[r] for r in rows_i])
        slabels.append(sub_i)
        ys_i, Xs_i, Zgbl_i, Zg_i, Zh_i = [], [], [], [], []
        for j in range(len(sub_i)):
            rows = rows_i[np.flatnonzero(sidx == j)]
            xij = x[rows]
            ys_i.append(y[rows])
            Xs_i.append(np.column_stack([np.ones(xij.size), xij]))
            Zgbl_i.append(osullivan_basis(xij, gbl))
            Zg_i.append(osullivan_basis(xij, gb))
            Zh_i.append(osullivan_basis(xij, hb))
        ys.append(ys_i)
        Xs.append(Xs_i)
        Zgbls.append(Zgbl_i)
        Zgs.append(Zg_i)
        Zhs.append(Zh_i)
    return ThreeLevelDesign(y=ys, X=Xs, Zgbl=Zgbls, Zg=Zgs, Zh=Zhs,
                            gbl_basis=gbl, g_basis=gb, h_basis=hb,
                            group_labels=glabels, subgroup_labels=slabels)
