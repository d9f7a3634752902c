"""Versioned JSON persistence for fit results.

Artifacts are human-inspectable JSON.  Floats are written with Python's
shortest round-trip repr, so a write/read cycle reproduces every number
bit for bit.  The loader refuses major versions it does not know.
"""

import json
from dataclasses import fields

import numpy as np

from .blup import BlupFitThreeLevel, BlupFitTwoLevel
from .contrast import ContrastFit, QStateContrast
from .designs import VarianceParamsThreeLevel, VarianceParamsTwoLevel
from .exceptions import ArtifactFormatError
from .mfvb import MfvbFit, QStateThreeLevel, QStateTwoLevel
from .splines import SplineBasis

FORMAT_VERSION = "1.0"

# how each state field nests: 0 = scalar/array, 1 = list of arrays,
# 2 = list of lists of arrays
_STATE_DEPTH = {
    "group_mu": 1, "group_Sigma": 1, "group_cross": 1,
    "sub_mu": 2, "sub_Sigma": 2, "sub_cross": 2, "sub_cross_gh": 2,
}


def _encode(value, depth=0):
    if depth == 0:
        if isinstance(value, np.ndarray):
            return value.tolist()
        if isinstance(value, (np.floating, np.integer)):
            return value.item()
        return value
    return [_encode(v, depth - 1) for v in value]


def _decode(value, depth=0):
    if depth == 0:
        if isinstance(value, list):
            return np.asarray(value, dtype=float)
        return value
    return [_decode(v, depth - 1) for v in value]


def _encode_state(state):
    out = {}
    for f in fields(state):
        out[f.name] = _encode(getattr(state, f.name),
                              _STATE_DEPTH.get(f.name, 0))
    return out


def _decode_state(cls, payload):
    kwargs = {}
    for f in fields(cls):
        if f.name not in payload:
            raise ArtifactFormatError(f"missing state field {f.name!r}")
        kwargs[f.name] = _decode(payload[f.name], _STATE_DEPTH.get(f.name, 0))
    return cls(**kwargs)


def _encode_basis(basis: SplineBasis):
    return {"interior_knots": list(basis.interior_knots),
            "boundary": list(basis.boundary)}


def _decode_basis(payload):
    return SplineBasis(interior_knots=tuple(payload["interior_knots"]),
                       boundary=tuple(payload["boundary"]))


def _encode_hyper(hyper):
    return {f.name: _encode(getattr(hyper, f.name)) for f in fields(hyper)}


def save_fit(fit, path, hyper=None, train_x_range=None):
    """Write a fit artifact; returns the payload dictionary.

    hyper, when given, records the prior hyperparameters alongside the fit
    for provenance; prediction does not need them.
    """
    payload = {"format_version": FORMAT_VERSION}
    if hyper is not None:
        payload["hyperparameters"] = _encode_hyper(hyper)
    if isinstance(fit, MfvbFit):
        payload.update({
            "method": "mfvb", "level": fit.level,
            "group_labels": list(fit.group_labels),
            "state_kind": type(fit.state).__name__,
            "state": _encode_state(fit.state),
            "convergence": {"iterations": fit.iterations,
                            "converged": fit.converged,
                            "elbo_trace": list(fit.elbo_trace),
                            "wall_time_s": fit.wall_time_s},
        })
        if fit.level == 2:
            payload["bases"] = {"gbl": _encode_basis(fit.gbl_basis),
                                "grp": _encode_basis(fit.grp_basis)}
        else:
            payload["bases"] = {"gbl": _encode_basis(fit.gbl_basis),
                                "g": _encode_basis(fit.g_basis),
                                "h": _encode_basis(fit.h_basis)}
            payload["subgroup_labels"] = [list(s) for s in fit.subgroup_labels]
    elif isinstance(fit, BlupFitTwoLevel):
        payload.update({
            "method": "blup", "level": 2,
            "group_labels": list(fit.group_labels),
            "bases": {"gbl": _encode_basis(fit.gbl_basis),
                      "grp": _encode_basis(fit.grp_basis)},
            "coefficients": {
                "beta_u_gbl": _encode(fit.beta_u_gbl),
                "Cov_beta_u_gbl": _encode(fit.Cov_beta_u_gbl),
                "group_coefs": _encode(fit.group_coefs, 1),
                "group_covs": _encode(fit.group_covs, 1),
                "group_cross": _encode(fit.group_cross, 1),
            },
            "variance": {
                "sigma_eps_sq": fit.variance.sigma_eps_sq,
                "sigma_gbl_sq": fit.variance.sigma_gbl_sq,
                "sigma_grp_sq": fit.variance.sigma_grp_sq,
                "Sigma": _encode(fit.variance.Sigma),
            },
        })
    elif isinstance(fit, BlupFitThreeLevel):
        payload.update({
            "method": "blup", "level": 3,
            "group_labels": list(fit.group_labels),
            "subgroup_labels": [list(s) for s in fit.subgroup_labels],
            "bases": {"gbl": _encode_basis(fit.gbl_basis),
                      "g": _encode_basis(fit.g_basis),
                      "h": _encode_basis(fit.h_basis)},
            "coefficients": {
                "beta_u_gbl": _encode(fit.beta_u_gbl),
                "Cov_beta_u_gbl": _encode(fit.Cov_beta_u_gbl),
                "group_coefs": _encode(fit.group_coefs, 1),
                "group_covs": _encode(fit.group_covs, 1),
                "group_cross": _encode(fit.group_cross, 1),
                "sub_coefs": _encode(fit.sub_coefs, 2),
                "sub_covs": _encode(fit.sub_covs, 2),
                "sub_cross": _encode(fit.sub_cross, 2),
                "sub_cross_gh": _encode(fit.sub_cross_gh, 2),
            },
            "variance": {
                "sigma_eps_sq": fit.variance.sigma_eps_sq,
                "sigma_gbl_sq": fit.variance.sigma_gbl_sq,
                "sigma_grp_g_sq": fit.variance.sigma_grp_g_sq,
                "sigma_grp_h_sq": fit.variance.sigma_grp_h_sq,
                "Sigma_g": _encode(fit.variance.Sigma_g),
                "Sigma_h": _encode(fit.variance.Sigma_h),
            },
        })
    elif isinstance(fit, ContrastFit):
        payload.update({
            "method": "contrast", "level": 2,
            "group_labels": list(fit.group_labels),
            "bases": {"gbl": _encode_basis(fit.gbl_basis),
                      "grp": _encode_basis(fit.grp_basis)},
            "K_gbl": fit.K_gbl, "K_grp": fit.K_grp,
            "state": _encode_state(fit.state),
            "convergence": {"iterations": fit.iterations,
                            "converged": fit.converged,
                            "wall_time_s": fit.wall_time_s},
        })
    else:
        raise TypeError(f"cannot serialize {type(fit).__name__}")
    if train_x_range is not None:
        payload["train_x_range"] = [float(train_x_range[0]),
                                    float(train_x_range[1])]
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1)
    return payload


def load_fit(path):
    """Read a fit artifact back into the matching fit object."""
    with open(path) as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as err:
            raise ArtifactFormatError(f"not valid JSON: {err}") from None
    version = str(payload.get("format_version", ""))
    major = version.split(".")[0]
    if major != FORMAT_VERSION.split(".")[0]:
        raise ArtifactFormatError(
            f"unsupported artifact major version {version!r}")
    method = payload.get("method")
    level = payload.get("level")

    if method == "mfvb" and level == 2:
        state = _decode_state(QStateTwoLevel, payload["state"])
        conv = payload["convergence"]
        return MfvbFit(level=2, state=state,
                       gbl_basis=_decode_basis(payload["bases"]["gbl"]),
                       grp_basis=_decode_basis(payload["bases"]["grp"]),
                       group_labels=list(payload["group_labels"]),
                       iterations=conv["iterations"],
                       converged=conv["converged"],
                       elbo_trace=list(conv["elbo_trace"]),
                       wall_time_s=conv["wall_time_s"])
    if method == "mfvb" and level == 3:
        state = _decode_state(QStateThreeLevel, payload["state"])
        conv = payload["convergence"]
        return MfvbFit(level=3, state=state,
                       gbl_basis=_decode_basis(payload["bases"]["gbl"]),
                       g_basis=_decode_basis(payload["bases"]["g"]),
                       h_basis=_decode_basis(payload["bases"]["h"]),
                       group_labels=list(payload["group_labels"]),
                       subgroup_labels=[list(s) for s
                                        in payload["subgroup_labels"]],
                       iterations=conv["iterations"],
                       converged=conv["converged"],
                       elbo_trace=list(conv["elbo_trace"]),
                       wall_time_s=conv["wall_time_s"])
    if method == "blup" and level == 2:
        co = payload["coefficients"]
        var = payload["variance"]
        return BlupFitTwoLevel(
            beta_u_gbl=_decode(co["beta_u_gbl"]),
            Cov_beta_u_gbl=_decode(co["Cov_beta_u_gbl"]),
            group_coefs=_decode(co["group_coefs"], 1),
            group_covs=_decode(co["group_covs"], 1),
            group_cross=_decode(co["group_cross"], 1),
            gbl_basis=_decode_basis(payload["bases"]["gbl"]),
            grp_basis=_decode_basis(payload["bases"]["grp"]),
            group_labels=list(payload["group_labels"]),
            variance=VarianceParamsTwoLevel(
                sigma_eps_sq=var["sigma_eps_sq"],
                sigma_gbl_sq=var["sigma_gbl_sq"],
                sigma_grp_sq=var["sigma_grp_sq"],
                Sigma=_decode(var["Sigma"])),
        )
    if method == "blup" and level == 3:
        co = payload["coefficients"]
        var = payload["variance"]
        return BlupFitThreeLevel(
            beta_u_gbl=_decode(co["beta_u_gbl"]),
            Cov_beta_u_gbl=_decode(co["Cov_beta_u_gbl"]),
            group_coefs=_decode(co["group_coefs"], 1),
            group_covs=_decode(co["group_covs"], 1),
            group_cross=_decode(co["group_cross"], 1),
            sub_coefs=_decode(co["sub_coefs"], 2),
            sub_covs=_decode(co["sub_covs"], 2),
            sub_cross=_decode(co["sub_cross"], 2),
            sub_cross_gh=_decode(co["sub_cross_gh"], 2),
            gbl_basis=_decode_basis(payload["bases"]["gbl"]),
            g_basis=_decode_basis(payload["bases"]["g"]),
            h_basis=_decode_basis(payload["bases"]["h"]),
            group_labels=list(payload["group_labels"]),
            subgroup_labels=[list(s) for s in payload["subgroup_labels"]],
            variance=VarianceParamsThreeLevel(
                sigma_eps_sq=var["sigma_eps_sq"],
                sigma_gbl_sq=var["sigma_gbl_sq"],
                sigma_grp_g_sq=var["sigma_grp_g_sq"],
                sigma_grp_h_sq=var["sigma_grp_h_sq"],
                Sigma_g=_decode(var["Sigma_g"]),
                Sigma_h=_decode(var["Sigma_h"])),
        )
    if method == "contrast":
        state = _decode_state(QStateContrast, payload["state"])
        conv = payload["convergence"]
        return ContrastFit(state=state,
                           gbl_basis=_decode_basis(payload["bases"]["gbl"]),
                           grp_basis=_decode_basis(payload["bases"]["grp"]),
                           group_labels=list(payload["group_labels"]),
                           K_gbl=payload["K_gbl"], K_grp=payload["K_grp"],
                           iterations=conv["iterations"],
                           converged=conv["converged"],
                           wall_time_s=conv["wall_time_s"])
    raise ArtifactFormatError(
        f"unknown artifact method/level: {method!r}/{level!r}")


def train_x_range(payload_or_path):
    if isinstance(payload_or_path, dict):
        payload = payload_or_path
    else:
        with open(payload_or_path) as fh:
            payload = json.load(fh)
    rng = payload.get("train_x_range")
    return None if rng is None else (rng[0], rng[1])
