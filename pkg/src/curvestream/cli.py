"""Command-line interface.

Subcommands: simulate2, simulate3, fit2, fit3, predict, contrast-fit,
contrast-curve, bench.  Exit codes: 0 success, 1 input/validation error,
2 numerical failure.
"""

import argparse
import csv
import json
import sys

import numpy as np

from . import artifact as artifact_io
from .blup import BlupFitThreeLevel, BlupFitTwoLevel, predict_curve
from .contrast import (
    CategorizedTwoLevelData,
    ContrastFit,
    ContrastHyperparameters,
    contrast_curve,
    fit_contrast,
)
from .designs import (
    VarianceParamsThreeLevel,
    VarianceParamsTwoLevel,
    build_three_level_design,
    build_two_level_design,
)
from .exceptions import (
    ArtifactFormatError,
    CurvestreamError,
    DimensionCapExceededError,
    DimensionMismatchError,
    GridMismatchError,
    NonFiniteUpdateError,
    NonPositiveDefiniteError,
    NotNormalizedError,
    OutOfRangeError,
    RankDeficientError,
    SingleCategoryError,
    SingularMatrixError,
    TooFewDistinctValuesError,
    UnknownGroupError,
)
from .mfvb import (
    FitOptions,
    HyperparametersThreeLevel,
    HyperparametersTwoLevel,
    credible_band,
    fit_mfvb,
)
from .simbench import (
    SimConfig,
    run_benchmark,
    simulate_three_level,
    simulate_two_level,
    timing_records_to_csv,
    timing_records_to_json,
)

_NUMERICAL_ERRORS = (RankDeficientError, SingularMatrixError,
                     NonFiniteUpdateError, NonPositiveDefiniteError,
                     DimensionCapExceededError)
_VALIDATION_ERRORS = (DimensionMismatchError, TooFewDistinctValuesError,
                      SingleCategoryError, UnknownGroupError,
                      ArtifactFormatError, OutOfRangeError,
                      GridMismatchError, NotNormalizedError)


class _InputError(Exception):
    """User-facing validation problem (bad file, schema, or flag value)."""


def _log(args, message, **fields):
    if getattr(args, "quiet", False):
        return
    if getattr(args, "json_logs", False):
        print(json.dumps({"message": message, **fields}))
    else:
        extra = " ".join(f"{k}={v}" for k, v in fields.items())
        print(f"{message}" + (f" ({extra})" if extra else ""))


def _read_csv(path, required, optional=()):
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as err:
        raise _InputError(f"cannot open {path}: {err}") from None
    with fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise _InputError(f"{path}: empty file, header required")
        missing = [c for c in required if c not in reader.fieldnames]
        if missing:
            raise _InputError(
                f"{path}: missing required columns {missing}; "
                f"found {reader.fieldnames}")
        columns = {c: [] for c in list(required) + [c for c in optional
                                                    if c in reader.fieldnames]}
        for lineno, row in enumerate(reader, start=2):
            for c in columns:
                value = row.get(c)
                if value is None or value == "":
                    raise _InputError(f"{path}:{lineno}: missing value for {c!r}")
                columns[c].append(value)
    return columns


def _floats(values, path, column):
    try:
        out = np.array([float(v) for v in values])
    except ValueError as err:
        raise _InputError(f"{path}: column {column!r}: {err}") from None
    if not np.all(np.isfinite(out)):
        raise _InputError(f"{path}: column {column!r} has non-finite values")
    return out


def _load_json_file(path, what):
    if path is None:
        return {}
    try:
        with open(path) as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as err:
        raise _InputError(f"cannot read {what} file {path}: {err}") from None


def _build_from_keys(cls, payload, what):
    try:
        return cls(**payload)
    except TypeError as err:
        raise _InputError(f"bad {what}: {err}") from None
    except (ValueError, NonPositiveDefiniteError) as err:
        raise _InputError(f"bad {what}: {err}") from None


def _parse_grid(spec, train_range):
    if spec is None:
        if train_range is None:
            raise _InputError("artifact has no training range; pass --grid lo,hi,n")
        return np.linspace(train_range[0], train_range[1], 201)
    parts = str(spec).split(",")
    if len(parts) == 1:
        if train_range is None:
            raise _InputError("artifact has no training range; pass --grid lo,hi,n")
        return np.linspace(train_range[0], train_range[1], int(parts[0]))
    if len(parts) == 3:
        lo, hi, n = float(parts[0]), float(parts[1]), int(parts[2])
        return np.linspace(lo, hi, n)
    raise _InputError("--grid must be N or lo,hi,N")


def _parse_target(spec):
    if spec in (None, "global"):
        return None, None
    if spec.startswith("group="):
        return spec[len("group="):], None
    if spec.startswith("subgroup="):
        rest = spec[len("subgroup="):]
        if "/" not in rest:
            raise _InputError("subgroup target must be subgroup=G/H")
        g, h = rest.split("/", 1)
        return g, h
    raise _InputError(f"bad --target {spec!r}")


def _write_curve_csv(path, grid, mean, sd, lower, upper):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "mean", "sd", "lower", "upper"])
        for k in range(len(grid)):
            writer.writerow([repr(float(grid[k])), repr(float(mean[k])),
                             repr(float(sd[k])), repr(float(lower[k])),
                             repr(float(upper[k]))])


# ---------------------------------------------------------------------------
# subcommand handlers
# ---------------------------------------------------------------------------

def _cmd_simulate2(args):
    sim = simulate_two_level(SimConfig(m=args.m, seed=args.seed,
                                       sigma_eps=args.sigma_eps,
                                       n_range=(args.n_lo, args.n_hi)))
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["group", "x", "y"])
        for g, x, y in zip(sim.group, sim.x, sim.y):
            writer.writerow([g, repr(float(x)), repr(float(y))])
    _log(args, "wrote simulated two-level data", rows=sim.x.size, out=args.out)
    return 0


def _cmd_simulate3(args):
    sim = simulate_three_level(m=args.m, seed=args.seed,
                               sigma_eps=args.sigma_eps,
                               n_range=(args.n_lo, args.n_hi),
                               o_range=(args.o_lo, args.o_hi))
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["group", "subgroup", "x", "y"])
        for g, s, x, y in zip(sim.group, sim.subgroup, sim.x, sim.y):
            writer.writerow([g, s, repr(float(x)), repr(float(y))])
    _log(args, "wrote simulated three-level data", rows=sim.x.size,
         out=args.out)
    return 0


def _fit_options(args):
    return FitOptions(max_iterations=args.max_iter, rel_tol=args.tol,
                      fixed_iterations=args.fixed_iters)


def _cmd_fit2(args):
    cols = _read_csv(args.data, ("group", "x", "y"))
    x = _floats(cols["x"], args.data, "x")
    y = _floats(cols["y"], args.data, "y")
    design = build_two_level_design(x, y, cols["group"],
                                    K_gbl=args.kgbl, K_grp=args.kgrp)
    payload = _load_json_file(args.hyper, "hyperparameter")
    if args.method == "mfvb":
        hyper = _build_from_keys(HyperparametersTwoLevel, payload,
                                 "hyperparameters")
        fit = fit_mfvb(design, hyper, _fit_options(args))
        _log(args, "mfvb fit finished", iterations=fit.iterations,
             converged=fit.converged)
        saved_hyper = hyper
    else:
        if not payload:
            raise _InputError("--method blup needs --hyper with the variance "
                              "parameters (sigma_eps_sq, sigma_gbl_sq, "
                              "sigma_grp_sq, Sigma)")
        var = _build_from_keys(VarianceParamsTwoLevel, payload,
                               "variance parameters")
        from .blup import fit_blup_two_level
        fit = fit_blup_two_level(design, var)
        _log(args, "blup fit finished", groups=design.m)
        saved_hyper = None
    artifact_io.save_fit(fit, args.out, hyper=saved_hyper,
                         train_x_range=(float(x.min()), float(x.max())))
    _log(args, "wrote fit artifact", out=args.out)
    return 0


def _cmd_fit3(args):
    cols = _read_csv(args.data, ("group", "subgroup", "x", "y"))
    x = _floats(cols["x"], args.data, "x")
    y = _floats(cols["y"], args.data, "y")
    design = build_three_level_design(x, y, cols["group"], cols["subgroup"],
                                      K_gbl=args.kgbl, K_g=args.kgrp,
                                      K_h=args.kgrp_h)
    payload = _load_json_file(args.hyper, "hyperparameter")
    if args.method == "mfvb":
        hyper = _build_from_keys(HyperparametersThreeLevel, payload,
                                 "hyperparameters")
        fit = fit_mfvb(design, hyper, _fit_options(args))
        _log(args, "mfvb fit finished", iterations=fit.iterations,
             converged=fit.converged)
        saved_hyper = hyper
    else:
        if not payload:
            raise _InputError("--method blup needs --hyper with the variance "
                              "parameters")
        var = _build_from_keys(VarianceParamsThreeLevel, payload,
                               "variance parameters")
        from .blup import fit_blup_three_level
        fit = fit_blup_three_level(design, var)
        _log(args, "blup fit finished", groups=design.m)
        saved_hyper = None
    artifact_io.save_fit(fit, args.out, hyper=saved_hyper,
                         train_x_range=(float(x.min()), float(x.max())))
    _log(args, "wrote fit artifact", out=args.out)
    return 0


def _cmd_predict(args):
    fit = artifact_io.load_fit(args.fit)
    if isinstance(fit, ContrastFit):
        raise _InputError("use contrast-curve for contrast fit artifacts")
    grid = _parse_grid(args.grid, artifact_io.train_x_range(args.fit))
    group, subgroup = _parse_target(args.target)
    if isinstance(fit, (BlupFitTwoLevel, BlupFitThreeLevel)):
        mean, sd = predict_curve(fit, grid, group=group, subgroup=subgroup)
        from scipy.stats import norm
        z = norm.ppf(0.5 * (1.0 + args.level))
        lower, upper = mean - z * sd, mean + z * sd
    else:
        mean, lower, upper = credible_band(fit, grid, level=args.level,
                                           group=group, subgroup=subgroup)
        from scipy.stats import norm
        z = norm.ppf(0.5 * (1.0 + args.level))
        sd = (upper - mean) / z if z > 0 else np.zeros_like(mean)
    _write_curve_csv(args.out, grid, mean, sd, lower, upper)
    _log(args, "wrote curve", out=args.out, points=len(grid))
    return 0


def _cmd_contrast_fit(args):
    cols = _read_csv(args.data, ("group", "x", "y", "category"))
    x = _floats(cols["x"], args.data, "x")
    y = _floats(cols["y"], args.data, "y")
    categories = list(dict.fromkeys(cols["category"]))
    if len(categories) != 2:
        raise _InputError(
            f"need exactly two categories, found {categories}")
    reference = categories[0]
    iota = np.array([1.0 if c == reference else 0.0
                     for c in cols["category"]])
    data = CategorizedTwoLevelData(x=x, y=y, group=cols["group"],
                                   indicator=iota)
    payload = _load_json_file(args.hyper, "hyperparameter")
    hyper = _build_from_keys(ContrastHyperparameters, payload,
                             "hyperparameters")
    fit = fit_contrast(data, hyper, _fit_options(args),
                       K_gbl=args.kgbl, K_grp=args.kgrp)
    artifact_io.save_fit(fit, args.out, hyper=hyper,
                         train_x_range=(float(x.min()), float(x.max())))
    _log(args, "contrast fit finished", iterations=fit.iterations,
         converged=fit.converged, reference_category=reference,
         out=args.out)
    return 0


def _cmd_contrast_curve(args):
    fit = artifact_io.load_fit(args.fit)
    if not isinstance(fit, ContrastFit):
        raise _InputError("artifact is not a contrast fit")
    grid = _parse_grid(args.grid, artifact_io.train_x_range(args.fit))
    mean, lower, upper = contrast_curve(fit, grid, level=args.level)
    from scipy.stats import norm
    z = norm.ppf(0.5 * (1.0 + args.level))
    sd = (upper - mean) / z if z > 0 else np.zeros_like(mean)
    _write_curve_csv(args.out, grid, mean, sd, lower, upper)
    _log(args, "wrote contrast curve", out=args.out, points=len(grid))
    return 0


def _cmd_bench(args):
    ms = [int(v) for v in args.ms.split(",")]
    result = run_benchmark(ms, replications=args.reps,
                           fixed_iterations=args.fixed_iters,
                           seed=args.seed, dense_cap=args.cap,
                           parallel=args.parallel)
    timing_records_to_csv(result, args.out)
    if args.json_out:
        timing_records_to_json(result, args.json_out)
    _log(args, "benchmark finished", records=len(result.records),
         slopes=result.slopes, out=args.out)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="curvestream",
        description="Streamlined fitting and Bayesian inference for "
                    "two- and three-level group-specific curve models.")
    parser.add_argument("--quiet", action="store_true",
                        help="suppress progress output")
    parser.add_argument("--json-logs", action="store_true",
                        help="emit progress lines as JSON")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate2", help="generate two-level benchmark data")
    p.add_argument("--m", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sigma-eps", type=float, default=0.2)
    p.add_argument("--n-lo", type=int, default=30)
    p.add_argument("--n-hi", type=int, default=60)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_simulate2)

    p = sub.add_parser("simulate3", help="generate three-level data")
    p.add_argument("--m", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sigma-eps", type=float, default=0.2)
    p.add_argument("--n-lo", type=int, default=2)
    p.add_argument("--n-hi", type=int, default=5)
    p.add_argument("--o-lo", type=int, default=20)
    p.add_argument("--o-hi", type=int, default=40)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_simulate3)

    for name, handler, extra_k in (("fit2", _cmd_fit2, False),
                                   ("fit3", _cmd_fit3, True)):
        p = sub.add_parser(name, help=f"fit a {name[-1]}-level model")
        p.add_argument("--data", required=True, help="input CSV")
        p.add_argument("--method", choices=("mfvb", "blup"), default="mfvb")
        p.add_argument("--kgbl", type=int, default=20,
                       help="global spline columns")
        p.add_argument("--kgrp", type=int, default=10,
                       help="group spline columns")
        if extra_k:
            p.add_argument("--kgrp-h", type=int, default=10,
                           help="subgroup spline columns")
        p.add_argument("--hyper", help="JSON file: prior hyperparameters "
                                       "(mfvb) or variance parameters (blup)")
        p.add_argument("--tol", type=float, default=1e-5)
        p.add_argument("--max-iter", type=int, default=500)
        p.add_argument("--fixed-iters", type=int, default=None)
        p.add_argument("--out", required=True, help="fit artifact path")
        p.set_defaults(func=handler)

    p = sub.add_parser("predict", help="evaluate fitted curves on a grid")
    p.add_argument("--fit", required=True, help="fit artifact")
    p.add_argument("--grid", help="N or lo,hi,N (default 201 points over "
                                  "the training range)")
    p.add_argument("--target", default="global",
                   help="global | group=G | subgroup=G/H")
    p.add_argument("--level", type=float, default=0.95)
    p.add_argument("--out", required=True, help="output CSV")
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("contrast-fit", help="fit the two-category model")
    p.add_argument("--data", required=True,
                   help="CSV with group,x,y,category columns")
    p.add_argument("--kgbl", type=int, default=20)
    p.add_argument("--kgrp", type=int, default=10)
    p.add_argument("--hyper", help="JSON hyperparameter file")
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--max-iter", type=int, default=500)
    p.add_argument("--fixed-iters", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_contrast_fit)

    p = sub.add_parser("contrast-curve", help="between-category curve")
    p.add_argument("--fit", required=True)
    p.add_argument("--grid")
    p.add_argument("--level", type=float, default=0.95)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_contrast_curve)

    p = sub.add_parser("bench", help="time streamlined vs naive fitting")
    p.add_argument("--ms", default="50,100,200,400",
                   help="comma-separated ascending group counts")
    p.add_argument("--reps", type=int, default=3)
    p.add_argument("--fixed-iters", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cap", type=int, default=20000,
                   help="dense dimension cap for the naive variant")
    p.add_argument("--parallel", action="store_true",
                   help="thread per-group work (honours CURVESTREAM_THREADS)")
    p.add_argument("--out", required=True, help="timing CSV")
    p.add_argument("--json-out", help="optional timing JSON")
    p.set_defaults(func=_cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        return 0 if err.code in (0, None) else 1
    try:
        return args.func(args)
    except _InputError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except _NUMERICAL_ERRORS as err:
        detail = ""
        group = getattr(err, "group", None)
        subgroup = getattr(err, "subgroup", None)
        if group is not None:
            detail = f" (group index {group}"
            detail += f", subgroup index {subgroup})" if subgroup is not None else ")"
        print(f"numerical failure: {err}{detail}", file=sys.stderr)
        return 2
    except _VALIDATION_ERRORS as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except CurvestreamError as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
