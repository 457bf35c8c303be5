"""Command-line entry point: ``plmfusion fit|curve|simulate|bandwidth``.

Exit codes: 0 success, 1 other failure, 2 invalid input, 3 solver
infeasibility. Console numbers use 6 significant digits; files written
with ``--out`` keep full precision.
"""

from __future__ import annotations

import argparse
import json
import sys
import warnings

from plmfusion.bandwidth import DEFAULT_S_GRID, cv_scores
from plmfusion.errors import (
    ConvergenceError,
    InfeasibleConstraintError,
    NegativeVarianceError,
    PlmFusionError,
    RankDeficiencyError,
    ValidationError,
)
from plmfusion.io import FitReport, read_dataset, read_evidence, write_curve_csv
from plmfusion.simulation import (
    SimConfig,
    run_monte_carlo,
    write_curve_log,
    write_metrics_csv,
    write_run_log,
)
from plmfusion.smoother import DEFAULT_RATE
from plmfusion.workflow import curve_on_grid, fit_report, parse_bandwidth

EXIT_OK, EXIT_FAILURE, EXIT_INVALID, EXIT_INFEASIBLE = 0, 1, 2, 3


def _g(x) -> str:
    return f"{x:.6g}" if isinstance(x, float) else str(x)


def _print_table(header, rows, out=None):
    out = out or sys.stdout
    cells = [[_g(v) for v in row] for row in rows]
    widths = [max(len(h), *(len(r[j]) for r in cells)) for j, h in enumerate(header)]
    print("  ".join(h.rjust(w) for h, w in zip(header, widths)), file=out)
    for r in cells:
        print("  ".join(c.rjust(w) for c, w in zip(r, widths)), file=out)


def _positive_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return v


def _cmd_fit(args) -> int:
    evidence = read_evidence(args.summary) if args.summary else None
    working = list(evidence.model.covariates) if evidence is not None else []
    data = read_dataset(args.data, args.outcome, args.nonlinear, working, args.linear)
    report = fit_report(
        data,
        args.estimator,
        evidence,
        parse_bandwidth(args.bandwidth),
        level=args.level,
        a=args.rate,
        provenance={
            "data": str(args.data),
            "summary": None if args.summary is None else str(args.summary),
            "n": data.n,
        },
    )
    if args.out:
        report.write(args.out)
    bw = report.bandwidth
    print(f"estimator: {report.estimator}   n = {data.n}   bandwidth b = {_g(bw.b)}"
          + ("" if bw.s is None else f" (s = {_g(bw.s)}, a = {_g(bw.a)})"))
    pct = f"{100 * report.level:g}%"
    _print_table(
        ["coefficient", "estimate", "ase", "z", "p_value", f"{pct} low", f"{pct} high"],
        [[r.name, r.estimate, r.ase, r.z, r.p_value, r.ci_low, r.ci_high] for r in report.coefficients],
    )
    if report.weights:
        w = report.weights
        print(f"weights: min p = {_g(w['min_p'])}, max p = {_g(w['max_p'])}, "
              f"|lambda| = {_g(w['lambda_norm'])}, iterations = {w['iterations']}")
    for msg in report.warnings:
        print(f"warning: {msg}", file=sys.stderr)
    return EXIT_OK


def _cmd_curve(args) -> int:
    report = FitReport.read(args.fit)
    grid, values, se = curve_on_grid(report, args.grid)
    if args.out:
        write_curve_csv(args.out, grid, values, se)
    else:
        _print_table(["z", "m_hat", "se"], [[float(a), float(b), float(c)] for a, b, c in zip(grid, values, se)])
    return EXIT_OK


def _parse_external(text: str):
    if text == "truth":
        return None
    try:
        v = int(text)
    except ValueError:
        raise ValidationError(f"--n-external must be an integer or 'truth', got {text!r}") from None
    return v


def _parse_s(text: str):
    if text == "auto":
        return "auto"
    try:
        v = float(text)
    except ValueError:
        raise ValidationError(f"--s must be a positive number or 'auto', got {text!r}") from None
    if not v > 0:
        raise ValidationError(f"--s must be positive, got {v}")
    return v


def _cmd_simulate(args) -> int:
    cfg = SimConfig(
        case=args.case,
        n_internal=args.n,
        n_external=_parse_external(args.n_external),
        runs=args.runs,
        seed=args.seed,
        s=_parse_s(args.s),
        a=args.rate,
        refresh_external_per_run=not args.fixed_external,
        intercept_in_external=not args.no_intercept,
        curve_bandwidth=args.curve_bandwidth,
    )
    result = run_monte_carlo(cfg, workers=args.workers)
    if args.out:
        write_metrics_csv(args.out, result)
    if args.log:
        write_run_log(args.log, result)
    if args.curve_log:
        write_curve_log(args.curve_log, result)
    n_ext = "truth" if cfg.truth else cfg.n_external
    print(f"case {cfg.case}: n = {cfg.n_internal}, N = {n_ext}, s = {_g(cfg.s)}, "
          f"runs = {len(result.records)}, failures = {len(result.failures)}")
    rows = []
    for est, m in result.metrics.items():
        for j, name in enumerate(m.coefficients):
            rows.append([est, name, float(m.bias[j]), float(m.mcsd[j]), float(m.ase[j]), float(m.cp[j]), float(m.re[j])])
    _print_table(["estimator", "coefficient", "bias", "mcsd", "ase", "cp", "re"], rows)
    print()
    _print_table(
        ["estimator", "mse_m", "are", "amcv", "av", "aore"],
        [[est, m.mse_m, m.are, m.amcv, m.av, m.aore] for est, m in result.metrics.items()],
    )
    return EXIT_OK


def _cmd_bandwidth(args) -> int:
    data = read_dataset(args.data, args.outcome, args.nonlinear, (), args.linear)
    search = cv_scores(data, args.method, args.grid or DEFAULT_S_GRID, a=args.rate)
    _print_table(["s", "b", "cv_score"],
                 [[s, s * data.n ** (-args.rate), float(sc)] for s, sc in zip(search.s_grid, search.scores)])
    print(f"selected: s = {_g(search.best.s)}, b = {_g(search.best.b)} ({search.method})")
    if args.out:
        payload = {
            "method": search.method,
            "s_grid": list(search.s_grid),
            "scores": list(search.scores),
            "best": search.best.to_dict(),
        }
        with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(json.dumps(payload, indent=2) + "\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="plmfusion", description="Partially linear models with external summary information.")
    sub = parser.add_subparsers(dest="command", required=True)

    def data_args(p):
        p.add_argument("--data", required=True, help="CSV file with a header row")
        p.add_argument("--outcome", required=True, help="response column")
        p.add_argument("--nonlinear", required=True, nargs="+", help="column(s) entering m(Z)")
        p.add_argument("--linear", nargs="+", default=None, help="linear covariates (default: all other columns)")
        p.add_argument("--rate", type=float, default=DEFAULT_RATE, help="exponent a in b = s n^-a")

    p = sub.add_parser("fit", help="fit pls, ib1 or ib2 and report coefficients")
    data_args(p)
    p.add_argument("--summary", help="external summary evidence JSON")
    p.add_argument("--estimator", choices=("pls", "ib1", "ib2"), default="pls")
    p.add_argument("--bandwidth", default="auto", help="'auto', a fixed b, or s=<s>")
    p.add_argument("--level", type=float, default=0.95)
    p.add_argument("--out", help="write the full fit report as JSON")
    p.set_defaults(func=_cmd_fit)

    p = sub.add_parser("curve", help="evaluate a fitted curve on a grid")
    p.add_argument("--fit", required=True, help="fit report JSON written by 'fit --out'")
    p.add_argument("--grid", type=_positive_int, default=100, help="number of grid points")
    p.add_argument("--out", help="CSV output (z, m_hat, se)")
    p.set_defaults(func=_cmd_curve)

    p = sub.add_parser("simulate", help="Monte Carlo study of the three estimators")
    p.add_argument("--case", choices=("I", "II"), required=True)
    p.add_argument("--n", type=_positive_int, default=200)
    p.add_argument("--n-external", default="truth", help="external sample size or 'truth'")
    p.add_argument("--runs", type=_positive_int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--s", default="1.0", help="bandwidth scale or 'auto'")
    p.add_argument("--rate", type=float, default=DEFAULT_RATE)
    p.add_argument("--workers", type=_positive_int, default=1)
    p.add_argument("--curve-bandwidth", choices=("gcv", "fit"), default="gcv")
    p.add_argument("--fixed-external", action="store_true", help="draw the external summary once for all runs")
    p.add_argument("--no-intercept", action="store_true", help="external working model without intercept")
    p.add_argument("--out", help="aggregate metrics CSV")
    p.add_argument("--log", help="per-run coefficient log CSV")
    p.add_argument("--curve-log", help="per-run curve log CSV")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("bandwidth", help="cross-validation curve for the bandwidth scale")
    data_args(p)
    p.add_argument("--method", choices=("cv", "dbe-cv"), default="dbe-cv")
    p.add_argument("--grid", type=float, nargs="+", help="candidate scales s")
    p.add_argument("--out", help="write the CV curve as JSON")
    p.set_defaults(func=_cmd_bandwidth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            return args.func(args)
    except (InfeasibleConstraintError, NegativeVarianceError, ConvergenceError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (ValidationError, RankDeficiencyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except PlmFusionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
