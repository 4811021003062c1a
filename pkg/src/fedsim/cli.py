"""Command-line entry point: ``fedsim <command> ...`` or ``python -m fedsim``.

Exit status is 0 on success, 1 for configuration or usage errors and 2 when
a computation fails at runtime.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from . import experiment, faults, metrics
from .errors import ArgumentError, ConfigurationError, FedsimError

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("fedsim")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigurationError(message, "argv")


def read_column(path, column=None):
    """Floats from a CSV file: the named column, or the only column.

    A first row that does not parse as numbers is taken as the header.
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"{str(path)!r} does not exist", "path")
    with path.open(newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if not rows:
        raise ArgumentError(f"{path} is empty")
    header = None
    try:
        [float(c) for c in rows[0]]
    except ValueError:
        header, rows = [c.strip() for c in rows[0]], rows[1:]
    if column is not None:
        if header is None or column not in header:
            raise ArgumentError(f"{path} has no column {column!r}")
        idx = header.index(column)
    elif header is not None and "inter_arrival" in header:
        idx = header.index("inter_arrival")
    elif not rows or len(rows[0]) == 1:
        idx = 0
    else:
        raise ArgumentError(f"{path} has several columns; pick one with --column")
    try:
        return [float(r[idx]) for r in rows]
    except (ValueError, IndexError) as exc:
        raise ArgumentError(f"{path}: non-numeric value ({exc})") from None


def _cmd_run(args):
    config = experiment.parse_config(args.config)
    if args.seed is not None:
        config = config.with_seed(args.seed)
    out = experiment.output_dir(config, args.out)

    def progress(point, rep, record):
        log.info("%s repeat %d: accuracy %.4f after %d rounds", experiment.point_label(point),
                 rep, record["final_accuracy"], record["rounds"])

    try:
        result = experiment.run_scenario(config, progress=progress)
    except experiment.ScenarioInterrupted as exc:
        experiment.emit_results(exc.partial, out)
        raise
    experiment.emit_results(result, out)
    for row in result.summary():
        print(f"{row['point']}: runs={row['runs']} accuracy={row['final_accuracy_mean']:.4f}"
              f"±{row['final_accuracy_std']:.4f} auc={row['final_auc_mean']:.4f}"
              f" rounds={row['rounds_mean']:.1f}")
    if result.comparison is not None:
        row = result.comparison.table_row()
        print(f"MWU U/p: {row['mwu']}   KS D/p: {row['ks']}")
    print(f"results written to {out}")


def _cmd_optimal_interval(args):
    bounds = None
    if args.t_min is not None or args.t_max is not None:
        bounds = (args.t_min if args.t_min is not None else args.T * 1e-4,
                  args.t_max if args.t_max is not None else args.T)
    try:
        config = faults.CostModelConfig(T=args.T, t_r=args.tr, t_w=args.tw, mode=args.mode,
                                        search_bounds=bounds)
        model = faults.WeibullModel(args.lam, args.k)
    except ArgumentError as exc:
        raise ConfigurationError(str(exc), "optimal-interval") from None
    result = faults.optimal_interval(config, model)
    for key, value in result.to_dict().items():
        print(f"{key} = {value}")
    if result.diagnostics == faults.BOUNDARY:
        print(f"warning: {faults.BOUNDARY}; no interior optimum on "
              f"[{config.bounds[0]:g}, {config.bounds[1]:g}]")


def _cmd_estimate_weibull(args):
    times = read_column(args.log, args.column)
    model = faults.estimate_weibull(times, fixed_k=args.fixed_k)
    print(f"lambda = {model.lam}")
    print(f"k = {model.k}")
    print(f"n = {len(times)}")


def _cmd_stats(args):
    a = read_column(args.a, args.column)
    b = read_column(args.b, args.column)
    mwu = metrics.mann_whitney_u(a, b, alternative=args.alternative)
    ks = metrics.ks_two_sample(a, b)
    for res in (mwu, ks):
        kind = "exact" if res.exact else "asymptotic"
        verdict = "reject" if res.reject_at_alpha else "retain"
        print(f"{res.method} ({res.alternative}, {kind}): statistic = {res.statistic}, "
              f"p = {res.p_value:.6g} -> {verdict} H0 at alpha = {metrics.ALPHA}")


def build_parser():
    p = _Parser(prog="fedsim", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="run an experiment scenario from a JSON config")
    run.add_argument("--config", required=True)
    run.add_argument("--out", help=f"results directory (overrides ${experiment.OUT_ENV})")
    run.add_argument("--seed", type=int, help="override the master seed")
    run.set_defaults(func=_cmd_run)

    oi = sub.add_parser("optimal-interval", help="checkpoint interval minimizing the cost model")
    oi.add_argument("--lambda", dest="lam", type=float, required=True, help="Weibull scale")
    oi.add_argument("--k", type=float, required=True, help="Weibull shape")
    oi.add_argument("--T", type=float, required=True, help="total training time")
    oi.add_argument("--tr", type=float, required=True, help="recovery cost")
    oi.add_argument("--tw", type=float, help="checkpoint write cost (amortized mode)")
    oi.add_argument("--mode", choices=("amortized", "literal"), default="amortized")
    oi.add_argument("--t-min", type=float)
    oi.add_argument("--t-max", type=float)
    oi.set_defaults(func=_cmd_optimal_interval)

    ew = sub.add_parser("estimate-weibull", help="maximum-likelihood Weibull fit")
    ew.add_argument("--log", required=True, help="CSV of failure inter-arrival times")
    ew.add_argument("--column")
    ew.add_argument("--fixed-k", type=float)
    ew.set_defaults(func=_cmd_estimate_weibull)

    st = sub.add_parser("stats", help="Mann-Whitney U and Kolmogorov-Smirnov tests")
    st.add_argument("--a", required=True, help="CSV with sample A")
    st.add_argument("--b", required=True, help="CSV with sample B")
    st.add_argument("--column")
    st.add_argument("--alternative", choices=("greater", "two_sided"), default="greater")
    st.set_defaults(func=_cmd_stats)
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except ConfigurationError as exc:
        print(f"fedsim: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SystemExit as exc:  # --help
        return exc.code if isinstance(exc.code, int) else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except ConfigurationError as exc:
        print(f"fedsim: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FedsimError, OSError, ValueError, ArithmeticError) as exc:
        print(f"fedsim: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
