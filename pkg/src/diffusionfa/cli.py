"""Command-line front door.

Subcommands: ``simulate`` (integrate a configured system to a path file),
``rcov`` (realised covariance of a path file), ``fit`` / ``test`` /
``select`` (estimation and factor-count inference on a path or realised
covariance), and ``experiment`` (Monte Carlo study from a config file).

Exit codes are stable: 0 success, 2 configuration error, 3 the fit did not
converge, 4 the requested factor count is untestable.  Every run writes a
manifest JSON recording the resolved configuration and seed next to its
output; all randomness flows from ``--seed`` or the config seed.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace

import numpy as np

from . import __version__
from .config import (
    ConfigError,
    apply_overrides,
    bundled_config_path,
    load_json,
    model_from_json,
    sim_config_from_json,
    sim_config_to_json,
)
from .estimator import RealisedCov, fit, realised_cov
from .hypothesis_test import UntestableError, select_k, test_k
from .model import pack
from .montecarlo import experiment_from_json, run, write_outputs
from .sde import (
    path_from_binary,
    path_from_csv,
    path_to_binary,
    path_to_csv,
    simulate,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NONCONVERGED = 3
EXIT_UNTESTABLE = 4


def _write_manifest(out_path, payload):
    payload = dict(payload)
    payload["version"] = __version__
    manifest_path = str(out_path) + ".manifest.json"
    with open(manifest_path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest_path


def _load_config(args):
    path = args.config
    try:
        doc = load_json(path)
    except ConfigError:
        # allow bundled config names as a convenience
        doc = load_json(bundled_config_path(path))
    return apply_overrides(doc, args.override or [])


def _read_data(path):
    """Path CSV/binary or realised-covariance JSON -> RealisedCov."""
    if path.endswith(".json"):
        doc = load_json(path)
        for field in ("q", "n", "h"):
            if field not in doc:
                raise ConfigError(f"missing field {field!r} in {path}")
        return RealisedCov(q=np.asarray(doc["q"], dtype=float),
                           n=int(doc["n"]), h=float(doc["h"]))
    if path.endswith(".bin"):
        with open(path, "rb") as fh:
            return realised_cov(path_from_binary(fh))
    with open(path, "r", encoding="utf-8") as fh:
        return realised_cov(path_from_csv(fh))


def _load_spec(args, rcov):
    doc = apply_overrides(load_json(args.spec), args.override or [])
    spec, params = model_from_json(doc)
    if spec.p != rcov.p:
        raise ConfigError(
            f"data has p={rcov.p} coordinates but spec declares p={spec.p}")
    if spec.n != rcov.n:
        spec = replace(spec, n=rcov.n, h=rcov.h)
    return spec, params


def cmd_simulate(args):
    doc = _load_config(args)
    if args.seed is not None:
        doc["seed"] = args.seed
    config = sim_config_from_json(doc, path="")
    path = simulate(config, keep_latent=args.keep_latent)
    if args.format == "bin":
        with open(args.out, "wb") as fh:
            path_to_binary(path, fh)
    else:
        with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
            path_to_csv(path, fh)
    manifest = _write_manifest(args.out, {
        "subcommand": "simulate",
        "config": sim_config_to_json(config),
        "seed": config.seed,
        "outputs": [args.out],
    })
    print(f"simulated {path.n + 1} observations of a {path.p}-dimensional path "
          f"on [0, {path.times[-1]:g}] with h={path.h:g}")
    print(f"wrote {args.out} and {manifest}")
    return EXIT_OK


def cmd_rcov(args):
    rcov = _read_data(args.data)
    doc = {"q": rcov.q.tolist(), "n": rcov.n, "h": rcov.h}
    with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")
    _write_manifest(args.out, {"subcommand": "rcov", "data": args.data,
                               "outputs": [args.out]})
    print(f"realised covariance from n={rcov.n} increments (T={rcov.T:g}):")
    print(np.array_str(rcov.q, precision=4))
    return EXIT_OK


def _fit_report(result):
    lines = [
        f"converged: {result.converged} ({result.message}; "
        f"{result.iterations} iterations, |pg|={result.gradient_norm:.2e})",
        f"contrast: {result.contrast:.6e}   n*contrast: {result.n * result.contrast:.4f}",
        f"{'coord':>6} {'estimate':>12} {'se':>10}",
    ]
    theta = pack(result.theta_hat)
    for j, (est, se) in enumerate(zip(theta, result.se), start=1):
        lines.append(f"{j:>6} {est:>12.4f} {se:>10.4f}")
    if result.sigma_ff_min_eig < 0 or result.min_unique_variance <= 0:
        lines.append(
            f"boundary diagnostic: min eig(sigma_ff)={result.sigma_ff_min_eig:.3e}, "
            f"min unique variance={result.min_unique_variance:.3e}")
    return "\n".join(lines)


def _fit_json(result):
    return {
        "theta": [float(v) for v in pack(result.theta_hat)],
        "se": [float(v) for v in result.se],
        "contrast": result.contrast,
        "converged": result.converged,
        "iterations": result.iterations,
        "gradient_norm": result.gradient_norm,
        "sigma_ff_min_eig": result.sigma_ff_min_eig,
        "min_unique_variance": result.min_unique_variance,
    }


def _write_report(out_path, doc, fmt, csv_rows):
    with open(out_path, "w", encoding="utf-8", newline="\n") as fh:
        if fmt == "csv":
            for row in csv_rows:
                fh.write(",".join(str(v) for v in row) + "\n")
        else:
            json.dump(doc, fh, indent=2)
            fh.write("\n")


def cmd_fit(args):
    rcov = _read_data(args.data)
    spec, init = _load_spec(args, rcov)
    result = fit(rcov, spec, init=init)
    doc = _fit_json(result)
    rows = [("coord", "estimate", "se")] + [
        (j + 1, est, se)
        for j, (est, se) in enumerate(zip(doc["theta"], doc["se"]))
    ]
    _write_report(args.out, doc, args.format, rows)
    manifest = _write_manifest(args.out, {"subcommand": "fit", "data": args.data,
                               "spec": {"p": spec.p, "k": spec.k, "n": spec.n,
                                        "h": spec.h, "regime": spec.regime},
                               "outputs": [args.out]})
    print(_fit_report(result))
    print(f"wrote {args.out}" + (f" and {manifest}" if args.verbose else ""))
    return EXIT_OK if result.converged else EXIT_NONCONVERGED


def _test_json(tr):
    return {
        "k": tr.k_star,
        "statistic": tr.statistic,
        "df": tr.df,
        "alpha": tr.alpha,
        "critical": tr.critical,
        "p_value": tr.p_value,
        "reject": tr.reject,
        "fit": _fit_json(tr.fit),
    }


def cmd_test(args):
    rcov = _read_data(args.data)
    spec, init = _load_spec(args, rcov)
    tr = test_k(rcov, spec, args.k, alpha=args.alpha,
                init=init if args.k == spec.k else None,
                df_override=args.df)
    rows = [("k", "statistic", "df", "critical", "p_value", "reject"),
            (tr.k_star, tr.statistic, tr.df, tr.critical, tr.p_value, tr.reject)]
    _write_report(args.out, _test_json(tr), args.format, rows)
    manifest = _write_manifest(args.out, {"subcommand": "test", "data": args.data,
                               "k": args.k, "alpha": args.alpha,
                               "outputs": [args.out]})
    if args.verbose:
        print(f"wrote {args.out} and {manifest}")
    decision = "reject" if tr.reject else "accept"
    print(f"H0: k={tr.k_star}  T={tr.statistic:.4f}  df={tr.df}  "
          f"critical={tr.critical:.4f}  p={tr.p_value:.4g}  -> {decision}")
    return EXIT_OK if tr.fit.converged else EXIT_NONCONVERGED


def cmd_select(args):
    rcov = _read_data(args.data)
    spec, _ = _load_spec(args, rcov)
    sel = select_k(rcov, spec, alpha=args.alpha)
    doc = {
        "chosen_k": sel.chosen_k,
        "trail": [_test_json(tr) for tr in sel.trail],
    }
    rows = [("k", "statistic", "df", "critical", "decision")] + [
        (t.k_star, t.statistic, t.df, t.critical,
         "reject" if t.reject else "accept")
        for t in sel.trail
    ]
    _write_report(args.out, doc, args.format, rows)
    manifest = _write_manifest(args.out, {"subcommand": "select", "data": args.data,
                               "alpha": args.alpha, "outputs": [args.out]})
    if args.verbose:
        print(f"wrote {args.out} and {manifest}")
    print(f"{'k':>3} {'statistic':>14} {'df':>4} {'critical':>10} decision")
    for tr in sel.trail:
        print(f"{tr.k_star:>3} {tr.statistic:>14.4f} {tr.df:>4} "
              f"{tr.critical:>10.4f} {'reject' if tr.reject else 'accept'}")
    if sel.chosen_k is None:
        print("no factor structure: every testable count was rejected")
    else:
        print(f"selected k = {sel.chosen_k}")
    return EXIT_OK


def cmd_experiment(args):
    doc = _load_config(args)
    if args.seed is not None:
        doc["seed_base"] = args.seed
    exp = experiment_from_json(doc)
    agg = run(exp, n_jobs=args.threads)
    written = write_outputs(agg, args.out, exp)
    print(f"ran {agg.replications} replications "
          f"(n={agg.spec.n}, h={agg.spec.h:g}, k_grid={list(exp.k_grid)})")
    for (k, alpha), count in sorted(agg.rejections.items()):
        print(f"  H0 k={k}: {count}/{agg.included[k]} rejections at alpha={alpha}"
              + (f" ({agg.exclusions[k]} excluded)" if agg.exclusions[k] else ""))
    print("wrote:")
    for path in written:
        print(f"  {path}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="diffusionfa",
        description=("Latent-factor models for diffusions observed at high "
                     "frequency: simulate, estimate, test."),
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def common(p, config=False, data=False, spec=False, out=True):
        if config:
            p.add_argument("--config", required=True,
                           help="JSON config file (or bundled config name)")
        if data:
            p.add_argument("--data", required=True,
                           help="path CSV/binary or realised-covariance JSON")
        if spec:
            p.add_argument("--spec", required=True,
                           help="model JSON (p, k, regime, n, h; optional parameters)")
        if out:
            p.add_argument("--out", required=True, help="output file or directory")
        p.add_argument("--override", action="append", metavar="KEY=VALUE",
                       help="override a config field (repeatable, dotted paths)")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed / seed_base")
        p.add_argument("--threads", type=int, default=1,
                       help="worker processes for replication studies")
        p.add_argument("-v", "--verbose", action="count", default=0)

    p = sub.add_parser("simulate", help="integrate a configured system")
    common(p, config=True)
    p.add_argument("--format", choices=("csv", "bin"), default="csv")
    p.add_argument("--keep-latent", action="store_true",
                   help="retain the latent factor/unique paths in the output")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("rcov", help="realised covariance of a path file")
    common(p, data=True)
    p.set_defaults(func=cmd_rcov)

    p = sub.add_parser("fit", help="minimum-contrast fit")
    common(p, data=True, spec=True)
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("test", help="goodness-of-fit test for a factor count")
    common(p, data=True, spec=True)
    p.add_argument("--k", type=int, required=True, help="hypothesised factor count")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--df", type=int, default=None,
                   help="override the chi-squared degrees of freedom")
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.set_defaults(func=cmd_test)

    p = sub.add_parser("select", help="sequential factor-count selection")
    common(p, data=True, spec=True)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("experiment", help="Monte Carlo replication study")
    common(p, config=True)
    p.set_defaults(func=cmd_experiment)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UntestableError as exc:
        print(f"untestable k: {exc}", file=sys.stderr)
        return EXIT_UNTESTABLE
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
