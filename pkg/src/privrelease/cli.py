"""Command-line entry point: ``privrelease <command> ...``.

Exit codes: 0 success, 2 usage, 3 missing file, 4 malformed config,
5 data error, 6 solver failure. Errors print ``error: <category>: <message>``
on stderr.
"""

from __future__ import annotations

import argparse
import hashlib
import sys
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from .constrained import BoxConstraint, EigenSolverError, constrained_mechanism, solve_ground_state
from .core import RandomStream, ScalingMatrix, read_csv, write_csv
from .correlated import CorrelatedMechanism, build_invariance_operator
from .genml import SensitivityError
from .harness import ConfigError, ExperimentConfig, ExperimentError, metrics_csv, metrics_summary, run_experiment
from .mechanisms import matched_laplace_baseline, optimal_iid_mechanism
from .privacy import certify_gaussian, crb_bounds
from .svm import SvmConfig, SvmConvergenceError, save_model, train_svm

EXIT_USAGE, EXIT_MISSING, EXIT_CONFIG, EXIT_DATA, EXIT_SOLVER = 2, 3, 4, 5, 6


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: usage: {message}\n")
        raise SystemExit(EXIT_USAGE)


def _scaling(text, p):
    return ScalingMatrix.from_string(text) if text else ScalingMatrix.identity(p)


def _dump(doc, path=None):
    text = yaml.safe_dump(doc, sort_keys=False)
    if path:
        Path(path).write_text(text)
    else:
        sys.stdout.write(text)


def _file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def cmd_obfuscate(args):
    try:
        table = read_csv(args.input, args.label, standardize=args.standardize)
    except ValueError:
        if args.mechanism == "correlated":
            raise
        # labels pass through untouched, so real-valued responses are fine here
        table = read_csv(args.input, args.label, standardize=args.standardize, binary=False)
    data = table.dataset
    scaling = _scaling(args.pi, data.p)
    if scaling.p != data.p:
        raise ValueError(f"scaling matrix is {scaling.p}x{scaling.p}, data has {data.p} features")
    stream = RandomStream(args.seed, args.stream_id)
    deltas = args.delta or []
    if args.mechanism in ("gaussian", "laplace"):
        mech = optimal_iid_mechanism(args.lam, scaling)
        cert = certify_gaussian(mech.lam, scaling, deltas)
        if args.mechanism == "laplace":
            mech = matched_laplace_baseline(mech, scaling)
            cert = crb_bounds(mech.fisher_information(), scaling)
            cert.flags += list(mech.flags)
        noise = mech.sample(data.q, stream)
    elif args.mechanism == "constrained":
        if not scaling.is_diagonal:
            raise ValueError("the constrained mechanism needs a diagonal scaling matrix")
        lo, hi = args.box
        box = BoxConstraint(np.full(data.p, lo), np.full(data.p, hi), np.diag(scaling.pi))
        mech = constrained_mechanism(box, args.lam, args.grid_points)
        cert = crb_bounds(mech.fisher_information(), scaling)
        noise = mech.sample(data.q, stream)
    else:
        solution = train_svm(data, SvmConfig(theta=args.theta, rho=args.rho))
        mech = CorrelatedMechanism(build_invariance_operator(solution, data), args.m)
        cert = mech.certificate(scaling)
        noise = mech.sample(stream).reshape(data.q, data.p)
    released = data.features + noise
    if args.standardize:
        released = released * table.scales + table.means
    write_csv(args.output, table, released)
    manifest = {
        "mechanism": mech.describe(),
        "lambda": None if args.mechanism == "correlated" else float(args.lam),
        "scaling_digest": scaling.digest(),
        "seed": args.seed,
        "stream_id": args.stream_id,
        "input_digest": table.digest,
        "output_digest": _file_digest(args.output),
        "certificate": cert.to_dict(),
    }
    if args.standardize:
        manifest["standardization"] = {"means": table.means.tolist(), "scales": table.scales.tolist(),
                                       "note": "noise was added in standardized units"}
    if args.mechanism == "gaussian":
        manifest["mechanism"].pop("covariance")
    _dump(manifest, args.manifest or str(args.output) + ".manifest.yaml")
    return 0


def cmd_train(args):
    table = read_csv(args.input, args.label)
    config = SvmConfig(theta=args.theta, rho=args.rho, tolerance=args.tolerance)
    solution = train_svm(table.dataset, config)
    save_model(args.output, solution, config, feature_names=table.dataset.feature_names,
               label_map=table.label_map or None)
    print(f"kkt_residual: {solution.kkt_residual:.3e}")
    return 0


def cmd_certify(args):
    scaling = _scaling(args.pi, 1)
    cert = certify_gaussian(args.lam, scaling, args.delta)
    doc = {"lambda": args.lam, "p": scaling.p}
    if cert.dp_pairs:
        doc["epsilon_min"] = cert.dp_pairs[0][0]
    doc.update(cert.to_dict())
    _dump(doc, args.output)
    return 0


def cmd_eigen(args):
    sol = solve_ground_state(args.lam, args.theta, args.lower, args.upper, args.grid_points, args.tolerance)
    sol.to_csv(args.output)
    _dump({"mu": sol.mu, "ode_residual": sol.ode_residual, "normalization_error": sol.normalization_error,
           "grid_points": int(sol.grid.size)})
    return 0


def cmd_experiment(args):
    if args.config == "bundled:blobs":
        with resources.as_file(resources.files("privrelease") / "data" / "blobs.yaml") as path:
            config = ExperimentConfig.from_yaml(path)
    else:
        if not Path(args.config).exists():
            raise FileNotFoundError(args.config)
        config = ExperimentConfig.from_yaml(args.config)
    if args.trials is not None:
        config.trials = args.trials
    records = run_experiment(config, workers=args.workers)
    Path(args.output).write_text(metrics_csv(records))
    if args.summary:
        Path(args.summary).write_text(metrics_summary(config, records))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="privrelease", description="Private release of tabular data with certified privacy floors.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("obfuscate", help="add noise to a CSV and write a manifest")
    p.add_argument("--input", required=True)
    p.add_argument("--label", required=True, help="label column name or index")
    p.add_argument("--output", required=True)
    p.add_argument("--manifest")
    p.add_argument("--mechanism", choices=["gaussian", "laplace", "constrained", "correlated"], default="gaussian")
    p.add_argument("--lambda", dest="lam", type=float, default=1.0)
    p.add_argument("--pi", default="", help="identity:P, diag:a,b,... or a matrix file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--stream-id", type=int, default=0)
    p.add_argument("--delta", type=float, action="append")
    p.add_argument("--box", type=float, nargs=2, metavar=("LOWER", "UPPER"), default=(-5.0, 5.0))
    p.add_argument("--grid-points", type=int, default=1025)
    p.add_argument("--m", type=float, default=1.0)
    p.add_argument("--theta", type=float, default=1.0)
    p.add_argument("--rho", type=float, default=1e-2)
    p.add_argument("--standardize", action="store_true")
    p.set_defaults(func=cmd_obfuscate)

    p = sub.add_parser("train", help="train the soft-margin SVM and write a model file")
    p.add_argument("--input", required=True)
    p.add_argument("--label", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--theta", type=float, default=1.0)
    p.add_argument("--rho", type=float, default=1e-2)
    p.add_argument("--tolerance", type=float, default=1e-8)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("certify", help="privacy floors and (epsilon, delta) for the optimal Gaussian")
    p.add_argument("--lambda", dest="lam", type=float, required=True)
    p.add_argument("--pi", default="identity:1")
    p.add_argument("--delta", type=float, action="append", default=[])
    p.add_argument("--output")
    p.set_defaults(func=cmd_certify)

    p = sub.add_parser("eigen", help="1-D ground state of the box-constrained problem, as CSV")
    p.add_argument("--lambda", dest="lam", type=float, required=True)
    p.add_argument("--theta", type=float, default=1.0)
    p.add_argument("--lower", type=float, required=True)
    p.add_argument("--upper", type=float, required=True)
    p.add_argument("--grid-points", type=int, default=1025)
    p.add_argument("--tolerance", type=float)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_eigen)

    p = sub.add_parser("experiment", help="run a configured experiment and write metrics")
    p.add_argument("--config", required=True, help="YAML file, or bundled:blobs")
    p.add_argument("--output", required=True)
    p.add_argument("--summary")
    p.add_argument("--workers", type=int)
    p.add_argument("--trials", type=int)
    p.set_defaults(func=cmd_experiment)
    return parser


_CATEGORIES = (
    (FileNotFoundError, EXIT_MISSING, "missing-file"),
    (ConfigError, EXIT_CONFIG, "config"),
    (yaml.YAMLError, EXIT_CONFIG, "config"),
    ((SvmConvergenceError, EigenSolverError, ExperimentError, SensitivityError), EXIT_SOLVER, "solver"),
    ((ValueError, KeyError), EXIT_DATA, "data"),
)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:
        for types, code, category in _CATEGORIES:
            if isinstance(exc, types):
                msg = exc.filename if isinstance(exc, FileNotFoundError) and exc.filename else exc
                sys.stderr.write(f"error: {category}: {msg}\n")
                return code
        raise


if __name__ == "__main__":
    sys.exit(main())
