"""Command-line front end.

Every stage reads the files written by the previous one and writes its own
outputs plus ``manifest.<stage>.json`` into ``--out``. Options can also come
from a YAML mapping passed with ``--config``; keys are option names (dashes or
underscores) and values given on the command line win.

Exit codes: 0 success, 2 configuration error, 3 numerical failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import itertools
import logging
import os
import sys
from pathlib import Path

import numpy as np
import yaml

from . import evalmetrics, io, pipeline, posterior, simcore, tce
from .errors import ConfigError, DataIOError, IBCDError
from .model import PosteriorDensity
from .sampler import NutsConfig, diagnostics, run_nuts

log = logging.getLogger("ibcd")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_IO = 0, 2, 3, 4


# ---------------------------------------------------------------- helpers

def _out_dir(args) -> Path:
    d = Path(args.out)
    if not d.is_dir():
        raise DataIOError(f"output directory does not exist: {d}")
    return d


def _verify_inputs(args, *dirs):
    if not getattr(args, "verify", False):
        return
    for d in dirs:
        for m in sorted(Path(d).glob("manifest.*.json")):
            bad = io.verify_manifest(m)
            if bad:
                raise DataIOError(f"{m}: hash mismatch for {', '.join(bad)}")
            log.info("verified %s", m)


def _config_of(args) -> dict:
    skip = {"func", "config", "verify"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def _nuts_config(args) -> NutsConfig:
    return NutsConfig(
        target_accept=args.target_accept,
        max_tree_depth=args.max_depth,
        n_chains=args.chains,
        n_warmup=args.warmup,
        n_samples=args.samples,
        seed=args.seed,
        n_jobs=args.threads,
        backend=args.backend,
    )


def _truth_arg(args):
    return io.read_truth(args.truth) if args.truth else None


# ---------------------------------------------------------------- stages

def cmd_simulate(args):
    out = _out_dir(args)
    topology = args.topology.upper()
    p = args.p if args.p is not None else simcore.default_p(args.dim, topology)
    graph = simcore.generate_graph(simcore.GraphSpec(args.dim, topology, p, args.v, seed=args.seed))
    data = simcore.simulate_dataset(
        graph, args.n_per, args.n_control, args.beta, seed=args.seed, intervention=args.intervention,
    )
    outputs = io.write_dataset(out, data)
    outputs["truth"] = io.write_truth(out / "truth.tsv", graph)
    io.write_manifest(out, "simulate", _config_of(args), {}, outputs, args.seed)
    log.info("simulated D=%d with %d edges into %s", args.dim, graph.n_edges, out)


def cmd_estimate(args):
    out = _out_dir(args)
    _verify_inputs(args, args.data)
    data, _ = io.read_dataset(args.data)
    method = "ols_hard" if args.hard_interventions else "iv"
    summary = tce.build_summary(data, method=method)
    outputs = io.write_summary(out, summary)
    inputs = {"Y": Path(args.data) / "Y.tsv", "design": Path(args.data) / "design.tsv"}
    io.write_manifest(out, "estimate", _config_of(args), inputs, outputs, None)


def cmd_fit_prior(args):
    out = _out_dir(args)
    _verify_inputs(args, args.summary, args.data)
    summary = io.read_summary(args.summary)
    data, _ = io.read_dataset(args.data)
    truth = _truth_arg(args)
    prior = pipeline.build_prior(
        summary, data.Y[data.control_rows], args.mode, truth=truth,
        topology=args.topology.upper(), triangle=args.triangle,
    )
    outputs = io.write_prior(out, prior)
    inputs = {"r_hat": Path(args.summary) / "r_hat.tsv", "se": Path(args.summary) / "se.tsv",
              "Y": Path(args.data) / "Y.tsv"}
    if args.truth:
        inputs["truth"] = Path(args.truth)
    io.write_manifest(out, "fit-prior", _config_of(args), inputs, outputs, None)


def cmd_sample(args):
    out = _out_dir(args)
    _verify_inputs(args, args.summary, args.prior)
    summary = io.read_summary(args.summary)
    prior = io.read_prior(args.prior)
    density = PosteriorDensity.from_summary(summary, prior)
    draws = run_nuts(density, _nuts_config(args))
    diag = diagnostics(draws)
    outputs = {
        "draws": io.write_draws(out / "draws.bin", draws),
        "diagnostics": io.write_json(out / "diagnostics.json", _diag_record(diag)),
    }
    inputs = {f"summary_{k}": Path(args.summary) / f"{k}.tsv" for k in ("r_hat", "u", "v")}
    inputs["pi0"] = Path(args.prior) / "pi0.tsv"
    io.write_manifest(out, "sample", _config_of(args), inputs, outputs, args.seed)
    if diag["rhat_flag"] or diag["divergence_flag"]:
        log.warning("sampler diagnostics flagged: max R-hat %.3f, divergence rate %.3f",
                    diag["max_rhat"], diag["divergence_rate"])


def _diag_record(diag: dict) -> dict:
    return {k: v for k, v in diag.items() if np.ndim(v) == 0}


def cmd_summarize(args):
    out = _out_dir(args)
    _verify_inputs(args, Path(args.draws).parent)
    vectors, dim, _ = io.read_draws(args.draws)
    graphs = io.graphs_from_vectors(vectors, dim)
    summ = posterior.PosteriorSummary.from_draws(graphs, args.epsilon)
    outputs = {
        "mean_graph": io.write_matrix(out / "mean_graph.tsv", summ.mean_g),
        "pip": io.write_matrix(out / "pip.tsv", summ.pip),
    }
    io.write_manifest(out, "summarize", _config_of(args), {"draws": Path(args.draws)}, outputs, None)


def cmd_evaluate(args):
    weights = io.read_matrix(args.weights)[0]
    truth = io.read_truth(args.truth, weights.shape[0])
    label = [
        args.seed if args.replicate is None else args.replicate,
        args.method,
        weights.shape[0],
        "" if args.n_per is None else args.n_per,
        args.topology.upper() if args.topology else "",
    ]
    metrics = ["threshold", "n_pred", "n_true", "precision", "recall", "f1", "shd"]
    header = ["replicate", "method", "dim", "n_per", "topology"] + metrics
    rows = []
    for t in args.threshold:
        m = evalmetrics.evaluate(weights, truth, t, args.reversal)
        rows.append(label + [m[k] for k in metrics])
    _emit_table(args.out_file, header, rows)


def _emit_table(path, header, rows):
    if path:
        io.write_table(path, header, rows)
        return
    print("\t".join(header))
    for r in rows:
        print("\t".join(io.format_cell(x) for x in r))


def cmd_calibrate(args):
    p = io.read_matrix(args.pip)[0]
    truth = io.read_truth(args.truth, p.shape[0])
    rows = posterior.calibration_curve(p, truth, args.bins)
    header = ["bin", "low", "high", "mean_pip", "precision", "count"]
    table = [[r.bin, r.low, r.high, r.mean_pip, r.precision, r.count] for r in rows]
    _emit_table(args.out_file, header, table)


def pairwise_agreement(pips: list[np.ndarray], floor: float = posterior.LOG_FLOOR):
    """Per-pair log-PIP correlations and the pooled correlation over all pairs."""
    pairs, xs, ys = [], [], []
    for a, b in itertools.combinations(range(len(pips)), 2):
        pairs.append((a, b, posterior.pip_agreement(pips[a], pips[b], floor)))
        off = ~np.eye(pips[a].shape[0], dtype=bool)
        xs.append(np.log(np.maximum(pips[a][off], floor)))
        ys.append(np.log(np.maximum(pips[b][off], floor)))
    pooled = float(np.corrcoef(np.concatenate(xs), np.concatenate(ys))[0, 1])
    return pairs, pooled


def cmd_agreement(args):
    out = _out_dir(args)
    if args.pip:
        pips = [io.read_matrix(p)[0] for p in args.pip]
    else:
        if not args.data:
            raise ConfigError("agreement needs --data or at least two --pip files")
        _verify_inputs(args, args.data)
        data, _ = io.read_dataset(args.data)
        folds = simcore.split_dataset(data, args.folds, seed=args.seed)
        pips = []
        for k, fold in enumerate(folds):
            nuts = _nuts_config(args)
            res = pipeline.fit(fold, args.mode, nuts, topology=args.topology.upper(), epsilon=args.epsilon)
            pips.append(res.pip)
            io.write_matrix(out / f"pip.fold{k}.tsv", res.pip)
            log.info("fold %d fitted", k)
    if len(pips) < 2:
        raise ConfigError("agreement needs at least two PIP matrices")
    pairs, pooled = pairwise_agreement(pips)
    table = io.write_table(out / "agreement.tsv", ["fold_a", "fold_b", "pearson_r"], pairs)
    record = io.write_json(out / "agreement.json", {"pooled_r": pooled, "n_pairs": len(pairs)})
    io.write_manifest(out, "agreement", _config_of(args), {}, {"table": table, "record": record}, args.seed)
    print(f"pooled log-PIP r = {pooled:.4f}")


def cmd_pipeline(args):
    out = _out_dir(args)
    stages = {}
    for name in ("data", "summary", "prior", "draws", "posterior"):
        stages[name] = out / name
        stages[name].mkdir(exist_ok=True)
    ns = argparse.Namespace(**vars(args))

    def run(func, **kw):
        for k, v in kw.items():
            setattr(ns, k, v)
        func(ns)

    if args.data:
        data_dir = Path(args.data)
    else:
        data_dir = stages["data"]
        run(cmd_simulate, out=str(data_dir))
    if ns.truth is None and (data_dir / "truth.tsv").is_file():
        ns.truth = str(data_dir / "truth.tsv")
    run(cmd_estimate, out=str(stages["summary"]), data=str(data_dir))
    run(cmd_fit_prior, out=str(stages["prior"]), summary=str(stages["summary"]))
    run(cmd_sample, out=str(stages["draws"]), prior=str(stages["prior"]))
    run(cmd_summarize, out=str(stages["posterior"]), draws=str(stages["draws"] / "draws.bin"))
    if ns.truth:
        post = stages["posterior"]
        run(cmd_evaluate, weights=str(post / "mean_graph.tsv"), out_file=str(post / "metrics.tsv"))
        run(cmd_calibrate, pip=str(post / "pip.tsv"), out_file=str(post / "calibration.tsv"))
        with open(post / "metrics.tsv") as fh:
            sys.stdout.write(fh.read())


# ---------------------------------------------------------------- parser

def _add_sim_opts(p):
    p.add_argument("--topology", choices=["er", "sf", "ER", "SF"], default="er")
    p.add_argument("--dim", type=int, default=20)
    p.add_argument("--p", type=float, default=None, help="edge parameter (default: mean degree 5)")
    p.add_argument("--v", type=float, default=0.25, help="edge weight scale")
    p.add_argument("--n-per", type=int, default=100, help="samples per intervention")
    p.add_argument("--n-control", type=int, default=None, help="control samples (default 100*dim)")
    p.add_argument("--beta", type=float, default=-2.0, help="intervention shift in control SDs")
    p.add_argument("--intervention", choices=["soft", "hard"], default="soft")


def _add_prior_opts(p):
    p.add_argument("--mode", choices=list(pipeline.PRIOR_MODES), default="er")
    p.add_argument("--truth", default=None, help="truth.tsv, needed by --mode oracle")
    p.add_argument("--triangle", choices=["full", "upper"], default="full")


def _add_nuts_opts(p):
    p.add_argument("--chains", type=int, default=3)
    p.add_argument("--warmup", type=int, default=300)
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--target-accept", type=float, default=0.7)
    p.add_argument("--max-depth", type=int, default=10)
    p.add_argument("--backend", choices=["auto", "python", "compiled"], default="auto")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="YAML file with option defaults")
    common.add_argument("--seed", type=int, default=0, help="master seed")
    common.add_argument("--threads", type=int, default=int(os.environ.get("IBCD_THREADS", "1") or 1),
                        help="worker processes (default $IBCD_THREADS or 1)")
    common.add_argument("--verify", action="store_true", help="check input manifests before running")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="ibcd", description="Interventional Bayesian causal discovery")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="draw a random DAG and interventional data")
    p.add_argument("--out", required=True)
    _add_sim_opts(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("estimate", parents=[common], help="total-effect estimates and covariances")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--hard-interventions", action="store_true", help="OLS over intervened rows")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("fit-prior", parents=[common], help="empirical-Bayes edge prior")
    p.add_argument("--summary", required=True)
    p.add_argument("--data", required=True, help="dataset directory (controls are used for localization)")
    p.add_argument("--out", required=True)
    p.add_argument("--topology", choices=["er", "sf", "ER", "SF"], default="er",
                   help="global fit used by --mode global-uniform")
    _add_prior_opts(p)
    p.set_defaults(func=cmd_fit_prior)

    p = sub.add_parser("sample", parents=[common], help="NUTS over the edge weights")
    p.add_argument("--summary", required=True)
    p.add_argument("--prior", required=True)
    p.add_argument("--out", required=True)
    _add_nuts_opts(p)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("summarize", parents=[common], help="posterior mean graph and PIPs")
    p.add_argument("--draws", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epsilon", type=float, default=posterior.EPSILON)
    p.set_defaults(func=cmd_summarize)

    p = sub.add_parser("evaluate", parents=[common], help="precision, recall, F1 and SHD against a truth")
    p.add_argument("--weights", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--threshold", type=float, nargs="+", default=[evalmetrics.THRESHOLD])
    p.add_argument("--reversal", choices=["one", "two"], default="one")
    p.add_argument("--out-file", default=None, help="TSV path (default stdout)")
    p.add_argument("--replicate", default=None, help="row label (default: the seed)")
    p.add_argument("--method", default="ibcd", help="row label")
    p.add_argument("--topology", default="", help="row label")
    p.add_argument("--n-per", type=int, default=None, help="row label")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("calibrate", parents=[common], help="PIP calibration table")
    p.add_argument("--pip", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--bins", type=int, default=10)
    p.add_argument("--out-file", default=None)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("agreement", parents=[common], help="log-PIP correlation across data folds")
    p.add_argument("--data", default=None)
    p.add_argument("--pip", nargs="*", default=None, help="compare existing PIP files instead of fitting")
    p.add_argument("--out", required=True)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--epsilon", type=float, default=posterior.EPSILON)
    p.add_argument("--topology", choices=["er", "sf", "ER", "SF"], default="er")
    p.add_argument("--mode", choices=[m for m in pipeline.PRIOR_MODES if m != "oracle"], default="er")
    _add_nuts_opts(p)
    p.set_defaults(func=cmd_agreement)

    p = sub.add_parser("pipeline", parents=[common], help="simulate (or read) data and run every stage")
    p.add_argument("--out", required=True)
    p.add_argument("--data", default=None, help="existing dataset directory; simulate if omitted")
    p.add_argument("--hard-interventions", action="store_true")
    p.add_argument("--epsilon", type=float, default=posterior.EPSILON)
    p.add_argument("--threshold", type=float, nargs="+", default=[evalmetrics.THRESHOLD])
    p.add_argument("--reversal", choices=["one", "two"], default="one")
    p.add_argument("--bins", type=int, default=10)
    p.add_argument("--replicate", default=None)
    p.add_argument("--method", default="ibcd")
    _add_sim_opts(p)
    _add_prior_opts(p)
    _add_nuts_opts(p)
    p.set_defaults(func=cmd_pipeline)
    return parser


def _apply_config(parser, argv):
    """Re-parse with YAML values installed as defaults so the command line wins."""
    args = parser.parse_args(argv)
    if not args.config:
        return args
    path = Path(args.config)
    if not path.is_file():
        raise DataIOError(f"config file not found: {path}")
    with open(path) as fh:
        try:
            cfg = yaml.safe_load(fh) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: expected a mapping of option names to values")
    cfg = {str(k).replace("-", "_"): v for k, v in cfg.items()}
    sub = parser._subparsers._group_actions[0].choices[args.command]
    known = {a.dest for a in sub._actions}
    unknown = sorted(set(cfg) - known)
    if unknown:
        raise ConfigError(f"{path}: unknown option(s) for {args.command}: {', '.join(unknown)}")
    sub.set_defaults(**cfg)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataIOError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (IBCDError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
