"""Command-line front end.

Subcommands: generate | estimate | complete | impute | evaluate | sweep |
sensitivity.  Each accepts the shared flags --seed, --threads, --out-dir,
and --config (a TOML or JSON file of flag defaults; explicit flags win
over the file, the file wins over built-in defaults).  The environment
variable ONESIDED_MC_THREADS supplies the --threads default.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical failure.
Every subcommand is deterministic given its flags and seed, so reruns
reproduce byte-identical outputs.
"""

import argparse
import json
import os
import sys

import numpy as np

from . import baselines, experiments, impute, landscape, moment, privacy, sparse_io, synth
from .exceptions import DataError, NumericalError


_SCHEME_ALIASES = {"fixed-c": "fixed-c-per-row", "uniform": "uniform-p"}
_SCHEME_CHOICES = list(synth.SCHEME_KINDS) + list(_SCHEME_ALIASES)


def _scheme_kind(name):
    return _SCHEME_ALIASES.get(name, name)


def _threads_default():
    env = os.environ.get("ONESIDED_MC_THREADS")
    try:
        return max(1, int(env)) if env else 1
    except ValueError:
        return 1


def _add_common(parser):
    parser.add_argument("--seed", type=int, default=0, help="master seed")
    parser.add_argument("--threads", type=int, default=None,
                        help="worker processes for sweeps (default: "
                             "ONESIDED_MC_THREADS or 1)")
    parser.add_argument("--out-dir", default=".", help="directory for outputs")
    parser.add_argument("--config", default=None,
                        help="TOML or JSON file of flag defaults")


def _load_config(path):
    if path is None:
        return {}
    with open(path, "rb") as fh:
        if path.endswith(".json"):
            return json.load(fh)
        try:
            import tomllib
        except ModuleNotFoundError:
            import tomli as tomllib
        return tomllib.load(fh)


def _write_json(payload, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _echo(payload):
    print(json.dumps(payload, indent=2, sort_keys=True))


def _out(args, name):
    os.makedirs(args.out_dir, exist_ok=True)
    return os.path.join(args.out_dir, name)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_generate(args):
    if args.kind == "common-means":
        model = synth.generate_common_means(
            args.n, args.d, args.r, mu_target=args.mu_target,
            noise_sigma=args.noise_sigma, seed=args.seed,
        )
    else:
        model = synth.generate_gaussian_truncated(args.n, args.d, args.r, seed=args.seed)
    scheme = synth.SamplingScheme(kind=_scheme_kind(args.scheme), p=args.p, c=args.c, seed=args.seed)
    mask = synth.sample_mask(model, scheme)
    paths = synth.save_model(model, args.out_dir, prefix=args.prefix)
    paths["mask"] = _out(args, f"{args.prefix}_mask.coo")
    paths["truth_t"] = _out(args, f"{args.prefix}_t.npy")
    sparse_io.save_triplets(mask, paths["mask"])
    np.save(paths["truth_t"], model.T)
    _echo({
        "paths": paths,
        "n": model.n, "d": model.d, "r": model.r,
        "m_observed": mask.m,
        "sparsity": mask.m / (model.n * model.d),
        "mu": model.mu, "kappa": model.kappa,
        "seed": args.seed,
    })
    return 0


def cmd_estimate(args):
    mask = sparse_io.load_triplets(args.input)
    co = moment.cooccurrence(mask)
    p = args.p if args.p is not None else moment.estimate_p(mask)
    summary = {"input": args.input, "p": p, "m": mask.m}
    truth = np.load(args.truth) if args.truth else None

    def _one(kind):
        if kind == "hajek":
            est = moment.hajek(mask, co, p=p)
        else:
            est = moment.horvitz_thompson(mask, co, p=p)
        path = _out(args, f"t_hat_{kind}.coo")
        moment.save_estimate(est, path)
        info = {"path": path, "q": est.q}
        if truth is not None:
            report = moment.bias_on_omega(est, truth)
            info["bias"] = report.to_json_dict()
            _write_json(report.to_json_dict(), _out(args, f"bias_{kind}.json"))
        return est, info

    if args.compare:
        _, summary["hajek"] = _one("hajek")
        _, summary["ht"] = _one("ht")
        if truth is not None:
            hj = summary["hajek"]["bias"]["sum_sq_bias_diag"] + summary["hajek"]["bias"]["sum_sq_bias_offdiag"]
            ht = summary["ht"]["bias"]["sum_sq_bias_diag"] + summary["ht"]["bias"]["sum_sq_bias_offdiag"]
            summary["reduction"] = 1.0 - hj / ht if ht > 0 else 0.0
    else:
        _, summary[args.estimator] = _one(args.estimator)
    _echo(summary)
    return 0


def _loss_config(args, est, rank):
    alpha, lam = landscape.practical_hyperparameters(args.profile)
    if args.lam is not None:
        lam = args.lam
    if args.alpha is not None:
        alpha = args.alpha
    q = args.q if args.q is not None else est.q
    return landscape.LossConfig(lam=lam, alpha=alpha, q=q, rank=rank)


def cmd_complete(args):
    mask = sparse_io.load_triplets(args.input)
    est = moment.hajek(mask)
    cfg = _loss_config(args, est, args.rank)
    gd = landscape.GdConfig(iterations=args.iterations, learning_rate=args.learning_rate,
                            seed=args.seed, tolerance=args.tolerance,
                            record_every=args.record_every)
    recovered, _, traj = landscape.descend(est, args.rank, gd, cfg)
    rec_path = _out(args, f"recovered_t.{args.format}")
    landscape.save_recovered(recovered, rec_path, format=args.format)
    traj_path = _out(args, "trajectory.csv")
    with open(traj_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("iteration,loss,grad_norm\n")
        for it, lo, gn in traj:
            fh.write(f"{it},{lo!r},{gn!r}\n")
    report = {
        "recovered": rec_path,
        "trajectory": traj_path,
        "final_loss": traj[-1][1],
        "grad_norm": traj[-1][2],
        "q": cfg.q, "lam": cfg.lam, "alpha": cfg.alpha,
        "learning_rate": args.learning_rate, "iterations": args.iterations, "seed": args.seed,
    }
    if args.truth:
        err = landscape.recovery_error(recovered, np.load(args.truth))
        report["one_sided_error"] = err.root
        report["one_sided_error_sq"] = err.squared
    _write_json(report, _out(args, "complete_report.json"))
    _echo(report)
    return 0


def cmd_impute(args):
    mask = sparse_io.load_triplets(args.input)
    holdout = sparse_io.load_triplets(args.holdout) if args.holdout else None
    gd = landscape.GdConfig(iterations=args.iterations, learning_rate=args.learning_rate,
                            seed=args.seed)
    result = impute.impute_pipeline(
        mask, args.rank, gd, ridge=args.ridge, dp_sigma=args.dp_sigma, holdout=holdout,
    )
    report = {
        "rank": args.rank, "ridge": args.ridge,
        "dp_sigma": args.dp_sigma, "seed": args.seed,
        "negative_eigenvalues": result.subspace.has_negative,
        "empty_rows": int(result.imputed.empty_rows.size),
    }
    if result.rmse is not None:
        report["rmse"] = result.rmse
        cells = _out(args, "imputed_cells.coo")
        recon = result.imputed.reconstruction
        with open(cells, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(f"# n={mask.n_rows} d={mask.n_cols}\n")
            for r, c in zip(holdout.rows, holdout.cols):
                fh.write(f"{int(r)} {int(c)} {float(recon[int(r), int(c)])!r}\n")
        report["imputed_cells"] = cells
    if args.write_full:
        full = _out(args, "imputed_full.npy")
        np.save(full, result.imputed.reconstruction)
        report["imputed_full"] = full
    _write_json(report, _out(args, "impute_report.json"))
    _echo(report)
    return 0


def cmd_evaluate(args):
    truth = np.load(args.truth)
    report = {"truth": args.truth}
    if args.estimate:
        est = moment.load_estimate(args.estimate)
        report["bias"] = moment.bias_on_omega(est, truth).to_json_dict()
    if args.recovered:
        values = landscape.load_recovered_values(args.recovered)
        err = landscape.recovery_error(values, truth)
        report["one_sided_error"] = err.root
        report["one_sided_error_sq"] = err.squared
    if args.holdout and args.imputed:
        hold = sparse_io.load_triplets(args.holdout)
        imp = sparse_io.load_triplets(args.imputed)
        key_h = hold.rows * np.uint64(hold.n_cols) + hold.cols
        key_i = imp.rows * np.uint64(imp.n_cols) + imp.cols
        order_h, order_i = np.argsort(key_h), np.argsort(key_i)
        if not np.array_equal(key_h[order_h], key_i[order_i]):
            raise DataError("holdout and imputed files cover different cells")
        diff = hold.values[order_h] - imp.values[order_i]
        report["rmse"] = float(np.sqrt(np.mean(diff**2)))
    _write_json(report, _out(args, "evaluate_report.json"))
    _echo(report)
    return 0


def cmd_sweep(args):
    base = experiments.TrialSpec(
        kind=args.kind, n=args.n, d=args.d, r=args.r, scheme=_scheme_kind(args.scheme),
        p=args.p, c=args.c, noise_sigma=args.noise_sigma, rank=args.rank,
        iterations=args.iterations, learning_rate=args.learning_rate,
        lam=args.lam, alpha=args.alpha,
    )
    values = [float(v) for v in args.values.split(",") if v]
    reports = []
    for method in args.methods.split(","):
        from dataclasses import replace

        reports.extend(experiments.sweep(
            replace(base, method=method.strip()), args.param, values,
            seeds=args.seeds, threads=args.threads,
        ))
    csv_path = _out(args, "sweep.csv")
    experiments.write_tidy_csv(reports, csv_path)
    _write_json([r.to_json_dict() for r in reports], _out(args, "sweep.json"))
    _echo({
        "csv": csv_path,
        "runs": len(reports),
        "param": args.param,
        "values": values,
        "methods": args.methods,
    })
    return 0


def cmd_sensitivity(args):
    mask = sparse_io.load_triplets(args.input)
    gd = landscape.GdConfig(iterations=args.iterations, learning_rate=args.learning_rate,
                            seed=args.seed)
    report = privacy.estimate_sensitivity(mask, args.rank, gd, trials=args.trials,
                                          seed=args.seed)
    payload = report.to_json_dict()
    if args.epsilon is not None and args.delta is not None:
        payload["epsilon"] = args.epsilon
        payload["delta"] = args.delta
        payload["sigma"] = privacy.calibrate_sigma(report.max_gap, args.epsilon, args.delta)
    _write_json(payload, _out(args, "sensitivity_report.json"))
    _echo(payload)
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _build_parser():
    parser = argparse.ArgumentParser(prog="onesided-mc", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    registry = {}

    def subparser(name, func, help_text):
        sp = sub.add_parser(name, help=help_text)
        _add_common(sp)
        sp.set_defaults(func=func)
        registry[name] = sp
        return sp

    sp = subparser("generate", cmd_generate, "synthesize a model and an observation mask")
    sp.add_argument("--kind", choices=["common-means", "gaussian-truncated"],
                    default="gaussian-truncated")
    sp.add_argument("--n", type=int, required=True)
    sp.add_argument("--d", type=int, required=True)
    sp.add_argument("--r", type=int, required=True)
    sp.add_argument("--scheme", choices=_SCHEME_CHOICES, default="fixed-c-per-row")
    sp.add_argument("--p", type=float, default=None)
    sp.add_argument("--c", type=int, default=None)
    sp.add_argument("--noise-sigma", type=float, default=0.0)
    sp.add_argument("--mu-target", type=float, default=None)
    sp.add_argument("--prefix", default="model")

    sp = subparser("estimate", cmd_estimate, "second-moment estimate on the observed set")
    sp.add_argument("--input", required=True)
    sp.add_argument("--estimator", choices=["hajek", "ht"], default="hajek")
    sp.add_argument("--p", type=float, default=None)
    sp.add_argument("--truth", default=None)
    sp.add_argument("--compare", action="store_true")

    sp = subparser("complete", cmd_complete, "recover T by gradient descent")
    sp.add_argument("--input", required=True)
    sp.add_argument("--rank", type=int, required=True)
    sp.add_argument("--iterations", type=int, default=1500)
    sp.add_argument("--learning-rate", type=float, default=None,
                    help="fixed step size (default scales with the pair density; "
                         "the reference synthetic sweeps used 1e4 on a mean-"
                         "normalized objective)")
    sp.add_argument("--lambda", dest="lam", type=float, default=None)
    sp.add_argument("--alpha", type=float, default=None)
    sp.add_argument("--q", type=float, default=None)
    sp.add_argument("--tolerance", type=float, default=None)
    sp.add_argument("--record-every", type=int, default=10)
    sp.add_argument("--profile", choices=["synthetic", "review"], default="synthetic")
    sp.add_argument("--truth", default=None)
    sp.add_argument("--format", choices=["bin", "coo"], default="bin")

    sp = subparser("impute", cmd_impute, "impute rows via the recovered subspace")
    sp.add_argument("--input", required=True)
    sp.add_argument("--rank", type=int, required=True)
    sp.add_argument("--iterations", type=int, default=1500)
    sp.add_argument("--learning-rate", type=float, default=None)
    sp.add_argument("--ridge", type=float, default=1e-8)
    sp.add_argument("--dp-sigma", type=float, default=None)
    sp.add_argument("--holdout", default=None)
    sp.add_argument("--write-full", action="store_true")

    sp = subparser("evaluate", cmd_evaluate, "score estimates against ground truth")
    sp.add_argument("--truth", required=True)
    sp.add_argument("--estimate", default=None)
    sp.add_argument("--recovered", default=None)
    sp.add_argument("--holdout", default=None)
    sp.add_argument("--imputed", default=None)

    sp = subparser("sweep", cmd_sweep, "grid experiments with tidy CSV output")
    sp.add_argument("--param", required=True)
    sp.add_argument("--values", required=True, help="comma-separated values")
    sp.add_argument("--seeds", type=int, default=5)
    sp.add_argument("--methods", default="hajek-gd")
    sp.add_argument("--kind", choices=["common-means", "gaussian-truncated"],
                    default="gaussian-truncated")
    sp.add_argument("--n", type=int, default=2000)
    sp.add_argument("--d", type=int, default=200)
    sp.add_argument("--r", type=int, default=10)
    sp.add_argument("--scheme", choices=_SCHEME_CHOICES, default="fixed-c-per-row")
    sp.add_argument("--p", type=float, default=None)
    sp.add_argument("--c", type=int, default=2)
    sp.add_argument("--noise-sigma", type=float, default=0.0)
    sp.add_argument("--rank", type=int, default=None)
    sp.add_argument("--iterations", type=int, default=1500)
    sp.add_argument("--learning-rate", type=float, default=None)
    sp.add_argument("--lambda", dest="lam", type=float, default=None)
    sp.add_argument("--alpha", type=float, default=None)

    sp = subparser("sensitivity", cmd_sensitivity, "empirical l2-sensitivity of the recovery")
    sp.add_argument("--input", required=True)
    sp.add_argument("--rank", type=int, required=True)
    sp.add_argument("--trials", type=int, default=10)
    sp.add_argument("--iterations", type=int, default=500)
    sp.add_argument("--learning-rate", type=float, default=None)
    sp.add_argument("--epsilon", type=float, default=None)
    sp.add_argument("--delta", type=float, default=None)

    return parser, registry


def _parse(argv):
    parser, registry = _build_parser()
    probe, _ = parser.parse_known_args(argv)
    config = _load_config(getattr(probe, "config", None))
    if config:
        command = probe.command
        spec = registry[command]
        dests = {a.dest for a in spec._actions}
        overrides = {k.replace("-", "_"): v for k, v in config.items()}
        spec.set_defaults(**{k: v for k, v in overrides.items() if k in dests})
    args = parser.parse_args(argv)
    if args.threads is None:
        args.threads = _threads_default()
    return args


def main(argv=None):
    try:
        args = _parse(sys.argv[1:] if argv is None else argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0
    try:
        return args.func(args)
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 4
    except OSError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
