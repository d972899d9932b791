"""Experiment runners behind the sweep and comparison commands.

Every runner is pure given its arguments: model, mask, and optimizer
randomness all derive from the trial seed through named substreams, so a
grid point reproduces bit-identically no matter how the pool schedules
it.  Reports are plain records; the tidy-CSV writer emits one row per
(configuration, seed, metric).
"""

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import baselines, landscape, moment, synth
from .exceptions import DataError

METHODS = ("hajek-gd", "nuclear-gd", "alt-gd", "softimpute-als")


@dataclass
class RunReport:
    """Structured record of one experiment run."""

    config: dict
    metrics: dict
    seed: int
    artifacts: dict = field(default_factory=dict)

    def to_json_dict(self):
        return {
            "config": self.config,
            "metrics": self.metrics,
            "seed": self.seed,
            "artifacts": self.artifacts,
        }


@dataclass(frozen=True)
class TrialSpec:
    """One grid point of a synthetic recovery experiment."""

    kind: str = "gaussian-truncated"
    n: int = 2000
    d: int = 200
    r: int = 10
    scheme: str = "fixed-c-per-row"
    p: float = None
    c: int = None
    noise_sigma: float = 0.0
    mu_target: float = None
    rank: int = None
    iterations: int = 1500
    learning_rate: float = None
    lam: float = None
    alpha: float = None
    tolerance: float = None
    method: str = "hajek-gd"

    def config_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def _build_model(spec, seed):
    if spec.kind == "gaussian-truncated":
        return synth.generate_gaussian_truncated(spec.n, spec.d, spec.r, seed=seed)
    if spec.kind == "common-means":
        return synth.generate_common_means(
            spec.n, spec.d, spec.r, mu_target=spec.mu_target,
            noise_sigma=spec.noise_sigma, seed=seed,
        )
    raise DataError(f"unknown model kind {spec.kind!r}")


def _build_mask(spec, model, seed):
    scheme = synth.SamplingScheme(kind=spec.scheme, p=spec.p, c=spec.c, seed=seed)
    return synth.sample_mask(model, scheme)


def run_trial(spec, seed):
    """Generate, mask, recover, and score one grid point."""
    t0 = time.perf_counter()
    model = _build_model(spec, seed)
    mask = _build_mask(spec, model, seed)
    rank = spec.rank if spec.rank is not None else spec.r
    metrics = {"mu": model.mu, "kappa": model.kappa, "m_observed": mask.m}
    converged = True
    if spec.method == "hajek-gd":
        est = moment.hajek(mask)
        cfg = landscape.practical_loss_config(est, rank)
        if spec.lam is not None or spec.alpha is not None:
            cfg = landscape.LossConfig(
                lam=spec.lam if spec.lam is not None else cfg.lam,
                alpha=spec.alpha if spec.alpha is not None else cfg.alpha,
                q=est.q, rank=rank,
            )
        gd = landscape.GdConfig(iterations=spec.iterations, learning_rate=spec.learning_rate,
                                seed=seed, tolerance=spec.tolerance)
        recovered, x, traj = landscape.descend(est, rank, gd, cfg)
        # the factor product is the guarantee object; the merged return
        # keeps the raw estimate (noise included) on Omega, so report both
        t_est = x @ x.T
        metrics["one_sided_error_merged"] = landscape.recovery_error(recovered, model.T).root
        metrics["final_loss"] = traj[-1][1]
        metrics["grad_norm"] = traj[-1][2]
        bias = moment.bias_on_omega(est, model.T)
        metrics["bias_diag"] = bias.sum_sq_bias_diag
        metrics["bias_offdiag"] = bias.sum_sq_bias_offdiag
    elif spec.method == "nuclear-gd":
        est = moment.hajek(mask)
        cfg = baselines.BaselineConfig(
            method="nuclear-gd", rank=rank,
            lam=spec.lam if spec.lam is not None else 0.01,
            max_iters=spec.iterations, seed=seed,
        )
        t_est = baselines.nuclear_gd(est, cfg)
    elif spec.method == "alt-gd":
        cfg = baselines.BaselineConfig(
            method="alt-gd", rank=rank,
            learning_rate=spec.learning_rate if spec.learning_rate is not None else 0.1,
            max_iters=spec.iterations if spec.iterations else None, seed=seed,
            conv_tol=1e-12,
        )
        x, y = baselines.alternating_gd(mask, cfg)
        t_est = baselines.second_moment_from_factors(x, y)
    elif spec.method == "softimpute-als":
        cfg = baselines.BaselineConfig(
            method="softimpute-als", rank=rank,
            lam=spec.lam if spec.lam is not None else 0.01,
            max_iters=spec.iterations if spec.iterations else None, seed=seed,
        )
        result = baselines.soft_impute_als(mask, cfg)
        t_est = baselines.second_moment_from_matrix(result.matrix)
        converged = result.converged
    else:
        raise DataError(f"unknown method {spec.method!r}; expected one of {METHODS}")
    err = landscape.recovery_error(t_est, model.T)
    metrics["one_sided_error"] = err.root
    metrics["one_sided_error_sq"] = err.squared
    metrics["runtime_seconds"] = time.perf_counter() - t0
    metrics["converged"] = converged
    return RunReport(config=spec.config_dict(), metrics=metrics, seed=seed)


def _trial_star(payload):
    return run_trial(*payload)


def run_grid(specs_and_seeds, threads=1):
    """Run (spec, seed) pairs, optionally in a process pool; order preserved."""
    payloads = list(specs_and_seeds)
    if threads <= 1 or len(payloads) <= 1:
        return [run_trial(spec, seed) for spec, seed in payloads]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(_trial_star, payloads))


def sweep(base, param, values, seeds, threads=1):
    """Vary one parameter of ``base`` over ``values`` x ``seeds`` trials.

    ``param`` is any TrialSpec field, plus the aliases ``sigma2`` (noise
    variance) and ``n_over_d`` (sets n = value * d).
    """
    jobs = []
    for value in values:
        for seed in range(seeds):
            jobs.append((_apply_param(base, param, value), seed))
    reports = run_grid(jobs, threads=threads)
    for report, (spec, _) in zip(reports, jobs):
        report.config["sweep_param"] = param
        report.config["sweep_value"] = _param_value(param, spec)
    return reports


def _apply_param(base, param, value):
    from dataclasses import replace

    if param == "sigma2":
        return replace(base, noise_sigma=float(np.sqrt(value)))
    if param == "n_over_d":
        return replace(base, n=int(value) * base.d)
    if param in ("n", "d", "r", "c", "rank", "iterations"):
        return replace(base, **{param: int(value)})
    if param in ("p", "noise_sigma", "learning_rate", "lam", "alpha"):
        return replace(base, **{param: float(value)})
    raise DataError(f"cannot sweep over {param!r}")


def _param_value(param, spec):
    if param == "sigma2":
        return spec.noise_sigma**2
    if param == "n_over_d":
        return spec.n // spec.d
    return getattr(spec, param)


def bias_comparison(n, d, p_values, r=10, kind="gaussian-truncated", seed=0,
                    scheme="uniform-p"):
    """Bias of the two estimators against the true T across a p grid.

    For each sampling probability, one mask is drawn and the sum of
    squared deviations on Omega is recorded for the self-normalized and
    the inverse-probability estimators; the reduction is reported on the
    averages across the grid.
    """
    spec = TrialSpec(kind=kind, n=n, d=d, r=r)
    model = _build_model(spec, seed)
    rows = []
    for k, p in enumerate(p_values):
        if scheme == "uniform-p":
            sch = synth.SamplingScheme(kind="uniform-p", p=float(p), seed=seed + k)
        else:
            sch = synth.SamplingScheme(kind=scheme, c=int(round(p * d)), seed=seed + k)
        mask = synth.sample_mask(model, sch)
        co = moment.cooccurrence(mask)
        hj = moment.hajek(mask, co, p=float(p))
        ht = moment.horvitz_thompson(mask, co, p=float(p))
        rows.append({
            "p": float(p),
            "hajek_bias": moment.bias_on_omega(hj, model.T).total,
            "ht_bias": moment.bias_on_omega(ht, model.T).total,
        })
    hajek_avg = float(np.mean([r["hajek_bias"] for r in rows]))
    ht_avg = float(np.mean([r["ht_bias"] for r in rows]))
    return {
        "per_p": rows,
        "hajek_avg": hajek_avg,
        "ht_avg": ht_avg,
        "reduction": 1.0 - hajek_avg / ht_avg if ht_avg > 0 else 0.0,
    }


def write_tidy_csv(reports, path):
    """One row per (config, seed, metric); deterministic bytes."""
    lines = ["sweep_param,sweep_value,seed,method,metric,value"]
    for report in reports:
        param = report.config.get("sweep_param", "")
        value = report.config.get("sweep_value", "")
        method = report.config.get("method", "")
        for metric in sorted(report.metrics):
            val = report.metrics[metric]
            val = repr(float(val)) if isinstance(val, (int, float, np.floating)) else str(val)
            lines.append(f"{param},{value},{report.seed},{method},{metric},{val}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
