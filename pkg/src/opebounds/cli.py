"""Command-line entry point: ``opebounds {build,concentrability,evaluate,reduce,sweep}``.

Exit codes: 0 success, 2 configuration error, 3 invariant violation,
4 infeasible computation.
"""
from __future__ import annotations

import functools
import json
import math
import sys
from pathlib import Path

import click

from . import __version__
from .aggregation import (
    AggregationScheme,
    aggregate,
    aggregated_concentrability,
    all_policy_concentrability,
    pushforward_concentrability,
    standard_concentrability,
)
from .experiment import ESTIMATORS, ConfigError, ExperimentConfig, build_problem, default_out_dir, estimate_with_error, generator, run_sweep
from .instances import InfeasibleError
from .mdp import InvariantError
from .offline import sample_general
from .reduction import bvft_estimator, is_estimator, oracle_estimator, reduce_and_evaluate, replicate
from .serialize import dumps, load_problem, save_problem

EXIT_CONFIG, EXIT_INVARIANT, EXIT_INFEASIBLE = 2, 3, 4


def _guarded(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ConfigError as exc:
            click.echo(f"config error: {exc}", err=True)
            sys.exit(EXIT_CONFIG)
        except InvariantError as exc:
            click.echo(f"invariant violated: {exc}", err=True)
            sys.exit(EXIT_INVARIANT)
        except InfeasibleError as exc:
            click.echo(f"infeasible: {exc}", err=True)
            sys.exit(EXIT_INFEASIBLE)
    return wrapper


def _finite(x: float):
    return x if math.isfinite(x) else str(x)


def _emit(record: dict, out: str | None) -> None:
    record = {"version": __version__, **record}
    text = dumps(record)
    if out:
        Path(out).write_text(text)
    click.echo(text, nl=False)


def _load(path: str):
    try:
        return load_problem(path)
    except FileNotFoundError as exc:
        raise ConfigError(f"problem: file {path} not found") from exc
    except (KeyError, json.JSONDecodeError) as exc:
        raise ConfigError(f"problem: malformed file ({exc})") from exc


def _file_digest(path: str) -> str:
    import hashlib

    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


@click.group()
@click.version_option(__version__, prog_name="opebounds")
def main():
    """Hard instances, concentrability and estimators for offline policy evaluation."""


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False))
@click.option("--seed", type=int, default=None, help="Overrides the config seed.")
@click.option("--out", type=click.Path(dir_okay=False), default=None)
@_guarded
def build(config_path, seed, out):
    """Build the configured instance and write it as a problem file."""
    cfg = ExperimentConfig.load(config_path)
    seed = cfg.seed if seed is None else seed
    problem = build_problem(cfg.instance, generator(seed))
    out = out or cfg.output or str(default_out_dir() / f"{problem.name}.json")
    save_problem(problem, out)
    click.echo(out)


@main.command()
@click.argument("problem_path", type=click.Path(dir_okay=False))
@click.option("--epsilon", type=float, default=None, help="Defaults to the problem's epsilon.")
@click.option("--scheme", type=click.Choice(["problem", "singletons", "single"]), default="problem")
@click.option("--scaled-start", is_flag=True, help="Scale the first aggregated layer by 1/H.")
@click.option("--out", type=click.Path(dir_okay=False), default=None)
@_guarded
def concentrability(problem_path, epsilon, scheme, scaled_start, out):
    """Standard, all-policy, pushforward and aggregated concentrability."""
    p = _load(problem_path)
    eps = p.epsilon if epsilon is None else epsilon
    if not 0 < eps <= 1:
        raise ConfigError("epsilon: must lie in (0, 1]")
    sizes = p.mdp.layer_sizes
    if scheme == "singletons" or (scheme == "problem" and p.scheme is None):
        phi = AggregationScheme.singletons(sizes)
    elif scheme == "single":
        phi = AggregationScheme.single_cell(sizes)
    else:
        phi = p.scheme
    scale = 1.0 / p.mdp.horizon if scaled_start else 1.0
    agg = aggregated_concentrability(aggregate(p.mdp, p.offline, phi, p.evaluation, scale), eps)
    pf = pushforward_concentrability(p.mdp, p.offline)
    record = {
        "problem": p.name,
        "problem_hash": _file_digest(problem_path),
        "epsilon": eps,
        "scaled_start": scaled_start,
        "standard": _finite(standard_concentrability(p.mdp, p.offline, p.evaluation)),
        "all_policy": _finite(all_policy_concentrability(p.mdp, p.offline)),
        "pushforward": _finite(pf.pushforward),
        "state_factor": _finite(pf.state_factor),
        "action_factor": _finite(pf.action_factor),
        "aggregated": _finite(agg.value) if agg.feasible else None,
        "witness_layer": agg.layer,
        "witness_cells": list(agg.cells),
        "exact": agg.exact,
    }
    _emit(record, out)
    if not agg.feasible:
        click.echo(f"infeasible: no cell set reaches aggregated occupancy {eps}", err=True)
        sys.exit(EXIT_INFEASIBLE)


@main.command()
@click.argument("problem_path", type=click.Path(dir_okay=False))
@click.option("--estimator", type=click.Choice(ESTIMATORS), default="bvft")
@click.option("--samples", "n", type=click.IntRange(min=1), default=10000)
@click.option("--seed", type=click.IntRange(min=0), default=0)
@click.option("--out", type=click.Path(dir_okay=False), default=None)
@_guarded
def evaluate(problem_path, estimator, n, seed, out):
    """Estimate the evaluation value and compare it with dynamic programming."""
    p = _load(problem_path)
    est, se = estimate_with_error(p, estimator, n, generator(seed))
    truth = p.true_value()
    _emit({"problem": p.name, "problem_hash": _file_digest(problem_path), "estimator": estimator,
           "samples": n, "seed": seed, "estimate": est, "std_error": se, "truth": truth,
           "abs_error": abs(est - truth)}, out)


@main.command()
@click.argument("problem_path", type=click.Path(dir_okay=False))
@click.option("--replication", "copies", type=click.IntRange(min=1), default=4)
@click.option("--samples", "n", type=click.IntRange(min=1), default=1000, help="Trajectories to synthesize.")
@click.option("--estimator", type=click.Choice(ESTIMATORS), default="exact-oracle")
@click.option("--seed", type=click.IntRange(min=0), default=0)
@click.option("--problem-out", type=click.Path(dir_okay=False), default=None, help="Write the stretched problem.")
@click.option("--out", type=click.Path(dir_okay=False), default=None)
@_guarded
def reduce(problem_path, copies, n, estimator, seed, problem_out, out):
    """Stretch an admissible problem and estimate from converted trajectories."""
    p = _load(problem_path)
    rep = replicate(p, copies)
    if problem_out:
        save_problem(rep.problem, problem_out)
    rng = generator(seed)
    data = sample_general(p.mdp, p.offline, copies * n, rng)
    fn = {"exact-oracle": oracle_estimator, "importance-sampling": is_estimator, "bvft": bvft_estimator}[estimator]
    est = reduce_and_evaluate(data, rep, fn, rng)
    truth = p.true_value()
    _emit({"problem": p.name, "problem_hash": _file_digest(problem_path), "replication": copies,
           "stretched_horizon": rep.horizon, "trajectories": n, "estimator": estimator, "seed": seed,
           "estimate": est, "truth": truth, "abs_error": abs(est - truth)}, out)


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False))
@click.option("--seed", type=click.IntRange(min=0), default=None, help="Overrides the config seed.")
@click.option("--out", type=click.Path(dir_okay=False), default=None)
@click.option("--workers", type=click.IntRange(min=1), default=1)
@_guarded
def sweep(config_path, seed, out, workers):
    """Error-versus-sample-size sweep written as CSV."""
    cfg = ExperimentConfig.load(config_path)
    if seed is not None:
        cfg = ExperimentConfig(cfg.instance, cfg.estimator, cfg.grid, cfg.trials, seed, cfg.output)
    result = run_sweep(cfg, workers)
    out = out or cfg.output or str(default_out_dir() / f"sweep-{cfg.digest()}.csv")
    Path(out).write_text(result.to_csv())
    for n, mean, std in result.summary():
        click.echo(f"n={n} mean_error={mean:.6f} std={std:.6f}")
    click.echo(out)


if __name__ == "__main__":
    main()
