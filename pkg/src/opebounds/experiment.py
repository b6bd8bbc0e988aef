"""Experiment configuration, estimators and error-versus-sample-size sweeps."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import __version__
from .bvft import ValueFunctionClass, bvft_select
from .instances import (
    OPEProblem,
    agnostic_admissible_instance,
    agnostic_trajectory_instance,
    block_lift,
    example_latent_pair,
    example_problem,
)
from .mdp import is_terms
from .offline import sample_general, sample_trajectories

FAMILIES = ("example", "latent", "lifted", "agnostic-admissible", "agnostic-trajectory")
ESTIMATORS = ("bvft", "importance-sampling", "exact-oracle")
OUT_DIR_ENV = "OPEBOUNDS_OUT_DIR"


class ConfigError(ValueError):
    """A configuration field is missing or malformed; the message names the field."""


def generator(*keys: int) -> np.random.Generator:
    """Counter-based generator keyed by integers (e.g. master seed, grid index, trial)."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(k) for k in keys])))


def default_out_dir() -> Path:
    import os

    return Path(os.environ.get(OUT_DIR_ENV, "."))


@dataclass(frozen=True)
class InstanceSpec:
    family: str = "example"
    horizon: int = 4
    scale: int = 2
    epsilon: float = 1 / 15
    kind: int | str = 1                 # 1, 2 or "random" (drawn per trial)
    pool_size: int | None = None        # observations per base cell; default 4 |cell|
    half_size: int = 4

    def check(self) -> None:
        if self.family not in FAMILIES:
            raise ConfigError(f"instance.family: expected one of {FAMILIES}, got {self.family!r}")
        if not isinstance(self.horizon, int) or self.horizon < 2:
            raise ConfigError("instance.horizon: must be an integer >= 2")
        if self.family in ("latent", "lifted") and self.horizon < 3:
            raise ConfigError("instance.horizon: latent and lifted families need horizon >= 3")
        if not isinstance(self.scale, int) or self.scale < 1:
            raise ConfigError("instance.scale: must be a positive integer")
        if not (isinstance(self.epsilon, (int, float)) and 0 < self.epsilon <= 1):
            raise ConfigError("instance.epsilon: must lie in (0, 1]")
        if self.kind not in (1, 2, "random"):
            raise ConfigError("instance.kind: must be 1, 2 or \"random\"")
        if self.pool_size is not None and (not isinstance(self.pool_size, int) or self.pool_size < 1):
            raise ConfigError("instance.pool_size: must be a positive integer or null")
        if not isinstance(self.half_size, int) or self.half_size < 1:
            raise ConfigError("instance.half_size: must be a positive integer")


@dataclass(frozen=True)
class ExperimentConfig:
    instance: InstanceSpec = field(default_factory=InstanceSpec)
    estimator: str = "bvft"
    grid: tuple[int, ...] = (100, 100000)
    trials: int = 50
    seed: int = 0
    output: str | None = None

    def check(self) -> None:
        self.instance.check()
        if self.estimator not in ESTIMATORS:
            raise ConfigError(f"estimator: expected one of {ESTIMATORS}, got {self.estimator!r}")
        if not self.grid or any(not isinstance(n, int) or n < 1 for n in self.grid):
            raise ConfigError("grid: must be a non-empty list of positive integers")
        if any(b <= a for a, b in zip(self.grid, self.grid[1:])):
            raise ConfigError("grid: must be strictly increasing")
        if not isinstance(self.trials, int) or self.trials < 1:
            raise ConfigError("trials: must be an integer >= 1")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError("seed: must be a non-negative integer")

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["grid"] = list(self.grid)
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("config: top level must be an object")
        known = {"instance", "estimator", "grid", "trials", "seed", "output"}
        for key in d:
            if key not in known:
                raise ConfigError(f"{key}: unknown field")
        inst = d.get("instance", {})
        if not isinstance(inst, dict):
            raise ConfigError("instance: must be an object")
        inst_fields = set(InstanceSpec.__dataclass_fields__)
        for key in inst:
            if key not in inst_fields:
                raise ConfigError(f"instance.{key}: unknown field")
        grid = d.get("grid", list(cls.grid))
        if not isinstance(grid, list):
            raise ConfigError("grid: must be a list")
        cfg = cls(InstanceSpec(**inst), d.get("estimator", cls.estimator), tuple(grid),
                  d.get("trials", cls.trials), d.get("seed", cls.seed), d.get("output"))
        cfg.check()
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        try:
            data = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config: file {path} not found") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config: invalid JSON ({exc.msg} at line {exc.lineno})") from exc
        return cls.from_dict(data)


def build_problem(spec: InstanceSpec, rng: np.random.Generator) -> OPEProblem:
    """Instantiate the configured family; random parts draw from ``rng``."""
    spec.check()
    kind = int(rng.integers(1, 3)) if spec.kind == "random" else int(spec.kind)
    if spec.family == "example":
        return example_problem(spec.horizon, spec.epsilon)
    if spec.family == "agnostic-admissible":
        return agnostic_admissible_instance(spec.scale, rng)[kind - 1]
    if spec.family == "agnostic-trajectory":
        return agnostic_trajectory_instance(spec.horizon, rng, spec.half_size)[kind - 1]
    pair = example_latent_pair(spec.horizon, spec.epsilon)
    if spec.family == "latent":
        return pair.problem(kind - 1)
    pools = None
    if spec.pool_size is not None:
        pools = [np.concatenate([np.full(c, spec.pool_size), [1, 1, 1]]) for c in pair.scheme.n_cells]
    return block_lift(pair, rng, pools).problem(kind - 1)


def estimate_with_error(problem: OPEProblem, estimator: str, n: int, rng: np.random.Generator
                        ) -> tuple[float, float | None]:
    """Estimate plus a standard error where the estimator has one (importance sampling only)."""
    if estimator == "exact-oracle":
        return problem.true_value(), 0.0
    if estimator == "importance-sampling":
        if problem.behavior is None:
            raise ConfigError("estimator: importance sampling needs a problem with a behavior policy")
        data = sample_trajectories(problem.mdp, problem.behavior, n, rng)
        terms = is_terms(data.trajectories, problem.evaluation, problem.behavior)
        se = float(terms.std(ddof=1) / math.sqrt(n)) if n > 1 else math.inf
        return float(terms.mean()), se
    if estimator == "bvft":
        if not problem.functions:
            raise ConfigError("estimator: bvft needs a problem with a function class")
        data = sample_general(problem.mdp, problem.offline, n, rng)
        F = ValueFunctionClass.from_q(problem.functions, problem.evaluation)
        return bvft_select(data, F, problem.evaluation, problem.mdp.initial, rng).estimate, None
    raise ConfigError(f"estimator: unknown estimator {estimator!r}")


def estimate(problem: OPEProblem, estimator: str, n: int, rng: np.random.Generator) -> float:
    return estimate_with_error(problem, estimator, n, rng)[0]


@dataclass(frozen=True)
class SweepResult:
    config: ExperimentConfig
    rows: tuple[tuple[int, int, float, float, float], ...]    # (n, trial, estimate, truth, error)

    def errors(self, n: int) -> np.ndarray:
        return np.array([r[4] for r in self.rows if r[0] == n])

    def summary(self) -> list[tuple[int, float, float]]:
        out = []
        for n in self.config.grid:
            e = self.errors(n)
            out.append((n, float(e.mean()), float(e.std(ddof=1)) if e.size > 1 else 0.0))
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# opebounds {__version__} config_hash={self.config.digest()} seed={self.config.seed}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["record", "n", "trial", "estimate", "truth", "abs_error", "std_error"])
        for n, t, est, truth, err in self.rows:
            w.writerow(["trial", n, t, repr(est), repr(truth), repr(err), ""])
        for n, mean, std in self.summary():
            w.writerow(["aggregate", n, "", "", "", repr(mean), repr(std)])
        return buf.getvalue()


def _trial(config: ExperimentConfig, i: int, t: int) -> tuple[int, int, float, float, float]:
    n = config.grid[i]
    rng = generator(config.seed, i, t)
    problem = build_problem(config.instance, rng)
    est = estimate(problem, config.estimator, n, rng)
    truth = problem.true_value()
    return n, t, float(est), truth, abs(est - truth)


def run_sweep(config: ExperimentConfig, workers: int = 1) -> SweepResult:
    """Every (grid point, trial) draws from its own generator, so rows do not depend on scheduling."""
    config.check()
    jobs = [(i, t) for i in range(len(config.grid)) for t in range(config.trials)]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(workers) as pool:
            rows = list(pool.map(_trial, [config] * len(jobs), *zip(*jobs)))
    else:
        rows = [_trial(config, i, t) for i, t in jobs]
    return SweepResult(config, tuple(rows))


def mean_gap(result: SweepResult) -> float:
    """Mean error at the smallest grid point minus mean error at the largest."""
    s = result.summary()
    return s[0][1] - s[-1][1] if s else math.nan
