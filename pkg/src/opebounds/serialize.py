"""Canonical JSON encoding of evaluation problems.

Floats are written with ``repr`` precision and keys are sorted, so encoding a
decoded file reproduces it byte for byte.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Any

import numpy as np

from . import __version__
from .aggregation import AggregationScheme
from .instances import OPEProblem
from .mdp import InvariantError, MarkovDecisionProcess, MarkovTransitionModel, Policy, RewardTable, validate
from .offline import DataKind, OfflineDistribution

FORMAT = "opebounds-problem/1"


def _lists(arrays) -> list:
    return [np.asarray(a).tolist() for a in arrays]


def _policy(p: Policy | None):
    return None if p is None else _lists(p.action_dist)


def problem_to_dict(problem: OPEProblem) -> dict[str, Any]:
    m = problem.mdp
    return {
        "format": FORMAT,
        "version": __version__,
        "name": problem.name,
        "layer_sizes": list(m.layer_sizes),
        "n_actions": m.n_actions,
        "initial": m.initial.tolist(),
        "transitions": _lists(m.transitions),
        "reward_support": _lists(r.support for r in m.rewards),
        "reward_probs": _lists(r.probs for r in m.rewards),
        "evaluation": _policy(problem.evaluation),
        "behavior": _policy(problem.behavior),
        "offline": _lists(problem.offline.layers),
        "offline_provenance": problem.offline.provenance,
        "data_kind": problem.data_kind.value,
        "functions": [_lists(f) for f in problem.functions],
        "w_tables": None if problem.w_tables is None else _lists(problem.w_tables),
        "epsilon": problem.epsilon,
        "realizable": problem.realizable,
        "scheme": None if problem.scheme is None else _lists(problem.scheme.labels),
    }


def _arrays(items) -> tuple[np.ndarray, ...]:
    return tuple(np.array(a, dtype=np.float64) for a in items)


def problem_from_dict(d: dict[str, Any]) -> OPEProblem:
    if d.get("format") != FORMAT:
        raise InvariantError(f"unknown problem format {d.get('format')!r}")
    mtm = MarkovTransitionModel(tuple(d["layer_sizes"]), int(d["n_actions"]), _arrays(d["transitions"]),
                                np.array(d["initial"], dtype=np.float64))
    rewards = tuple(RewardTable(s, p) for s, p in zip(d["reward_support"], d["reward_probs"]))
    m = MarkovDecisionProcess(mtm, rewards)
    validate(m)
    behavior = None if d["behavior"] is None else Policy(_arrays(d["behavior"]))
    offline = OfflineDistribution(_arrays(d["offline"]), d["offline_provenance"],
                                  behavior if d["offline_provenance"] == "admissible" else None)
    offline.validate(mtm)
    scheme = None
    if d.get("scheme") is not None:
        scheme = AggregationScheme(tuple(np.array(l, dtype=int) for l in d["scheme"]))
    return OPEProblem(
        mdp=m,
        evaluation=Policy(_arrays(d["evaluation"])),
        offline=offline,
        data_kind=DataKind(d["data_kind"]),
        behavior=behavior,
        functions=tuple(_arrays(f) for f in d["functions"]),
        w_tables=None if d["w_tables"] is None else _arrays(d["w_tables"]),
        epsilon=float(d["epsilon"]),
        realizable=bool(d["realizable"]),
        name=d["name"],
        scheme=scheme,
    )


def dumps(obj: dict[str, Any]) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n"


def save_problem(problem: OPEProblem, path: str | Path) -> str:
    text = dumps(problem_to_dict(problem))
    Path(path).write_text(text)
    return text


def load_problem(path: str | Path) -> OPEProblem:
    return problem_from_dict(json.loads(Path(path).read_text()))
