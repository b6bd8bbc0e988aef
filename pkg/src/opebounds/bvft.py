"""Batch value-function tournament (BVFT) for finite-horizon policy evaluation.

Each candidate ``f`` is scored by how far it sits from its own projected
Bellman backup, where the projection lives on the partition induced by ``f``
and a rival ``f'``; the candidate with the smallest worst-case score wins.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .aggregation import AggregationScheme
from .mdp import MarkovDecisionProcess, Policy, sample_categorical
from .offline import TERMINAL, OfflineDataset


@dataclass(frozen=True)
class ValueFunctionClass:
    """Finite list of V-form tables; ``functions[i][h]`` has shape ``(S_h,)``."""

    functions: tuple[tuple[np.ndarray, ...], ...]

    def __post_init__(self):
        fs = tuple(tuple(np.asarray(l, dtype=np.float64) for l in f) for f in self.functions)
        if not fs:
            raise ValueError("function class is empty")
        object.__setattr__(self, "functions", fs)

    def __len__(self) -> int:
        return len(self.functions)

    def __getitem__(self, i: int) -> tuple[np.ndarray, ...]:
        return self.functions[i]

    @classmethod
    def from_q(cls, qs: Sequence[Sequence[np.ndarray]], evaluation: Policy) -> "ValueFunctionClass":
        """Reduce Q-tables to V-tables by averaging over the evaluation policy."""
        return cls(tuple(tuple((p * q).sum(axis=1) for p, q in zip(evaluation.action_dist, f)) for f in qs))


@dataclass(frozen=True)
class FilteredLayer:
    states: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    n_total: int            # tuples in the layer before filtering


@dataclass(frozen=True)
class FilteredDataset:
    layers: tuple[FilteredLayer, ...]

    @property
    def n(self) -> int:
        return sum(l.n_total for l in self.layers)

    @property
    def n_kept(self) -> int:
        return sum(l.states.size for l in self.layers)


def preprocess(data: OfflineDataset, evaluation: Policy, rng: np.random.Generator | None = None) -> FilteredDataset:
    """Keep the tuples whose action agrees with the evaluation policy.

    For a stochastic policy an action is drawn from it per tuple and the tuple
    is kept when the two match (needs ``rng``).
    """
    out = []
    deterministic = evaluation.deterministic
    greedy = evaluation.greedy()
    for h, tup in enumerate(data.tuples()):
        if deterministic:
            keep = tup.actions == greedy[h][tup.states]
        else:
            if rng is None:
                raise ValueError("a generator is needed to filter for a stochastic policy")
            keep = sample_categorical(evaluation.action_dist[h][tup.states], rng) == tup.actions
        out.append(FilteredLayer(tup.states[keep], tup.rewards[keep], tup.next_states[keep], len(tup)))
    return FilteredDataset(tuple(out))


def induced_partition(f: Sequence[np.ndarray], g: Sequence[np.ndarray]) -> AggregationScheme:
    """States share a cell when both functions take identical stored values on them."""
    labels = []
    for a, b in zip(f, g):
        _, inv = np.unique(np.stack([a, b], axis=1), axis=0, return_inverse=True)
        labels.append(inv.ravel())
    return AggregationScheme(tuple(labels))


def _next_value(f: Sequence[np.ndarray], h: int, nxt: np.ndarray) -> np.ndarray:
    if h + 1 >= len(f):
        return np.zeros(nxt.size)
    return np.where(nxt == TERMINAL, 0.0, f[h + 1][np.maximum(nxt, 0)])


def bellman_backup(m: MarkovDecisionProcess, f: Sequence[np.ndarray], evaluation: Policy) -> list[np.ndarray]:
    """(Tf)(x) = E_a~pi[r(x,a) + sum_x' T(x'|x,a) f(x')] on every layer."""
    out = []
    for h in range(m.horizon):
        q = m.rewards[h].mean.copy()
        if h < m.horizon - 1:
            q = q + m.transitions[h] @ f[h + 1]
        out.append((evaluation.action_dist[h] * q).sum(axis=1))
    return out


def _cell_average(labels: np.ndarray, weights: np.ndarray, values: np.ndarray) -> np.ndarray:
    n_cells = int(labels.max()) + 1 if labels.size else 0
    mass = np.bincount(labels, weights=weights, minlength=n_cells)
    total = np.bincount(labels, weights=weights * values, minlength=n_cells)
    avg = np.divide(total, mass, out=np.zeros(n_cells), where=mass > 0)
    return avg[labels]


def exact_projection(m: MarkovDecisionProcess, nu: Sequence[np.ndarray], f: Sequence[np.ndarray],
                     scheme: AggregationScheme, evaluation: Policy) -> list[np.ndarray]:
    """nu-weighted cell averages of Tf; cells without mass get 0."""
    tf = bellman_backup(m, f, evaluation)
    return [_cell_average(scheme.labels[h], np.asarray(nu[h], float), tf[h]) for h in range(m.horizon)]


def empirical_projection(data: FilteredDataset, f: Sequence[np.ndarray], scheme: AggregationScheme
                         ) -> list[np.ndarray]:
    """Per cell, the mean of ``r + f(x')`` over kept tuples starting in the cell; empty cells get 0."""
    out = []
    for h, labels in enumerate(scheme.labels):
        n_cells = int(labels.max()) + 1 if labels.size else 0
        if h >= len(data.layers) or data.layers[h].states.size == 0:
            out.append(np.zeros(labels.size))
            continue
        lay = data.layers[h]
        target = lay.rewards + _next_value(f, h, lay.next_states)
        cell = labels[lay.states]
        count = np.bincount(cell, minlength=n_cells)
        total = np.bincount(cell, weights=target, minlength=n_cells)
        avg = np.divide(total, count, out=np.zeros(n_cells), where=count > 0)
        out.append(avg[labels])
    return out


def empirical_weights(data: FilteredDataset, layer_sizes: Sequence[int]) -> list[np.ndarray]:
    """Kept-state counts of every layer divided by that layer's full sample size."""
    out = []
    for h, s in enumerate(layer_sizes):
        if h >= len(data.layers) or data.layers[h].n_total == 0:
            out.append(np.zeros(s))
            continue
        lay = data.layers[h]
        out.append(np.bincount(lay.states, minlength=s) / lay.n_total)
    return out


def weighted_norm(g: np.ndarray, weights: np.ndarray) -> float:
    return math.sqrt(float(weights @ (np.asarray(g) ** 2)))


def statistical_error(n: int, phi_max: int, n_functions: int, delta: float = 0.05) -> float:
    if n <= 0:
        return math.inf
    return math.sqrt(phi_max * math.log(n * phi_max * n_functions / delta) / n)


@dataclass(frozen=True)
class BvftReport:
    selected: int
    losses: np.ndarray               # (|F|, |F|, H)
    objective: np.ndarray            # (|F|,) worst-case loss per candidate
    estimate: float
    phi_max: int
    n: int
    n_kept: int
    epsilon_stat: float
    delta: float = 0.05
    worst_layer: int = 0

    def record(self) -> dict:
        return {
            "selected": self.selected,
            "estimate": self.estimate,
            "objective": [float(v) for v in self.objective],
            "phi_max": self.phi_max,
            "n": self.n,
            "n_kept": self.n_kept,
            "epsilon_stat": self.epsilon_stat,
            "delta": self.delta,
        }


def bvft_select(data: OfflineDataset | FilteredDataset, functions: ValueFunctionClass, evaluation: Policy,
                initial: np.ndarray, rng: np.random.Generator | None = None, delta: float = 0.05) -> BvftReport:
    """Pick the candidate minimizing the worst projected Bellman residual.

    Ties go to the lowest candidate index (and the lowest layer when reporting
    where the worst residual sits).
    """
    filtered = data if isinstance(data, FilteredDataset) else preprocess(data, evaluation, rng)
    sizes = [f.size for f in functions[0]]
    weights = empirical_weights(filtered, sizes)
    k, H = len(functions), len(sizes)
    losses = np.zeros((k, k, H))
    phi_max = 0
    for i in range(k):
        f = functions[i]
        for j in range(k):
            scheme = induced_partition(f, functions[j])
            phi_max = max(phi_max, max(scheme.n_cells))
            g = empirical_projection(filtered, f, scheme)
            losses[i, j] = [weighted_norm(f[h] - g[h], weights[h]) for h in range(H)]
    objective = losses.max(axis=(1, 2))
    selected = int(np.argmin(objective))
    worst_layer = int(np.argmax(losses[selected].max(axis=0)))
    n = max((l.n_total for l in filtered.layers), default=0)
    return BvftReport(selected, losses, objective, float(np.asarray(initial) @ functions[selected][0]), phi_max,
                      filtered.n, filtered.n_kept, statistical_error(n, phi_max, k, delta), delta, worst_layer)


def grid_step(epsilon: float, horizon: int, concentrability: float) -> float:
    return epsilon / (horizon * math.sqrt(concentrability))


def discretize_class(functions: ValueFunctionClass, epsilon: float, concentrability: float,
                     horizon: int | None = None) -> ValueFunctionClass:
    """Round every value to the nearest multiple of ``epsilon / (H sqrt(C))`` (halves round up)."""
    if epsilon <= 0 or concentrability < 1:
        raise ValueError("need epsilon > 0 and concentrability >= 1")
    H = horizon if horizon is not None else len(functions[0])
    step = grid_step(epsilon, H, concentrability)
    return ValueFunctionClass(tuple(tuple(step * np.floor(l / step + 0.5) for l in f) for f in functions.functions))
