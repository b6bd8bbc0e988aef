"""Layered finite-horizon MDPs: representation, dynamic programming, sampling.

States are indexed locally within each layer, so ``(h, i)`` names the i-th
state of layer h (0-based layers throughout the code).  Every per-layer table
is a dense float64 array.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

STOCHASTIC_TOL = 1e-12


class InvariantError(ValueError):
    """A structural invariant of a model object is violated."""


def _as_float(a) -> np.ndarray:
    arr = np.array(a, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class MarkovTransitionModel:
    """Layered transition model without rewards.

    ``transitions[h]`` has shape ``(S_h, A, S_{h+1})`` for ``h < H - 1``.
    """

    layer_sizes: tuple[int, ...]
    n_actions: int
    transitions: tuple[np.ndarray, ...]
    initial: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "layer_sizes", tuple(int(s) for s in self.layer_sizes))
        object.__setattr__(self, "transitions", tuple(_as_float(t) for t in self.transitions))
        object.__setattr__(self, "initial", _as_float(self.initial))

    @property
    def horizon(self) -> int:
        return len(self.layer_sizes)

    @property
    def n_states(self) -> int:
        return sum(self.layer_sizes)

    def offsets(self) -> np.ndarray:
        """Global id of the first state of every layer."""
        return np.concatenate([[0], np.cumsum(self.layer_sizes)[:-1]]).astype(int)


@dataclass(frozen=True)
class RewardTable:
    """Finite-support reward distribution for every (state, action) of a layer.

    ``support`` and ``probs`` have shape ``(S_h, A, K)``.
    """

    support: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "support", _as_float(self.support))
        object.__setattr__(self, "probs", _as_float(self.probs))

    @property
    def mean(self) -> np.ndarray:
        return (self.support * self.probs).sum(axis=-1)

    @classmethod
    def deterministic(cls, mean) -> "RewardTable":
        mean = np.asarray(mean, dtype=np.float64)
        return cls(mean[..., None], np.ones(mean.shape + (1,)))

    @classmethod
    def plus_minus(cls, mean) -> "RewardTable":
        """±1-valued rewards with the given mean."""
        mean = np.asarray(mean, dtype=np.float64)
        support = np.broadcast_to(np.array([-1.0, 1.0]), mean.shape + (2,))
        probs = np.stack([(1.0 - mean) / 2.0, (1.0 + mean) / 2.0], axis=-1)
        return cls(support, probs)

    @classmethod
    def zeros(cls, n_states: int, n_actions: int) -> "RewardTable":
        return cls.deterministic(np.zeros((n_states, n_actions)))


@dataclass(frozen=True)
class MarkovDecisionProcess:
    mtm: MarkovTransitionModel
    rewards: tuple[RewardTable, ...]

    def __post_init__(self):
        object.__setattr__(self, "rewards", tuple(self.rewards))

    @property
    def horizon(self) -> int:
        return self.mtm.horizon

    @property
    def layer_sizes(self) -> tuple[int, ...]:
        return self.mtm.layer_sizes

    @property
    def n_actions(self) -> int:
        return self.mtm.n_actions

    @property
    def transitions(self) -> tuple[np.ndarray, ...]:
        return self.mtm.transitions

    @property
    def initial(self) -> np.ndarray:
        return self.mtm.initial

    def mean_rewards(self) -> list[np.ndarray]:
        return [r.mean for r in self.rewards]

    @classmethod
    def with_mean_rewards(cls, mtm: MarkovTransitionModel, means: Sequence, plus_minus=False):
        make = RewardTable.plus_minus if plus_minus else RewardTable.deterministic
        return cls(mtm, tuple(make(m) for m in means))

    @classmethod
    def zero_reward(cls, mtm: MarkovTransitionModel) -> "MarkovDecisionProcess":
        return cls(mtm, tuple(RewardTable.zeros(s, mtm.n_actions) for s in mtm.layer_sizes))


@dataclass(frozen=True)
class Policy:
    """Per-layer action distributions, ``action_dist[h]`` of shape ``(S_h, A)``."""

    action_dist: tuple[np.ndarray, ...]

    def __post_init__(self):
        object.__setattr__(self, "action_dist", tuple(_as_float(p) for p in self.action_dist))

    @property
    def deterministic(self) -> bool:
        return all(bool(np.all(p.max(axis=1) == 1.0)) for p in self.action_dist)

    def greedy(self) -> list[np.ndarray]:
        """Action index per state (the mode; exact for deterministic policies)."""
        return [p.argmax(axis=1) for p in self.action_dist]

    @classmethod
    def from_actions(cls, actions: Sequence, n_actions: int) -> "Policy":
        dists = []
        for acts in actions:
            acts = np.asarray(acts, dtype=int)
            p = np.zeros((acts.size, n_actions))
            p[np.arange(acts.size), acts] = 1.0
            dists.append(p)
        return cls(tuple(dists))

    @classmethod
    def constant(cls, layer_sizes: Sequence[int], n_actions: int, action: int) -> "Policy":
        return cls.from_actions([np.full(s, action) for s in layer_sizes], n_actions)

    @classmethod
    def uniform(cls, layer_sizes: Sequence[int], n_actions: int) -> "Policy":
        return cls(tuple(np.full((s, n_actions), 1.0 / n_actions) for s in layer_sizes))

    @classmethod
    def mixture(cls, weights: Sequence[float], policies: Sequence["Policy"]) -> "Policy":
        layers = zip(*(p.action_dist for p in policies))
        return cls(tuple(sum(w * d for w, d in zip(weights, ds)) for ds in layers))


@dataclass(frozen=True)
class OccupancyTable:
    states: tuple[np.ndarray, ...]
    state_actions: tuple[np.ndarray, ...]


@dataclass(frozen=True)
class ValueTable:
    q: tuple[np.ndarray, ...]
    v: tuple[np.ndarray, ...]
    initial_value: float


@dataclass(frozen=True)
class TrajectoryBatch:
    """``n`` trajectories stored column-wise; arrays have shape ``(n, H)``.

    An action of -1 marks an unobserved step (its reward is 0).
    """

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray

    def __len__(self) -> int:
        return self.states.shape[0]

    @property
    def horizon(self) -> int:
        return self.states.shape[1]

    def returns(self) -> np.ndarray:
        return self.rewards.sum(axis=1)


def _check_distribution(vec: np.ndarray, where: str, tol: float = STOCHASTIC_TOL):
    if np.any(vec < 0):
        raise InvariantError(f"negative probability at {where}")
    total = vec.sum(axis=-1)
    bad = np.abs(total - 1.0) > tol
    if np.any(bad):
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise InvariantError(f"row not stochastic at {where} index {idx} (sum={float(np.asarray(total)[idx]):.15g})")


def validate(m: MarkovTransitionModel | MarkovDecisionProcess) -> None:
    """Raise ``InvariantError`` naming the first violated invariant."""
    mtm = m.mtm if isinstance(m, MarkovDecisionProcess) else m
    H = mtm.horizon
    if H < 1:
        raise InvariantError("horizon must be positive")
    if mtm.n_actions < 1:
        raise InvariantError("action set is empty")
    if len(mtm.transitions) != H - 1:
        raise InvariantError(f"expected {H - 1} transition layers, got {len(mtm.transitions)}")
    if mtm.initial.shape != (mtm.layer_sizes[0],):
        raise InvariantError("initial distribution shape does not match layer 0")
    _check_distribution(mtm.initial, "initial distribution")
    for h, t in enumerate(mtm.transitions):
        expected = (mtm.layer_sizes[h], mtm.n_actions, mtm.layer_sizes[h + 1])
        if t.shape != expected:
            raise InvariantError(f"transition layer {h} has shape {t.shape}, expected {expected}")
        _check_distribution(t, f"transition layer {h}")
    if isinstance(m, MarkovDecisionProcess):
        if len(m.rewards) != H:
            raise InvariantError(f"expected {H} reward layers, got {len(m.rewards)}")
        for h, r in enumerate(m.rewards):
            if r.support.shape[:2] != (mtm.layer_sizes[h], mtm.n_actions) or r.support.shape != r.probs.shape:
                raise InvariantError(f"reward layer {h} has inconsistent shape")
            if np.any(np.abs(r.support) > 1.0 + STOCHASTIC_TOL):
                raise InvariantError(f"reward outside [-1,1] at layer {h}")
            _check_distribution(r.probs, f"reward layer {h}")
            if np.any(np.abs(r.mean) > 1.0 + STOCHASTIC_TOL):
                raise InvariantError(f"reward outside [-1,1] at layer {h}")


def validate_policy(policy: Policy, layer_sizes: Sequence[int], n_actions: int) -> None:
    if len(policy.action_dist) != len(layer_sizes):
        raise InvariantError("policy layer count does not match horizon")
    for h, p in enumerate(policy.action_dist):
        if p.shape != (layer_sizes[h], n_actions):
            raise InvariantError(f"policy layer {h} has shape {p.shape}")
        _check_distribution(p, f"policy layer {h}")


def occupancy(m: MarkovTransitionModel | MarkovDecisionProcess, policy: Policy) -> OccupancyTable:
    mtm = m.mtm if isinstance(m, MarkovDecisionProcess) else m
    d = mtm.initial.copy()
    states, pairs = [], []
    for h in range(mtm.horizon):
        da = d[:, None] * policy.action_dist[h]
        states.append(d)
        pairs.append(da)
        if h < mtm.horizon - 1:
            d = np.einsum("xa,xay->y", da, mtm.transitions[h])
    return OccupancyTable(tuple(states), tuple(pairs))


def value(m: MarkovDecisionProcess, policy: Policy) -> ValueTable:
    """Backward recursion; reward is collected at every layer including the last."""
    H = m.horizon
    q: list[np.ndarray] = [None] * H  # type: ignore[list-item]
    v: list[np.ndarray] = [None] * H  # type: ignore[list-item]
    nxt = None
    for h in reversed(range(H)):
        qh = m.rewards[h].mean.copy()
        if nxt is not None:
            qh = qh + m.transitions[h] @ nxt
        q[h] = qh
        v[h] = (policy.action_dist[h] * qh).sum(axis=1)
        nxt = v[h]
    return ValueTable(tuple(q), tuple(v), float(m.initial @ v[0]))


def max_reach_probability(mtm: MarkovTransitionModel, layer: int, state: int) -> float:
    """max over all policies of d_layer(state), by a backward max-DP."""
    p = np.zeros(mtm.layer_sizes[layer])
    p[state] = 1.0
    for h in reversed(range(layer)):
        p = (mtm.transitions[h] @ p).max(axis=1)
    return float(mtm.initial @ p)


def _draw(cdf_rows: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Inverse-CDF sampling, one draw per row of cumulative probabilities."""
    u = rng.random(cdf_rows.shape[0])
    idx = (u[:, None] >= cdf_rows[:, :-1]).sum(axis=1)
    return idx


def sample_categorical(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One draw from each row of ``probs`` (shape ``(n, k)``)."""
    if probs.shape[0] == 0:
        return np.zeros(0, dtype=int)
    return _draw(np.cumsum(probs, axis=1), rng)


def sample_iid(probs: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` i.i.d. draws from a single probability vector."""
    cdf = np.cumsum(probs)
    idx = np.searchsorted(cdf, rng.random(n), side="right")
    return np.minimum(idx, probs.size - 1)


def sample_rewards(table: RewardTable, states: np.ndarray, actions: np.ndarray,
                   rng: np.random.Generator) -> np.ndarray:
    probs = table.probs[states, actions]
    k = sample_categorical(probs, rng)
    return table.support[states, actions, k] if k.size else np.zeros(0)


def sample_trajectories(m: MarkovDecisionProcess, policy: Policy, n: int,
                        rng: np.random.Generator) -> TrajectoryBatch:
    H = m.horizon
    states = np.zeros((n, H), dtype=int)
    actions = np.zeros((n, H), dtype=int)
    rewards = np.zeros((n, H))
    x = sample_iid(m.initial, n, rng)
    for h in range(H):
        states[:, h] = x
        a = sample_categorical(policy.action_dist[h][x], rng)
        actions[:, h] = a
        rewards[:, h] = sample_rewards(m.rewards[h], x, a, rng)
        if h < H - 1:
            x = sample_categorical(m.transitions[h][x, a], rng)
    return TrajectoryBatch(states, actions, rewards)


def sample_trajectory(m: MarkovDecisionProcess, policy: Policy, rng: np.random.Generator) -> TrajectoryBatch:
    return sample_trajectories(m, policy, 1, rng)


def is_terms(trajectories: TrajectoryBatch, evaluation: Policy, behavior: Policy) -> np.ndarray:
    """Per-trajectory importance-weighted returns; unobserved steps (action -1) carry weight 1."""
    n, H = trajectories.states.shape
    if n == 0:
        raise ValueError("importance sampling needs at least one trajectory")
    log_w = np.zeros(n)
    zero = np.zeros(n, dtype=bool)
    for h in range(H):
        a = trajectories.actions[:, h]
        seen = a >= 0
        x = trajectories.states[seen, h]
        pb = behavior.action_dist[h][x, a[seen]]
        if np.any(pb <= 0):
            raise ValueError(f"behavior policy has zero probability on a logged action at layer {h}")
        pe = evaluation.action_dist[h][x, a[seen]]
        zero[seen] |= pe == 0
        with np.errstate(divide="ignore"):
            log_w[seen] += np.where(pe > 0, np.log(np.where(pe > 0, pe, 1.0)) - np.log(pb), 0.0)
    w = np.where(zero, 0.0, np.exp(log_w))
    return w * trajectories.returns()


def is_estimate(trajectories: TrajectoryBatch, evaluation: Policy, behavior: Policy) -> float:
    """Trajectory-wise importance sampling estimate of the evaluation value."""
    return float(np.mean(is_terms(trajectories, evaluation, behavior)))
