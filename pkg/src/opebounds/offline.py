"""Offline data models: general tuples, admissible tuples and trajectories."""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .mdp import (
    InvariantError,
    MarkovDecisionProcess,
    MarkovTransitionModel,
    Policy,
    TrajectoryBatch,
    occupancy,
    sample_categorical,
    sample_iid,
    sample_rewards,
    sample_trajectories as _sample_trajectories,
)

TERMINAL = -1  # next-state marker for tuples drawn at the last layer


class DataKind(enum.Enum):
    GENERAL = "general"
    ADMISSIBLE = "admissible"
    TRAJECTORY = "trajectory"


@dataclass(frozen=True)
class OfflineDistribution:
    """Per-layer distributions over (state, action), shape ``(S_h, A)``.

    Holds either H-1 layers (the bare data model) or H layers, in which case
    the last layer also yields reward samples.
    """

    layers: tuple[np.ndarray, ...]
    provenance: str = "explicit"
    behavior: Policy | None = None

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(np.asarray(m, dtype=np.float64) for m in self.layers))

    def state_marginals(self) -> list[np.ndarray]:
        return [m.sum(axis=1) for m in self.layers]

    def conditionals(self) -> list[np.ndarray]:
        """mu(a|x), with NaN rows on states of zero mass."""
        out = []
        for m in self.layers:
            tot = m.sum(axis=1, keepdims=True)
            with np.errstate(invalid="ignore", divide="ignore"):
                out.append(np.where(tot > 0, m / tot, np.nan))
        return out

    def validate(self, mtm: MarkovTransitionModel) -> None:
        H = mtm.horizon
        if len(self.layers) not in (H - 1, H):
            raise InvariantError(f"offline distribution has {len(self.layers)} layers; expected {H - 1} or {H}")
        for h, m in enumerate(self.layers):
            if m.shape != (mtm.layer_sizes[h], mtm.n_actions):
                raise InvariantError(f"offline layer {h} has shape {m.shape}")
            if np.any(m < 0) or abs(m.sum() - 1.0) > 1e-12:
                raise InvariantError(f"offline layer {h} is not a distribution")


@dataclass(frozen=True)
class LayerTuples:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray

    def __len__(self) -> int:
        return self.states.size

    def take(self, idx) -> "LayerTuples":
        return LayerTuples(self.states[idx], self.actions[idx], self.rewards[idx], self.next_states[idx])


@dataclass(frozen=True)
class OfflineDataset:
    kind: DataKind
    layers: tuple[LayerTuples, ...] = ()
    trajectories: TrajectoryBatch | None = None
    seed: int | None = None

    def tuples(self) -> tuple[LayerTuples, ...]:
        """Per-layer tuples; trajectories are flattened layer by layer."""
        if self.kind is not DataKind.TRAJECTORY:
            return self.layers
        t = self.trajectories
        H = t.horizon
        out = []
        for h in range(H):
            nxt = t.states[:, h + 1] if h < H - 1 else np.full(len(t), TERMINAL)
            keep = t.actions[:, h] >= 0
            out.append(LayerTuples(t.states[keep, h], t.actions[keep, h], t.rewards[keep, h], nxt[keep]))
        return tuple(out)


def _sample_layer(m: MarkovDecisionProcess, h: int, dist: np.ndarray, n: int,
                  rng: np.random.Generator) -> LayerTuples:
    idx = sample_iid(dist.ravel(), n, rng)
    x, a = np.divmod(idx, m.n_actions)
    r = sample_rewards(m.rewards[h], x, a, rng)
    if h < m.horizon - 1:
        nxt = sample_categorical(m.transitions[h][x, a], rng)
    else:
        nxt = np.full(n, TERMINAL)
    return LayerTuples(x.astype(int), a.astype(int), np.asarray(r, dtype=float), nxt.astype(int))


def sample_general(m: MarkovDecisionProcess, mu: OfflineDistribution, n: int,
                   rng: np.random.Generator, seed: int | None = None) -> OfflineDataset:
    mu.validate(m.mtm)
    kind = DataKind.ADMISSIBLE if mu.provenance == "admissible" else DataKind.GENERAL
    layers = tuple(_sample_layer(m, h, mu.layers[h], n, rng) for h in range(len(mu.layers)))
    return OfflineDataset(kind, layers, None, seed)


def admissible_distribution(m: MarkovTransitionModel | MarkovDecisionProcess, behavior: Policy) -> OfflineDistribution:
    occ = occupancy(m, behavior)
    return OfflineDistribution(occ.state_actions, "admissible", behavior)


@dataclass(frozen=True)
class AdmissibilityResult:
    admissible: bool
    witness: Policy
    first_mismatch: int | None


def check_admissible(mu: OfflineDistribution, m: MarkovTransitionModel | MarkovDecisionProcess,
                     tol: float = 1e-9) -> AdmissibilityResult:
    """Decide whether ``mu`` is the occupancy of a single policy.

    The candidate policy is read off the conditionals; states without mass get
    the lowest action.
    """
    mtm = m.mtm if isinstance(m, MarkovDecisionProcess) else m
    dists = []
    for h in range(mtm.horizon):
        if h < len(mu.layers):
            layer = mu.layers[h]
            tot = layer.sum(axis=1, keepdims=True)
            fallback = np.zeros_like(layer)
            fallback[:, 0] = 1.0
            with np.errstate(invalid="ignore", divide="ignore"):
                dists.append(np.where(tot > 0, layer / np.where(tot > 0, tot, 1.0), fallback))
        else:
            p = np.zeros((mtm.layer_sizes[h], mtm.n_actions))
            p[:, 0] = 1.0
            dists.append(p)
    witness = Policy(tuple(dists))
    occ = occupancy(mtm, witness)
    for h, layer in enumerate(mu.layers):
        if np.max(np.abs(occ.state_actions[h] - layer)) > tol:
            return AdmissibilityResult(False, witness, h)
    return AdmissibilityResult(True, witness, None)


def sample_trajectories(m: MarkovDecisionProcess, behavior: Policy, n: int,
                        rng: np.random.Generator, seed: int | None = None) -> OfflineDataset:
    return OfflineDataset(DataKind.TRAJECTORY, (), _sample_trajectories(m, behavior, n, rng), seed)


def empirical_pairs(tuples: LayerTuples, n_states: int, n_actions: int) -> np.ndarray:
    """Empirical (state, action) frequencies of one layer's tuples."""
    counts = np.bincount(tuples.states * n_actions + tuples.actions, minlength=n_states * n_actions)
    total = max(len(tuples), 1)
    return counts.reshape(n_states, n_actions) / total


def total_variation(p: np.ndarray, q: np.ndarray) -> float:
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())


def concat_tuples(parts: Sequence[LayerTuples]) -> LayerTuples:
    return LayerTuples(*(np.concatenate([getattr(p, f) for p in parts])
                         for f in ("states", "actions", "rewards", "next_states")))
