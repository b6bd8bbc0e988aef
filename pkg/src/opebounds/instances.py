"""Generators for the hard instance families.

* the three-state exponential-gap instance (``example_instance``),
* aggregated and latent MDP pairs built from a transition model, a partition
  and an offline distribution,
* block-MDP lifts of a latent pair,
* the agnostic three-layer and H-layer families.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .aggregation import (
    AggregatedConcentrability,
    AggregationScheme,
    aggregate,
    aggregate_actions,
    aggregated_concentrability,
    check_policy_constant_on_cells,
    w_function,
)
from .mdp import (
    InvariantError,
    MarkovDecisionProcess,
    MarkovTransitionModel,
    Policy,
    value,
)
from .offline import DataKind, OfflineDistribution, admissible_distribution


class InfeasibleError(RuntimeError):
    """A requested quantity does not exist (e.g. no subset reaches epsilon)."""


@dataclass(frozen=True)
class OPEProblem:
    """An evaluation problem: model, target policy, data model and function class.

    ``functions`` holds Q-tables (one array ``(S_h, A)`` per layer);
    ``w_tables`` optionally pairs each with its W-function.
    """

    mdp: MarkovDecisionProcess
    evaluation: Policy
    offline: OfflineDistribution
    data_kind: DataKind = DataKind.GENERAL
    behavior: Policy | None = None
    functions: tuple[tuple[np.ndarray, ...], ...] = ()
    w_tables: tuple[np.ndarray, ...] | None = None
    epsilon: float = 0.1
    realizable: bool = False
    name: str = "problem"
    scheme: AggregationScheme | None = None

    def true_value(self) -> float:
        return value(self.mdp, self.evaluation).initial_value

    def check_realizable(self, tol: float = 1e-9) -> bool:
        q = value(self.mdp, self.evaluation).q
        return any(all(np.max(np.abs(f[h] - q[h])) <= tol for h in range(len(q))) for f in self.functions)


# --------------------------------------------------------------------------
# exponential-gap instance

@dataclass(frozen=True)
class ExampleInstance:
    mtm: MarkovTransitionModel
    scheme: AggregationScheme
    evaluation: Policy
    behavior: Policy

    @property
    def horizon(self) -> int:
        return self.mtm.horizon


def example_instance(horizon: int) -> ExampleInstance:
    """Three states per layer, two actions, cells ``{{0, 1}, {2}}``.

    Action 0 moves 0 -> 1 -> 2 -> 2 deterministically; action 1 stays or
    falls into state 2 with probability one half (state 2 is absorbing).
    The evaluation policy always plays action 0; the behavior policy plays it
    with probability 1/horizon^2.
    """
    H = horizon
    if H < 2:
        raise ValueError("horizon must be at least 2")
    t = np.zeros((3, 2, 3))
    t[0, 0, 1] = t[1, 0, 2] = t[2, 0, 2] = 1.0
    t[0, 1, 0] = t[0, 1, 2] = 0.5
    t[1, 1, 1] = t[1, 1, 2] = 0.5
    t[2, 1, 2] = 1.0
    rho = np.array([(H - 1) / (2 * H), 1 / (2 * H), 0.5])
    mtm = MarkovTransitionModel((3,) * H, 2, (t,) * (H - 1), rho)
    scheme = AggregationScheme(tuple(np.array([0, 0, 1]) for _ in range(H)))
    evaluation = Policy.constant(mtm.layer_sizes, 2, 0)
    p = 1.0 / H**2
    behavior = Policy(tuple(np.tile([p, 1 - p], (3, 1)) for _ in range(H)))
    return ExampleInstance(mtm, scheme, evaluation, behavior)


def example_mdp(horizon: int) -> MarkovDecisionProcess:
    """The exponential-gap transition model with a default reward.

    Rewards are ±1-valued with mean 1/horizon in the absorbing state on every layer
    but the last, so values stay in [0, 1] and the last layer carries no
    reward (which the trajectory conversion requires).
    """
    H = horizon
    inst = example_instance(H)
    means = []
    for h in range(H):
        r = np.zeros((3, 2))
        if h < H - 1:
            r[2, :] = 1.0 / H
        means.append(r)
    return MarkovDecisionProcess.with_mean_rewards(inst.mtm, means, plus_minus=True)


def example_problem(horizon: int, epsilon: float = 1 / 15) -> OPEProblem:
    inst = example_instance(horizon)
    m = example_mdp(horizon)
    mu = admissible_distribution(m, inst.behavior)
    q = value(m, inst.evaluation).q
    return OPEProblem(m, inst.evaluation, mu, DataKind.ADMISSIBLE, inst.behavior,
                      (q,), (w_function(m, mu, inst.evaluation, q),), epsilon, True, f"example-H{horizon}",
                      inst.scheme)


# --------------------------------------------------------------------------
# aggregated pair

@dataclass(frozen=True)
class AggregatedPair:
    mdps: tuple[MarkovDecisionProcess, MarkovDecisionProcess]
    evaluation: Policy                 # on cells
    witness: AggregatedConcentrability
    scheme: AggregationScheme
    reward_level: float
    undefined: tuple = ()


def _cell_actions(scheme: AggregationScheme, evaluation: Policy) -> list[np.ndarray]:
    acts = evaluation.greedy()
    return [np.array([acts[h][cell[0]] for cell in scheme.cells(h)], dtype=int)
            for h in range(len(scheme.labels))]


def aggregated_pair(mtm: MarkovTransitionModel, scheme: AggregationScheme, mu: OfflineDistribution,
                    evaluation: Policy, epsilon: float) -> AggregatedPair:
    """Two aggregated MDPs sharing dynamics, with opposite rewards on the witness set."""
    if not evaluation.deterministic:
        raise InvariantError("evaluation policy must be deterministic")
    check_policy_constant_on_cells(scheme, evaluation, strict=True)
    agg = aggregate(mtm, mu, scheme, evaluation)
    witness = aggregated_concentrability(agg, epsilon, exact=True)
    if not witness.feasible:
        raise InfeasibleError(f"no cell set carries aggregated occupancy >= {epsilon}")
    H = mtm.horizon
    h_star, cells = witness.layer, list(witness.cells)
    level = epsilon / (2 * H * float(agg.occupancy[h_star][cells].sum()))
    trans, undefined = aggregate_actions(mtm, mu, scheme)
    cell_act = _cell_actions(scheme, evaluation)
    sizes = scheme.n_cells
    means = [np.zeros((c, mtm.n_actions)) for c in sizes]
    means[h_star][cells, cell_act[h_star][cells]] = level
    bar_mtm = MarkovTransitionModel(sizes, mtm.n_actions, trans, agg.initial)
    m1 = MarkovDecisionProcess.with_mean_rewards(bar_mtm, means)
    m2 = MarkovDecisionProcess.with_mean_rewards(bar_mtm, [-r for r in means])
    bar_eval = Policy.from_actions(cell_act, mtm.n_actions)
    return AggregatedPair((m1, m2), bar_eval, witness, scheme, level, undefined)


# --------------------------------------------------------------------------
# latent pair

@dataclass(frozen=True)
class LatentPair:
    base: MarkovTransitionModel
    scheme: AggregationScheme          # partition of the base states
    offline_base: OfflineDistribution
    epsilon: float
    aggregated: AggregatedPair
    mdps: tuple[MarkovDecisionProcess, MarkovDecisionProcess]
    offline: OfflineDistribution       # mu' on the augmented states
    evaluation: Policy                 # on the augmented states
    augmented_scheme: AggregationScheme
    functions: tuple[tuple[np.ndarray, ...], tuple[np.ndarray, ...]]
    w_tables: tuple[np.ndarray, np.ndarray]

    @property
    def horizon(self) -> int:
        return self.base.horizon

    def extra_states(self, h: int) -> tuple[int, int, int]:
        """Indices of the three added states (plus, minus, sink) in layer h."""
        s = self.base.layer_sizes[h]
        return s, s + 1, s + 2

    def problem(self, i: int) -> OPEProblem:
        return OPEProblem(self.mdps[i], self.evaluation, self.offline, DataKind.GENERAL, None,
                          self.functions, self.w_tables, self.epsilon, True, f"latent-{i + 1}",
                          self.augmented_scheme)

    def transition_balance(self) -> tuple[float, float]:
        """Largest gap between the two models' cell-averaged transitions.

        Returns ``(gap on original targets, gap on the plus/minus states)``;
        averages weight each state by ``mu(z | cell, a)``.
        """
        gap_orig = gap_extra = 0.0
        H = self.horizon
        t1, t2 = self.mdps[0].transitions, self.mdps[1].transitions
        for h in range(min(H - 1, len(self.offline_base.layers))):
            mu = self.offline_base.layers[h]
            s_next = self.base.layer_sizes[h + 1]
            for cell in self.scheme.cells(h):
                for a in range(self.base.n_actions):
                    w = mu[cell, a]
                    if w.sum() <= 0:
                        continue
                    w = w / w.sum()
                    diff = np.abs(w @ t1[h][cell, a] - w @ t2[h][cell, a])
                    gap_orig = max(gap_orig, float(diff[:s_next].max()) if s_next else 0.0)
                    gap_extra = max(gap_extra, float(diff[s_next:].max()))
        return gap_orig, gap_extra


def latent_pair(mtm: MarkovTransitionModel, scheme: AggregationScheme, mu: OfflineDistribution,
                evaluation: Policy, epsilon: float) -> LatentPair:
    """Two latent MDPs whose Q-functions are constant on cells.

    Every layer gains a plus state (reward +1), a minus state (reward -1) and
    a sink (reward 0); all three move to the next sink.  Base transitions are
    scaled by ``1 - 2/H`` and the remaining ``2/H`` is split between the plus
    and minus states so that each base state inherits its cell's aggregated
    value.
    """
    H = mtm.horizon
    if H < 3:
        raise InvariantError("latent pair needs horizon >= 3")
    pair = aggregated_pair(mtm, scheme, mu, evaluation, epsilon)
    bar_eval = pair.evaluation
    bar_values = [value(m, bar_eval).v for m in pair.mdps]
    bar_trans = pair.mdps[0].transitions
    A = mtm.n_actions
    shrink = 1.0 - 2.0 / H
    sizes = tuple(s + 3 for s in mtm.layer_sizes)

    mdps = []
    for i in range(2):
        vbar = bar_values[i]
        trans = []
        for h in range(H - 1):
            s, s_next = mtm.layer_sizes[h], mtm.layer_sizes[h + 1]
            lab_next = scheme.labels[h + 1]
            t = np.zeros((s + 3, A, s_next + 3))
            base = mtm.transitions[h]
            agg_part = bar_trans[h][scheme.labels[h]] @ vbar[h + 1]       # (s, A)
            direct = base @ vbar[h + 1][lab_next]                       # (s, A)
            delta = 0.5 * (agg_part - shrink * direct)
            t[:s, :, :s_next] = shrink * base
            t[:s, :, s_next] = delta + 1.0 / H
            t[:s, :, s_next + 1] = -delta + 1.0 / H
            t[s:, :, s_next + 2] = 1.0
            trans.append(t)
        means = []
        for h in range(H):
            s = mtm.layer_sizes[h]
            r = np.zeros((s + 3, A))
            r[:s] = pair.mdps[i].rewards[h].mean[scheme.labels[h]]
            r[s] = 1.0
            r[s + 1] = -1.0
            means.append(r)
        init = np.concatenate([mtm.initial, np.zeros(3)])
        aug = MarkovTransitionModel(sizes, A, tuple(trans), init)
        mdps.append(MarkovDecisionProcess.with_mean_rewards(aug, means, plus_minus=True))

    acts = evaluation.greedy()
    aug_eval = Policy.from_actions([np.concatenate([acts[h], [0, 0, 0]]) for h in range(H)], A)
    mu_layers = []
    for h, layer in enumerate(mu.layers):
        extra = np.zeros((3, A))
        extra[:, 0] = 1.0 / 6.0
        mu_layers.append(np.vstack([layer / 2.0, extra]))
    mu_aug = OfflineDistribution(tuple(mu_layers), "explicit", None)
    labels = []
    for h in range(H):
        c = scheme.n_cells[h]
        labels.append(np.concatenate([scheme.labels[h], [c, c + 1, c + 2]]))
    aug_scheme = AggregationScheme(tuple(labels))
    qs = tuple(value(m, aug_eval).q for m in mdps)
    ws = tuple(w_function(m, mu_aug, aug_eval, q) for m, q in zip(mdps, qs))
    return LatentPair(mtm, scheme, mu, epsilon, pair, (mdps[0], mdps[1]), mu_aug, aug_eval,
                      aug_scheme, qs, ws)


def example_latent_pair(horizon: int, epsilon: float = 1 / 15) -> LatentPair:
    inst = example_instance(horizon)
    mu = admissible_distribution(inst.mtm, inst.behavior)
    return latent_pair(inst.mtm, inst.scheme, mu, inst.evaluation, epsilon)


# --------------------------------------------------------------------------
# block lift

@dataclass(frozen=True)
class BlockLift:
    latent: LatentPair
    pool_sizes: tuple[np.ndarray, ...]          # per layer, per augmented cell
    decoders: tuple[np.ndarray, ...]            # observation -> latent state
    counts: tuple[np.ndarray, ...]              # |X_psi(z)| per latent state
    mdps: tuple[MarkovDecisionProcess, MarkovDecisionProcess]
    offline: OfflineDistribution
    evaluation: Policy
    scheme: AggregationScheme                   # pools as cells
    functions: tuple[tuple[np.ndarray, ...], tuple[np.ndarray, ...]]
    w_tables: tuple[np.ndarray, np.ndarray]

    def problem(self, i: int) -> OPEProblem:
        return OPEProblem(self.mdps[i], self.evaluation, self.offline, DataKind.GENERAL, None,
                          self.functions, self.w_tables, self.latent.epsilon, True, f"lifted-{i + 1}",
                          self.scheme)


def default_pool_sizes(scheme: AggregationScheme, factor: int = 4) -> tuple[np.ndarray, ...]:
    """``factor * |cell|`` observations per cell.

    Far below the pool size that makes decoders statistically hidden; enough
    for every exact identity of the lift.
    """
    return tuple(np.array([factor * len(c) for c in scheme.cells(h)]) for h in range(len(scheme.labels)))


def lift_mdp(m: MarkovDecisionProcess, decoders: Sequence[np.ndarray], counts: Sequence[np.ndarray]
             ) -> MarkovDecisionProcess:
    """Rich-observation copy of ``m``: emission is uniform within each preimage."""
    trans = []
    for h, t in enumerate(m.transitions):
        dec, dec_next = decoders[h], decoders[h + 1]
        trans.append(t[dec][:, :, dec_next] / counts[h + 1][dec_next])
    init = m.initial[decoders[0]] / counts[0][decoders[0]]
    sizes = tuple(d.size for d in decoders)
    mtm = MarkovTransitionModel(sizes, m.n_actions, tuple(trans), init)
    return MarkovDecisionProcess.with_mean_rewards(mtm, [r.mean[decoders[h]] for h, r in enumerate(m.rewards)],
                                                   plus_minus=True)


def block_lift(pair: LatentPair, rng: np.random.Generator,
               pool_sizes: Sequence[np.ndarray] | None = None) -> BlockLift:
    """Lift a latent pair through one randomly drawn decoder.

    ``pool_sizes[h][c]`` observations are allotted to augmented cell c of
    layer h and split evenly among its latent states.
    """
    scheme = pair.augmented_scheme
    if pool_sizes is None:
        base_pools = default_pool_sizes(pair.scheme)
        pool_sizes = tuple(np.concatenate([p, [1, 1, 1]]) for p in base_pools)
    pool_sizes = tuple(np.asarray(p, dtype=int) for p in pool_sizes)
    decoders, counts, labels = [], [], []
    for h in range(pair.horizon):
        dec, lab = [], []
        cnt = np.zeros(scheme.labels[h].size, dtype=int)
        for c, members in enumerate(scheme.cells(h)):
            size = int(pool_sizes[h][c])
            if size % len(members):
                raise InvariantError(f"pool of cell {c} in layer {h} ({size}) is not divisible by {len(members)}")
            assign = np.repeat(members, size // len(members))
            dec.append(rng.permutation(assign))
            lab.append(np.full(size, c))
            cnt[members] = size // len(members)
        decoders.append(np.concatenate(dec))
        labels.append(np.concatenate(lab))
        counts.append(cnt)
    mdps = tuple(lift_mdp(m, decoders, counts) for m in pair.mdps)
    mu = OfflineDistribution(tuple(layer[decoders[h]] / counts[h][decoders[h]][:, None]
                                   for h, layer in enumerate(pair.offline.layers)), "explicit", None)
    evaluation = Policy(tuple(p[decoders[h]] for h, p in enumerate(pair.evaluation.action_dist)))
    # Q is constant on cells, so reading it at one fixed member per cell keeps
    # the lifted class bit-identical across decoders.
    reps = [np.array([c[0] for c in scheme.cells(h)]) for h in range(pair.horizon)]
    functions = tuple(tuple(q[h][reps[h][labels[h]]] for h in range(pair.horizon)) for q in pair.functions)
    return BlockLift(pair, pool_sizes, tuple(decoders), tuple(counts), (mdps[0], mdps[1]), mu, evaluation,
                     AggregationScheme(tuple(labels)), (functions[0], functions[1]), pair.w_tables)


# --------------------------------------------------------------------------
# agnostic families

def _uniform_rows(n_rows: int, targets: np.ndarray, width: int) -> np.ndarray:
    row = np.zeros(width)
    row[targets] = 1.0 / targets.size
    return np.tile(row, (n_rows, 1))


def _pair_problems(mtm_pair, means_pair, evaluation, behavior, name) -> tuple[OPEProblem, OPEProblem]:
    out = []
    for i, (mtm, means) in enumerate(zip(mtm_pair, means_pair)):
        m = MarkovDecisionProcess.with_mean_rewards(mtm, means)
        mu = admissible_distribution(m, behavior)
        out.append(OPEProblem(m, evaluation, mu, DataKind.ADMISSIBLE, behavior, (), None, 0.5, False,
                              f"{name}-{i + 1}"))
    return out[0], out[1]


def agnostic_admissible_instance(scale: int, rng: np.random.Generator) -> tuple[OPEProblem, OPEProblem]:
    """Three layers; the middle layer of 4 scale^2 states is split in two random halves.

    Action 0 leads to the first half, action 1 to the second; reward 1 is paid
    in the first half (kind 1) or the second half (kind 2).
    """
    if scale < 1:
        raise ValueError("scale must be positive")
    width = 4 * scale * scale
    perm = rng.permutation(width)
    halves = (np.sort(perm[: width // 2]), np.sort(perm[width // 2:]))
    t0 = np.zeros((1, 2, width))
    t0[0, 0, halves[0]] = t0[0, 1, halves[1]] = 1.0 / (width // 2)
    t1 = np.ones((width, 2, 1))
    mtm = MarkovTransitionModel((1, width, 1), 2, (t0, t1), np.ones(1))
    means = []
    for i in range(2):
        mid = np.zeros((width, 2))
        mid[halves[i]] = 1.0
        means.append([np.zeros((1, 2)), mid, np.zeros((1, 2))])
    evaluation = Policy.constant(mtm.layer_sizes, 2, 0)
    behavior = Policy.uniform(mtm.layer_sizes, 2)
    return _pair_problems((mtm, mtm), means, evaluation, behavior, "agnostic3")


def agnostic_trajectory_instance(horizon: int, rng: np.random.Generator, half_size: int = 4
                                 ) -> tuple[OPEProblem, OPEProblem]:
    """``horizon`` layers; each layer after the first is split in two random halves.

    Action 0 keeps the current half, action 1 lands uniformly on the next
    layer.  From the start state action 0 enters the first half and action 1
    the second, which keeps the behavior occupancy uniform.  Reward 1 is paid
    on the last layer's first (kind 1) or second (kind 2) half.
    ``half_size`` is far below the size needed for statistical hardness.
    """
    H = horizon
    if H < 2:
        raise ValueError("horizon must be at least 2")
    width = 2 * half_size
    halves = []
    for _ in range(H - 1):
        perm = rng.permutation(width)
        halves.append((np.sort(perm[:half_size]), np.sort(perm[half_size:])))
    trans = []
    t0 = np.zeros((1, 2, width))
    t0[0, 0, halves[0][0]] = t0[0, 1, halves[0][1]] = 1.0 / half_size
    trans.append(t0)
    everything = np.arange(width)
    for h in range(1, H - 1):
        t = np.zeros((width, 2, width))
        for side in range(2):
            src = halves[h - 1][side]
            t[src, 0] = _uniform_rows(src.size, halves[h][side], width)
            t[src, 1] = _uniform_rows(src.size, everything, width)
        trans.append(t)
    mtm = MarkovTransitionModel((1,) + (width,) * (H - 1), 2, tuple(trans), np.ones(1))
    means = []
    for i in range(2):
        layer_means = [np.zeros((s, 2)) for s in mtm.layer_sizes]
        layer_means[-1][halves[-1][i]] = 1.0
        means.append(layer_means)
    evaluation = Policy.constant(mtm.layer_sizes, 2, 0)
    behavior = Policy.uniform(mtm.layer_sizes, 2)
    return _pair_problems((mtm, mtm), means, evaluation, behavior, "agnosticH")
