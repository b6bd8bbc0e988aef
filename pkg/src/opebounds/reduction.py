"""Reduction from admissible data to trajectory data.

``replicate`` stretches every transition of a layered MDP into a block of K
sub-layers; ``convert`` stitches K admissible tuples per layer into one
trajectory of the stretched MDP; ``reduce_and_evaluate`` chains the two and
hands the trajectories to any trajectory-data estimator.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .mdp import (
    InvariantError,
    MarkovDecisionProcess,
    MarkovTransitionModel,
    Policy,
    RewardTable,
    TrajectoryBatch,
    occupancy,
)
from .offline import DataKind, LayerTuples, OfflineDataset, admissible_distribution
from .instances import OPEProblem


class ConversionError(RuntimeError):
    """A block asked for more fresh tuples than it holds."""


def deviation_policy(evaluation: Policy, n_actions: int) -> list[np.ndarray]:
    """Lowest action different from the evaluation action, per state."""
    if n_actions < 2:
        raise InvariantError("no deviation action exists with a single action")
    return [np.where(a == 0, 1, 0) for a in evaluation.greedy()]


@dataclass(frozen=True)
class ReplicatedProblem:
    source: OPEProblem
    copies: int
    problem: OPEProblem                    # the stretched problem
    deviation: tuple[np.ndarray, ...]      # per original layer
    behavior_marginals: tuple[np.ndarray, ...]

    @property
    def horizon(self) -> int:
        return (self.source.mdp.horizon - 1) * self.copies + 1

    def layer(self, h: int, k: int) -> int:
        """Stretched layer of sub-layer k (1-based) of original layer h (0-based)."""
        return h * self.copies + k - 1

    def block(self, t: int) -> tuple[int, int]:
        """Inverse of ``layer``; the final layer reports k = K."""
        H = self.source.mdp.horizon
        if t == self.horizon - 1:
            return H - 1, self.copies
        return t // self.copies, t % self.copies + 1

    def lift_q(self, q: Sequence[np.ndarray]) -> tuple[np.ndarray, ...]:
        """Stretched Q-table of a source Q-table."""
        acts = self.source.evaluation.greedy()
        out = []
        for t in range(self.horizon):
            h, k = self.block(t)
            if k == self.copies:
                out.append(np.array(q[h], dtype=float))
                continue
            idx = np.arange(q[h].shape[0])
            on_policy = q[h][idx, acts[h]]
            table = np.full(q[h].shape, float(self.behavior_marginals[h] @ on_policy))
            table[idx, acts[h]] = on_policy
            out.append(table)
        return tuple(out)


def replicate(problem: OPEProblem, copies: int) -> ReplicatedProblem:
    """Stretch each of the first H-1 layers into ``copies`` sub-layers.

    Inside a block the evaluation action keeps the state and any other action
    redraws it from the behavior occupancy of that layer; the last sub-layer
    moves with the original dynamics and pays the original reward.  The final
    layer is not stretched and keeps its reward and behavior action.
    """
    K = copies
    if K < 1:
        raise ValueError("copies must be at least 1")
    if problem.behavior is None:
        raise InvariantError("replication needs the behavior policy of an admissible problem")
    if not problem.evaluation.deterministic:
        raise InvariantError("evaluation policy must be deterministic")
    m, H, A = problem.mdp, problem.mdp.horizon, problem.mdp.n_actions
    dev = deviation_policy(problem.evaluation, A)
    acts = problem.evaluation.greedy()
    marg = occupancy(m, problem.behavior).states
    sizes, trans, rewards, eval_d, beh_d = [], [], [], [], []
    for h in range(H - 1):
        s = m.layer_sizes[h]
        loop = np.empty((s, A, s))
        loop[:] = marg[h][None, None, :]
        loop[np.arange(s), acts[h]] = np.eye(s)
        mix = 0.5 * problem.evaluation.action_dist[h]
        mix[np.arange(s), dev[h]] += 0.5
        for k in range(1, K + 1):
            sizes.append(s)
            eval_d.append(problem.evaluation.action_dist[h])
            if k < K:
                trans.append(loop)
                rewards.append(RewardTable.zeros(s, A))
                beh_d.append(mix)
            else:
                trans.append(m.transitions[h])
                rewards.append(m.rewards[h])
                beh_d.append(problem.behavior.action_dist[h])
    sizes.append(m.layer_sizes[-1])
    rewards.append(m.rewards[-1])
    eval_d.append(problem.evaluation.action_dist[-1])
    beh_d.append(problem.behavior.action_dist[-1])
    mtm = MarkovTransitionModel(tuple(sizes), A, tuple(trans), m.initial)
    mdp = MarkovDecisionProcess(mtm, tuple(rewards))
    evaluation, behavior = Policy(tuple(eval_d)), Policy(tuple(beh_d))
    mu = admissible_distribution(mdp, behavior)
    shell = ReplicatedProblem(problem, K, problem, tuple(dev), tuple(marg))
    functions = tuple(shell.lift_q(f) for f in problem.functions)
    stretched = OPEProblem(mdp, evaluation, mu, DataKind.TRAJECTORY, behavior, functions, None,
                           problem.epsilon, problem.realizable, f"{problem.name}-K{K}")
    return ReplicatedProblem(problem, K, stretched, tuple(dev), tuple(marg))


def convert(blocks: Sequence[LayerTuples], evaluation_actions: Sequence[np.ndarray],
            deviation_actions: Sequence[np.ndarray], copies: int, rng: np.random.Generator) -> TrajectoryBatch:
    """Stitch admissible tuples into stretched trajectories.

    With K = ``copies``, ``blocks[h]`` holds ``n*K`` tuples of original layer h (h < H-1); tuples
    ``j*K ... j*K+K-1`` feed trajectory j.  Inside a block a fair coin picks
    the evaluation action (stay) or the deviation action (jump to the state
    of the next unused tuple); the last sub-layer replays the action, reward
    and next state of the current tuple.  The final layer is left unobserved
    (action -1, reward 0).
    """
    K = copies
    n_layers = len(blocks)
    if n_layers == 0:
        raise ValueError("need at least one block")
    size = len(blocks[0])
    if size % K or any(len(b) != size for b in blocks):
        raise ValueError(f"every layer must supply the same multiple of K={K} tuples")
    n = size // K
    T = n_layers * K + 1
    states = np.zeros((n, T), dtype=int)
    actions = np.full((n, T), -1, dtype=int)
    rewards = np.zeros((n, T))
    base = np.arange(n) * K
    x = blocks[0].states[base]
    for h, tup in enumerate(blocks):
        l = np.zeros(n, dtype=int)
        for k in range(K - 1):
            t = h * K + k
            states[:, t] = x
            deviate = rng.random(n) < 0.5
            a = np.where(deviate, deviation_actions[h][x], evaluation_actions[h][x])
            actions[:, t] = a
            l = l + deviate
            if np.any(l >= K):
                raise ConversionError(f"block {h} ran out of tuples")
            x = np.where(deviate, tup.states[base + l], x)
        t = h * K + K - 1
        states[:, t] = x
        pick = base + l
        actions[:, t] = tup.actions[pick]
        rewards[:, t] = tup.rewards[pick]
        x = tup.next_states[pick]
    states[:, -1] = x
    return TrajectoryBatch(states, actions, rewards)


def in_bad_event(trajectories: TrajectoryBatch, evaluation_actions: Sequence[np.ndarray], copies: int) -> np.ndarray:
    """True for trajectories in which some block never deviates from the evaluation action.

    ``evaluation_actions`` is indexed by original layer.
    """
    K = copies
    n, T = trajectories.states.shape
    n_blocks = (T - 1) // K
    bad = np.zeros(n, dtype=bool)
    for h in range(n_blocks):
        stuck = np.ones(n, dtype=bool)
        for k in range(K - 1):
            t = h * K + k
            stuck &= trajectories.actions[:, t] == evaluation_actions[h][trajectories.states[:, t]]
        bad |= stuck
    return bad


def bad_event_probability(horizon: int, copies: int) -> float:
    """Exact probability of the bad event under fair coins."""
    return 1.0 - (1.0 - 0.5 ** (copies - 1)) ** (horizon - 1)


def bad_event_bound(horizon: int, copies: int) -> float:
    return horizon * 2.0 ** (-copies + 1)


TrajectoryEstimator = Callable[[TrajectoryBatch, OPEProblem, np.random.Generator], float]


def reduce_and_evaluate(data: OfflineDataset | Sequence[LayerTuples], replicated: ReplicatedProblem,
                        estimator: TrajectoryEstimator, rng: np.random.Generator) -> float:
    """Convert ``copies*n`` admissible tuples per layer into n trajectories and estimate.

    The source problem must pay no reward on its last layer, which converted
    trajectories never observe.
    """
    layers = data.tuples() if isinstance(data, OfflineDataset) else tuple(data)
    src = replicated.source
    H = src.mdp.horizon
    if np.any(src.mdp.rewards[-1].mean != 0):
        raise InvariantError("the last layer must carry zero reward for the reduction")
    if len(layers) < H - 1:
        raise ValueError(f"need tuples for {H - 1} layers, got {len(layers)}")
    layers = layers[: H - 1]
    if any(len(l) % replicated.copies for l in layers):
        raise ValueError(f"dataset size per layer must be a multiple of copies={replicated.copies}")
    n = min(len(l) for l in layers) // replicated.copies
    layers = [l.take(np.arange(n * replicated.copies)) for l in layers]
    traj = convert(layers, src.evaluation.greedy(), replicated.deviation, replicated.copies, rng)
    return float(estimator(traj, replicated.problem, rng))


def oracle_estimator(trajectories: TrajectoryBatch, problem: OPEProblem, rng: np.random.Generator) -> float:
    return problem.true_value()


def is_estimator(trajectories: TrajectoryBatch, problem: OPEProblem, rng: np.random.Generator) -> float:
    from .mdp import is_estimate

    return is_estimate(trajectories, problem.evaluation, problem.behavior)


def bvft_estimator(trajectories: TrajectoryBatch, problem: OPEProblem, rng: np.random.Generator) -> float:
    from .bvft import ValueFunctionClass, bvft_select

    data = OfflineDataset(DataKind.TRAJECTORY, (), trajectories)
    F = ValueFunctionClass.from_q(problem.functions, problem.evaluation)
    return bvft_select(data, F, problem.evaluation, problem.mdp.initial, rng).estimate
