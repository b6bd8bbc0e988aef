"""State aggregation, aggregated dynamics and concentrability coefficients."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .mdp import InvariantError, MarkovDecisionProcess, MarkovTransitionModel, Policy, max_reach_probability, occupancy
from .offline import OfflineDistribution

EXACT_SEARCH_LIMIT = 20
_TIE_RTOL = 1e-12


def _mtm(m) -> MarkovTransitionModel:
    return m.mtm if isinstance(m, MarkovDecisionProcess) else m


@dataclass(frozen=True)
class AggregationScheme:
    """Per-layer partition; ``labels[h][x]`` is the cell of state x in layer h.

    Cell ids are contiguous from 0 within every layer.
    """

    labels: tuple[np.ndarray, ...]

    def __post_init__(self):
        labels = tuple(np.asarray(l, dtype=int) for l in self.labels)
        for h, l in enumerate(labels):
            if l.size and (l.min() < 0 or set(np.unique(l)) != set(range(l.max() + 1))):
                raise InvariantError(f"cell ids of layer {h} are not contiguous from 0")
        object.__setattr__(self, "labels", labels)

    @property
    def n_cells(self) -> tuple[int, ...]:
        return tuple(int(l.max()) + 1 if l.size else 0 for l in self.labels)

    def cells(self, h: int) -> list[np.ndarray]:
        return [np.flatnonzero(self.labels[h] == c) for c in range(self.n_cells[h])]

    def indicator(self, h: int) -> np.ndarray:
        """Membership matrix of shape ``(S_h, C_h)``."""
        out = np.zeros((self.labels[h].size, self.n_cells[h]))
        out[np.arange(self.labels[h].size), self.labels[h]] = 1.0
        return out

    def validate(self, layer_sizes: Sequence[int]) -> None:
        if len(self.labels) != len(layer_sizes):
            raise InvariantError("aggregation scheme layer count does not match horizon")
        for h, (l, s) in enumerate(zip(self.labels, layer_sizes)):
            if l.size != s:
                raise InvariantError(f"aggregation layer {h} labels {l.size} states, layer has {s}")

    @classmethod
    def from_cells(cls, cells: Sequence[Sequence[Sequence[int]]], layer_sizes: Sequence[int]) -> "AggregationScheme":
        labels = []
        for h, layer in enumerate(cells):
            lab = np.full(layer_sizes[h], -1)
            for c, members in enumerate(layer):
                if np.any(lab[list(members)] >= 0):
                    raise InvariantError(f"cells overlap in layer {h}")
                lab[list(members)] = c
            if np.any(lab < 0):
                raise InvariantError(f"cells do not cover layer {h}")
            labels.append(lab)
        return cls(tuple(labels))

    @classmethod
    def singletons(cls, layer_sizes: Sequence[int]) -> "AggregationScheme":
        return cls(tuple(np.arange(s) for s in layer_sizes))

    @classmethod
    def single_cell(cls, layer_sizes: Sequence[int]) -> "AggregationScheme":
        return cls(tuple(np.zeros(s, dtype=int) for s in layer_sizes))


@dataclass(frozen=True)
class AggregatedModel:
    scheme: AggregationScheme
    transitions: tuple[np.ndarray, ...]       # (C_h, C_{h+1})
    initial: np.ndarray
    occupancy: tuple[np.ndarray, ...]
    offline_mass: tuple[np.ndarray, ...] | None  # nu-bar, only for deterministic policies
    undefined_cells: tuple[tuple[int, int], ...] = ()

    @property
    def partially_defined(self) -> bool:
        return bool(self.undefined_cells)


def _cell_weights(scheme: AggregationScheme, h: int, weights: np.ndarray) -> np.ndarray:
    return np.bincount(scheme.labels[h], weights=weights, minlength=scheme.n_cells[h])


def aggregate(m, mu: OfflineDistribution, scheme: AggregationScheme, policy: Policy,
              initial_scale: float = 1.0) -> AggregatedModel:
    """Aggregated transition model of ``policy`` with offline weights.

    ``initial_scale`` multiplies the layer-one aggregated occupancy; set it to
    ``1/H`` for the variant normalization used in the upper-bound analysis.
    Cells with zero weight receive a uniform row and are listed in
    ``undefined_cells``.
    """
    mtm = _mtm(m)
    scheme.validate(mtm.layer_sizes)
    n_layers = min(len(mu.layers), mtm.horizon)
    trans, undefined = [], []
    for h in range(min(n_layers, mtm.horizon - 1)):
        w = policy.action_dist[h] * mu.layers[h]                   # (S, A)
        flow = np.einsum("xa,xay->xy", w, mtm.transitions[h])      # (S, S')
        num = scheme.indicator(h).T @ flow @ scheme.indicator(h + 1)
        den = _cell_weights(scheme, h, w.sum(axis=1))
        row = np.empty_like(num)
        for c in range(num.shape[0]):
            if den[c] > 0:
                row[c] = num[c] / den[c]
            else:
                row[c] = 1.0 / num.shape[1]
                undefined.append((h, c))
        trans.append(row)
    init = _cell_weights(scheme, 0, mtm.initial)
    d = [init * initial_scale]
    for t in trans:
        d.append(d[-1] @ t)
    d = d[:n_layers]
    nu = None
    if policy.deterministic:
        acts = policy.greedy()
        nu = tuple(_cell_weights(scheme, h, mu.layers[h][np.arange(mu.layers[h].shape[0]), acts[h]])
                   for h in range(n_layers))
    return AggregatedModel(scheme, tuple(trans), init, tuple(d), nu, tuple(undefined))


def aggregate_actions(m, mu: OfflineDistribution, scheme: AggregationScheme):
    """Action-indexed aggregated transitions, shape ``(C_h, A, C_{h+1})``.

    Returns ``(transitions, undefined)`` where ``undefined`` lists ``(h, cell,
    action)`` triples whose weight vanishes (uniform rows there).
    """
    mtm = _mtm(m)
    out, undefined = [], []
    for h in range(mtm.horizon - 1):
        ind, ind_next = scheme.indicator(h), scheme.indicator(h + 1)
        flow = np.einsum("xa,xay->xay", mu.layers[h], mtm.transitions[h])
        num = np.einsum("xc,xay,yd->cad", ind, flow, ind_next)
        den = ind.T @ mu.layers[h]                                   # (C, A)
        row = np.empty_like(num)
        for c, a in np.ndindex(den.shape):
            if den[c, a] > 0:
                row[c, a] = num[c, a] / den[c, a]
            else:
                row[c, a] = 1.0 / num.shape[2]
                undefined.append((h, c, a))
        out.append(row)
    return tuple(out), tuple(undefined)


def _ratio(num: float, den: float) -> float:
    if den > 0:
        return num / den
    return 0.0 if num == 0 else math.inf


def standard_concentrability(m, mu: OfflineDistribution, evaluation: Policy) -> float:
    """max over layers and pairs of d^pi_e(x,a) / mu(x,a); 0/0 = 0, c/0 = inf."""
    occ = occupancy(_mtm(m), evaluation)
    best = 0.0
    for h, layer in enumerate(mu.layers):
        d = occ.state_actions[h]
        pos = layer > 0
        if np.any((d > 0) & ~pos):
            return math.inf
        if np.any(pos):
            best = max(best, float((d[pos] / layer[pos]).max()))
    return best


def all_policy_concentrability(m, mu: OfflineDistribution) -> float:
    """Concentrability maximized over every policy (Markov, possibly non-stationary)."""
    mtm = _mtm(m)
    best = 0.0
    for h, layer in enumerate(mu.layers):
        for x in range(layer.shape[0]):
            reach = max_reach_probability(mtm, h, x)
            if reach == 0:
                continue
            best = max(best, max(_ratio(reach, float(v)) for v in layer[x]))
    return best


@dataclass(frozen=True)
class AggregatedConcentrability:
    value: float
    layer: int | None
    cells: tuple[int, ...]
    epsilon: float
    exact: bool
    per_layer: tuple[float, ...] = field(default=())

    @property
    def feasible(self) -> bool:
        return self.layer is not None


def _subset_sums(values: np.ndarray) -> np.ndarray:
    """Sums over all subsets; bit i of the index selects element i."""
    sums = np.zeros(1)
    for v in values:
        sums = np.concatenate([sums, sums + v])
    return sums


def _lex_min(masks: np.ndarray) -> tuple[int, ...]:
    """Lexicographically smallest cell tuple among bit masks."""
    rest = np.asarray(masks, dtype=np.int64)
    chosen: list[int] = []
    while not np.any(rest == 0):
        low = rest & -rest
        m = low.min()
        rest = rest[low == m] ^ m
        chosen.append(int(m).bit_length() - 1)
    return tuple(chosen)


def _best_subset_exact(d: np.ndarray, nu: np.ndarray, epsilon: float):
    sd, sn = _subset_sums(d), _subset_sums(nu)
    feasible = sd >= epsilon
    if not np.any(feasible):
        return None
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(sn > 0, sd / np.where(sn > 0, sn, 1.0), np.where(sd > 0, np.inf, 0.0))
    ratio = np.where(feasible, ratio, -np.inf)
    top = ratio.max()
    if math.isinf(top):
        ties = np.flatnonzero(ratio == top)
    else:
        ties = np.flatnonzero(ratio >= top * (1 - _TIE_RTOL))
    cells = _lex_min(ties)
    return float(top), cells


def _best_subset_prefix(d: np.ndarray, nu: np.ndarray, epsilon: float):
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(nu > 0, d / np.where(nu > 0, nu, 1.0), np.where(d > 0, np.inf, 0.0))
    order = sorted(range(d.size), key=lambda i: (-r[i], i))
    best = None
    cd = cn = 0.0
    for j, i in enumerate(order):
        cd += d[i]
        cn += nu[i]
        if cd >= epsilon:
            val = _ratio(cd, cn)
            if best is None or val > best[0]:
                best = (val, tuple(sorted(order[: j + 1])))
    return best


def best_subset(d: np.ndarray, nu: np.ndarray, epsilon: float, exact: bool | None = None):
    """Maximize sum(d[I]) / sum(nu[I]) subject to sum(d[I]) >= epsilon.

    Returns ``(ratio, cells, exact)`` or ``None`` when no subset is feasible.
    """
    d, nu = np.asarray(d, float), np.asarray(nu, float)
    if exact is None:
        exact = d.size <= EXACT_SEARCH_LIMIT
    res = (_best_subset_exact if exact else _best_subset_prefix)(d, nu, epsilon)
    return None if res is None else (res[0], res[1], exact)


def aggregated_concentrability(agg: AggregatedModel, epsilon: float,
                               exact: bool | None = None) -> AggregatedConcentrability:
    """Aggregated concentrability with its witness (layer, cell set).

    Ties go to the lowest layer, then the lexicographically smallest cell set.
    Beyond ``EXACT_SEARCH_LIMIT`` cells the prefix heuristic is used and the
    result is a lower bound (``exact`` is False).
    """
    if not 0 < epsilon <= 1:
        raise ValueError("epsilon must lie in (0, 1]")
    if agg.offline_mass is None:
        raise ValueError("aggregated concentrability needs a deterministic evaluation policy")
    best, where, all_exact, per_layer = -math.inf, None, True, []
    for h, (d, nu) in enumerate(zip(agg.occupancy, agg.offline_mass)):
        res = best_subset(d, nu, epsilon, exact)
        if res is None:
            per_layer.append(math.nan)
            continue
        val, cells, ex = res
        all_exact &= ex
        per_layer.append(val)
        if val > best:
            best, where = val, (h, cells)
    if where is None:
        return AggregatedConcentrability(math.nan, None, (), epsilon, all_exact, tuple(per_layer))
    return AggregatedConcentrability(best, where[0], where[1], epsilon, all_exact, tuple(per_layer))


def check_policy_constant_on_cells(scheme: AggregationScheme, policy: Policy, strict: bool = True) -> None:
    """Reject (or warn about) cells on which a deterministic policy changes action."""
    acts = policy.greedy()
    for h in range(len(scheme.labels)):
        for c, members in enumerate(scheme.cells(h)):
            if np.unique(acts[h][members]).size > 1:
                msg = f"evaluation policy is not constant on cell {c} of layer {h}"
                if strict:
                    raise InvariantError(msg)
                warnings.warn(msg, stacklevel=2)


@dataclass(frozen=True)
class PushforwardConcentrability:
    pushforward: float
    state_factor: float
    action_factor: float


def pushforward_concentrability(m, mu: OfflineDistribution) -> PushforwardConcentrability:
    """Action and next-state coverage factors and their product.

    States without offline mass make the action factor infinite; next-state
    ratios use the offline layers that exist.
    """
    mtm = _mtm(m)
    marg = mu.state_marginals()
    c_a = 0.0
    for h, layer in enumerate(mu.layers):
        if np.any(marg[h] == 0):
            c_a = math.inf
            break
        cond = layer / marg[h][:, None]
        c_a = max(c_a, float(np.max(np.where(cond > 0, 1.0 / np.where(cond > 0, cond, 1.0), np.inf))))

    def worst(num: np.ndarray, den: np.ndarray) -> float:
        num = num.reshape(-1, den.size)
        if np.any((num > 0) & (den == 0)):
            return math.inf
        safe = np.where(den > 0, den, 1.0)
        return float(np.max(np.where(den > 0, num / safe, 0.0)))

    c_x = worst(mtm.initial, marg[0])
    for h in range(min(len(mu.layers) - 1, mtm.horizon - 1)):
        c_x = max(c_x, worst(mtm.transitions[h], marg[h + 1]))
    return PushforwardConcentrability(c_x * c_a, c_x, c_a)


def w_function(m: MarkovDecisionProcess, mu: OfflineDistribution, evaluation: Policy,
               q: Sequence[np.ndarray] | None = None) -> np.ndarray:
    """Per-layer offline-weighted value of the evaluation action."""
    from .mdp import value

    if q is None:
        q = value(m, evaluation).q
    acts = evaluation.greedy()
    out = []
    for h, layer in enumerate(mu.layers):
        idx = np.arange(layer.shape[0])
        out.append(float(layer[idx, acts[h]] @ q[h][idx, acts[h]]))
    return np.array(out)
