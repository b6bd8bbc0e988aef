"""Stretch the chain instance, convert admissible tuples into trajectories and estimate.

Shows the bad-event rate against its bound and the estimates of the three
trajectory estimators for a few replication factors.
"""
import argparse

from opebounds.experiment import generator
from opebounds.instances import example_problem
from opebounds.offline import sample_general
from opebounds.reduction import (
    bad_event_bound,
    bad_event_probability,
    bvft_estimator,
    convert,
    in_bad_event,
    is_estimator,
    oracle_estimator,
    reduce_and_evaluate,
    replicate,
)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--horizon", type=int, default=3)
    ap.add_argument("--replications", type=int, nargs="+", default=[2, 4, 6])
    ap.add_argument("--samples", type=int, default=20_000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    p = example_problem(args.horizon)
    H = args.horizon
    print(f"true value {p.true_value():.4f}")
    for K in args.replications:
        rng = generator(args.seed, K)
        r = replicate(p, K)
        data = sample_general(p.mdp, p.offline, args.samples * K, rng)
        traj = convert(data.tuples()[: H - 1], p.evaluation.greedy(), r.deviation, K, rng)
        bad = in_bad_event(traj, p.evaluation.greedy(), K).mean()
        ests = {name: reduce_and_evaluate(data, r, fn, generator(args.seed, K, i))
                for i, (name, fn) in enumerate([("oracle", oracle_estimator), ("is", is_estimator),
                                                ("bvft", bvft_estimator)])}
        print(f"K={K} horizon={r.horizon} P(E0) emp={bad:.4f} exact={bad_event_probability(H, K):.4f} "
              f"bound={bad_event_bound(H, K):.3f} " + " ".join(f"{k}={v:.4f}" for k, v in ests.items()))


if __name__ == "__main__":
    main()
