"""Print the value gap, balance residuals and concentrability of the latent pair per horizon."""
import argparse

from opebounds.aggregation import standard_concentrability
from opebounds.instances import example_latent_pair
from opebounds.mdp import value


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--horizons", type=int, nargs="+", default=[3, 4, 6, 8])
    ap.add_argument("--epsilon", type=float, default=1 / 15)
    args = ap.parse_args()

    print("H  V1-V2      eps/H      balance(base)  balance(plus/minus)  C(model 1)")
    for H in args.horizons:
        pair = example_latent_pair(H, args.epsilon)
        v1, v2 = (value(m, pair.evaluation).initial_value for m in pair.mdps)
        orig, extra = pair.transition_balance()
        c = standard_concentrability(pair.mdps[0], pair.offline, pair.evaluation)
        print(f"{H:<2} {v1 - v2:<10.6f} {args.epsilon / H:<10.6f} {orig:<14.2e} {extra:<20.4g} {c:.6g}")


if __name__ == "__main__":
    main()
