"""Compare the Monte-Carlo ELBO with the exact log-marginal on 1-d latent toys.

The log-marginal comes from trapezoid quadrature over z.  A valid bound
never sits above it by more than Monte-Carlo noise; the printed gap shows
how loose the bound is for each random model.

    python3 scripts/bound_check.py --models 5 --scale 0.5
"""

import argparse
import math

from vhred.data import make_rng
from vhred.diagnostics import log_marginal_quadrature, mc_elbo, random_dialogue
from vhred.models import ModelBundle, ModelConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--models", type=int, default=5)
    ap.add_argument("--samples", type=int, default=10_000)
    ap.add_argument("--scale", type=float, default=0.5, help="std of random parameters")
    args = ap.parse_args()
    print("model\tlog p(w)\tELBO\tstderr\tgap")
    for s in range(args.models):
        m = ModelBundle(ModelConfig(kind="vhred", vocab_size=7, emb_dim=3, enc_dim=4, ctx_dim=4,
                                    dec_dim=4, gate_dim=3, latent_dim=1, seed=s))
        m.randomize_parameters(s, args.scale)
        d = random_dialogue(7, 3, make_rng(s, "bound"), 1, 4)
        lp = float(log_marginal_quadrature(m, d).sum())
        draws = mc_elbo(m, d, args.samples, seed=s)
        se = draws.std(ddof=1) / math.sqrt(len(draws))
        print(f"{s}\t{lp:.4f}\t{draws.mean():.4f}\t{se:.4f}\t{lp - draws.mean():.4f}")


if __name__ == "__main__":
    main()
