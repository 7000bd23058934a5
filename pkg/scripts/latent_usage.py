"""Does KL annealing plus word drop make VHRED use its latent variable?

Trains the toy VHRED on the synthetic 4-topic corpus twice per seed: once
with the KL weight ramped over the first half of training and 25% word drop,
once with the KL weight fixed at 1 and no word drop.  Prints the final KL
per utterance and how many distinct beam responses 10 prior draws give.

    python3 scripts/latent_usage.py --seeds 0 1 2 --batches 3000
"""

import argparse

from vhred.experiments import distinct_responses, latent_usage, synthetic_corpus


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--batches", type=int, default=3000)
    args = ap.parse_args()

    corpus, vocab, labels = synthetic_corpus(2000, 0)
    context = corpus[0][:2]
    print("context:", " | ".join(" ".join(vocab.decode(u)) for u in context))
    print("seed\theuristics\tkl/utt\trecon/token\tdistinct\tseconds")
    for s in args.seeds:
        for annealed in (True, False):
            r = latent_usage(s, annealed, n_batches=args.batches)
            outs = distinct_responses(r.model, context, 10)
            print(f"{s}\t{'on' if annealed else 'off'}\t{r.kl:.4f}\t{r.reconstruction:.4f}\t"
                  f"{len(set(outs))}\t{r.seconds:.0f}", flush=True)
            if annealed:
                for o in sorted(set(outs))[:4]:
                    print("\t  ", " ".join(vocab.decode(o)))


if __name__ == "__main__":
    main()
