"""Small end-to-end experiments shared by the acceptance suite and ``scripts/``."""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

from .data import SyntheticSpec, Vocabulary, encode_corpus, synthesize_corpus
from .decoding import DecodeConfig, beam_search
from .models import ModelBundle
from .presets import preset
from .training import score_corpus, train


def synthetic_corpus(n_dialogues: int, seed: int = 0, **kw):
    raw, labels = synthesize_corpus(SyntheticSpec(n_dialogues=n_dialogues, seed=seed, **kw))
    vocab = Vocabulary.build(raw)
    return encode_corpus(raw, vocab), vocab, labels


def toy_model(vocab: Vocabulary, seed: int = 0) -> ModelBundle:
    p = preset("toy")
    return ModelBundle(replace(p.model, vocab_size=len(vocab), seed=seed), vocab)


@dataclass
class OverfitResult:
    reconstruction: float
    initial: float
    batches: int
    seconds: float


def overfit(n_dialogues: int = 10, max_batches: int = 2000, seed: int = 0) -> OverfitResult:
    """Train the toy preset on a tiny corpus and measure per-token reconstruction.

    Reconstruction is the deterministic (posterior-mean z, no word drop)
    negative log-likelihood per token over the training dialogues.
    """
    corpus, vocab, _ = synthetic_corpus(n_dialogues, seed)
    model = toy_model(vocab, seed)
    cfg = replace(preset("toy").train, max_batches=max_batches, seed=seed,
                  validate_every=10**9, valid_samples=0)
    initial = score_corpus(model, corpus, "posterior_mean")["reconstruction_per_token"]
    t0 = time.perf_counter()
    result = train(model, corpus, corpus, cfg, restore_best=False)
    final = score_corpus(model, corpus, "posterior_mean")["reconstruction_per_token"]
    return OverfitResult(final, initial, len(result.log), time.perf_counter() - t0)


@dataclass
class LatentUsage:
    seed: int
    annealed: bool
    kl: float
    reconstruction: float
    seconds: float
    model: ModelBundle


def latent_usage(seed: int, annealed: bool, n_batches: int = 3000, n_dialogues: int = 2000,
                 eval_dialogues: int = 500) -> LatentUsage:
    """Train a toy VHRED on the 4-topic corpus with or without the two heuristics.

    ``annealed=True``: KL weight ramps over the first half of training and
    25% of decoder inputs are dropped.  ``annealed=False``: KL weight fixed
    at 1, no word drop.  Everything else, seeds included, is shared.  The
    reported KL is the mean per-utterance KL over the first
    ``eval_dialogues`` dialogues after training.
    """
    corpus, vocab, _ = synthetic_corpus(n_dialogues, 0)
    model = toy_model(vocab, seed)
    cfg = replace(preset("toy").train, max_batches=n_batches, seed=seed,
                  kl_ramp_batches=n_batches // 2 if annealed else 0,
                  word_drop_rate=0.25 if annealed else 0.0,
                  validate_every=10**9, valid_samples=0)
    t0 = time.perf_counter()
    train(model, corpus, corpus[:1], cfg, restore_best=False)
    s = score_corpus(model, corpus[:eval_dialogues], "posterior_mean")
    return LatentUsage(seed, annealed, s["kl_per_utterance"], s["reconstruction_per_token"],
                       time.perf_counter() - t0, model)


def distinct_responses(model: ModelBundle, context, n_samples: int = 10, beam_width: int = 5,
                       max_tokens: int = 10) -> list[tuple[int, ...]]:
    """Beam responses for ``n_samples`` prior draws (seeds 0..n-1) of one context."""
    outs = []
    for s in range(n_samples):
        cfg = DecodeConfig(beam_width=beam_width, max_tokens=max_tokens, seed=s)
        outs.append(tuple(beam_search(model, context, cfg).tokens))
    return outs
