"""Numerical checks on small models: gradient check, quadrature marginals, MC bounds."""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from .data import EOU, SOU, Dialogue, make_rng
from .models import ModelBundle, ModelConfig, vhred_elbo_terms
from .tensor import Tensor, grad_check, take_rows

GRADCHECK_SIZES = dict(vocab_size=6, emb_dim=3, enc_dim=4, ctx_dim=4, dec_dim=4, gate_dim=4,
                       latent_dim=2, rnnlm_hidden=4)


def random_dialogue(vocab_size: int, n_utts: int, rng: np.random.Generator,
                    min_len: int = 1, max_len: int = 3) -> Dialogue:
    words = np.arange(4, vocab_size)
    return [[SOU] + [int(w) for w in rng.choice(words, rng.integers(min_len, max_len + 1))] + [EOU]
            for _ in range(n_utts)]


def elbo_gradcheck(config: ModelConfig, seed: int = 0, eps: float = 1e-4, scale: float = 0.5,
                   n_utts: int = 2, max_entries: int | None = None) -> float:
    """Max relative gradient discrepancy of the full objective at a random point.

    Parameters are redrawn at ``scale`` so no gradient sits near zero, noise
    and word-drop masks are frozen, and the objective is the negated bound
    (VHRED) or the total NLL (HRED, RNNLM).
    """
    model = ModelBundle(replace(config, seed=seed))
    model.randomize_parameters(seed, scale)
    rng = make_rng(seed, "gradcheck")
    d = random_dialogue(config.vocab_size, n_utts, rng)
    if config.kind == "vhred":
        noise = rng.standard_normal((n_utts - 1, config.latent_dim))
        keep = [rng.random(len(u) - 1) >= 0.25 for u in d[1:]]
        f = lambda: -vhred_elbo_terms(model, d, 1.0, noise, keep)[1]
    else:
        from .data import Batch
        batch = Batch.from_dialogues([d])
        f = lambda: model.forward_segment(batch, batch.segments[0]).nll.sum()
    return grad_check(f, list(model.params().values()), eps=eps, max_entries=max_entries, seed=seed)


def _target_nll(model: ModelBundle, item: dict, z: np.ndarray) -> np.ndarray:
    k = len(z)
    cond = take_rows(item["ctx"], np.zeros(k, dtype=np.intp))
    tokens = np.repeat(item["tokens"], k, axis=0)
    return model.decoder_nll(cond, tokens, Tensor(z)).data


def log_marginal_quadrature(model: ModelBundle, dialogue: Dialogue, n_points: int = 2000,
                            width: float = 12.0) -> np.ndarray:
    """log p(w_n | w_<n) per target utterance of a one-dimensional-latent VHRED.

    Integrates p(w_n | z, w_<n) N(z; prior) with the trapezoid rule on
    ``n_points`` nodes spanning ``width`` prior standard deviations each side.
    Utterances do not feed z back into the context, so targets integrate
    independently.
    """
    if model.config.latent_dim != 1:
        raise ValueError("quadrature oracle needs latent_dim == 1")
    out = []
    for item in model.conditionals(dialogue):
        mu = float(item["prior"].mean.data.ravel()[0])
        sd = float(np.sqrt(item["prior"].variance.data.ravel()[0]))
        z = np.linspace(mu - width * sd, mu + width * sd, n_points)
        log_prior = -0.5 * ((z - mu) / sd) ** 2 - np.log(sd * np.sqrt(2.0 * np.pi))
        log_f = -_target_nll(model, item, z[:, None]) + log_prior
        w = np.full(n_points, z[1] - z[0])
        w[[0, -1]] *= 0.5
        top = log_f.max()
        out.append(top + np.log(np.sum(w * np.exp(log_f - top))))
    return np.array(out)


def mc_elbo(model: ModelBundle, dialogue: Dialogue, n_samples: int = 10_000,
            seed: int = 0) -> np.ndarray:
    """Single-sample bound estimates (kl_weight 1, no word drop), one per draw."""
    rng = make_rng(seed, "mc_elbo")
    total = np.zeros(n_samples)
    for item in model.conditionals(dialogue):
        post, prior = item["posterior"], item["prior"]
        mu, var = post.mean.data.ravel(), post.variance.data.ravel()
        eps = rng.standard_normal((n_samples, len(mu)))
        z = mu + np.sqrt(var) * eps
        pm, pv = prior.mean.data.ravel(), prior.variance.data.ravel()
        kl = 0.5 * np.sum(np.log(pv / var) + (var + (mu - pm) ** 2) / pv - 1.0)
        total += -_target_nll(model, item, z) - kl
    return total
