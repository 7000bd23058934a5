"""Beam search, ancestral sampling and multi-turn rollout.

Hypotheses are ranked by summed log-probability divided by the number of
generated tokens, the closing ``</s>`` included.  For VHRED the latent draw for
a response comes from the stream ``make_rng(seed, "latent", len(context))``,
so each turn of a rollout gets a fresh draw and a rollout can be reproduced by
chaining single :func:`beam_search` calls.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import EOU, PAD, SOU, UNK, Dialogue, make_rng
from .models import ModelBundle
from .tensor import ContractError


@dataclass(frozen=True)
class DecodeConfig:
    beam_width: int = 5
    max_tokens: int = 30
    latent_mode: str = "prior_sample"
    seed: int = 0
    allow_unk: bool = False

    def __post_init__(self):
        if self.beam_width < 1:
            raise ValueError("beam_width must be >= 1")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")
        if self.latent_mode not in ("prior_sample", "prior_mean"):
            raise ValueError("latent_mode must be 'prior_sample' or 'prior_mean'")


@dataclass
class BeamHypothesis:
    tokens: list[int]
    logprob: float
    state: np.ndarray = field(repr=False)
    finished: bool = False

    @property
    def score(self) -> float:
        return self.logprob / len(self.tokens)

    def rank_key(self):
        return (-self.score, len(self.tokens), self.tokens)


@dataclass
class BeamResult:
    tokens: list[int]
    score: float
    logprob: float
    truncated: bool
    z: np.ndarray | None = None


def candidate_ids(vocab_size: int, allow_unk: bool = False) -> np.ndarray:
    banned = {PAD, SOU} | (set() if allow_unk else {UNK})
    return np.array([i for i in range(vocab_size) if i not in banned], dtype=np.int64)


def draw_latent(model: ModelBundle, context: Dialogue, mode: str, seed: int):
    if model.kind != "vhred":
        return None
    prior = model.latent_prior(context)
    mean = prior.mean.data.reshape(-1)
    if mode == "prior_mean":
        return mean
    eps = make_rng(seed, "latent", len(context)).standard_normal(mean.shape)
    return mean + np.sqrt(prior.variance.data.reshape(-1)) * eps


def beam_search(model: ModelBundle, context: Dialogue, cfg: DecodeConfig = DecodeConfig(),
                z=None) -> BeamResult:
    """Length-normalized beam search for the next utterance of ``context``.

    Expansion stops once the finished pool holds ``beam_width`` hypotheses and
    no live hypothesis can still beat the worst of them.  A live hypothesis
    with summed log-probability ``s`` can reach at most ``s / max_tokens``
    (log-probabilities are nonpositive and the divisor grows), which keeps the
    rule exact.
    """
    if not context:
        raise ContractError("beam search needs a nonempty context")
    if z is None:
        z = draw_latent(model, context, cfg.latent_mode, cfg.seed)
    session = model.decoder_session(context, z)
    cand = candidate_ids(model.config.vocab_size, cfg.allow_unk)
    live = [BeamHypothesis([], 0.0, session.start(1)[0])]
    done: list[BeamHypothesis] = []
    for step in range(cfg.max_tokens):
        states = np.stack([h.state for h in live])
        prev = [h.tokens[-1] if h.tokens else SOU for h in live]
        logp, new_states = session.step(states, prev)
        totals = np.array([h.logprob for h in live])[:, None] + logp[:, cand]
        flat = totals.reshape(-1)
        # stable descending order; ties resolve by hypothesis rank then token id
        order = np.argsort(-flat, kind="stable")[:cfg.beam_width]
        nxt = []
        for j in order:
            hi, ti = divmod(int(j), len(cand))
            parent, tok = live[hi], int(cand[ti])
            hyp = BeamHypothesis(parent.tokens + [tok], float(flat[j]), new_states[hi], tok == EOU)
            (done if hyp.finished else nxt).append(hyp)
        live = nxt
        if not live:
            break
        if len(done) >= cfg.beam_width:
            worst = min(h.score for h in done)
            if all(h.logprob / cfg.max_tokens < worst for h in live):
                break
    pool, truncated = (done, False) if done else (live, True)
    best = min(pool, key=BeamHypothesis.rank_key)
    return BeamResult(best.tokens, best.score, best.logprob, truncated, z)


def sample_response(model: ModelBundle, context: Dialogue, temperature: float = 1.0,
                    seed: int = 0, max_tokens: int = 30, allow_unk: bool = False,
                    z=None) -> list[int]:
    """Ancestral sampling from the temperature-scaled next-token distribution."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    rng = make_rng(seed, "sample")
    if z is None and model.kind == "vhred":
        prior = model.latent_prior(context)
        z = prior.mean.data.reshape(-1) + np.sqrt(prior.variance.data.reshape(-1)) * \
            rng.standard_normal(model.config.latent_dim)
    session = model.decoder_session(context, z)
    cand = candidate_ids(model.config.vocab_size, allow_unk)
    state = session.start(1)
    tokens: list[int] = []
    prev = SOU
    for _ in range(max_tokens):
        logp, state = session.step(state, [prev])
        scaled = logp[0, cand] / temperature
        scaled -= scaled.max()
        p = np.exp(scaled)
        cdf = np.cumsum(p / p.sum())
        prev = int(cand[min(np.searchsorted(cdf, rng.random(), side="right"), len(cand) - 1)])
        tokens.append(prev)
        if prev == EOU:
            break
    return tokens


def as_utterance(response: Sequence[int]) -> list[int]:
    """Wrap generated tokens as a context utterance ``<s> ... </s>``."""
    body = [t for t in response if t != EOU]
    return [SOU] + body + [EOU]


def rollout(model: ModelBundle, context: Dialogue, n_turns: int,
            cfg: DecodeConfig = DecodeConfig()) -> list[BeamResult]:
    if n_turns < 1:
        raise ValueError("n_turns must be >= 1")
    ctx = [list(u) for u in context]
    out = []
    for _ in range(n_turns):
        res = beam_search(model, ctx, cfg)
        out.append(res)
        ctx.append(as_utterance(res.tokens))
    return out
