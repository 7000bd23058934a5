import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import small_config
from vhred.data import EOU, SOU, UNK, make_rng
from vhred.decoding import (DecodeConfig, as_utterance, beam_search, candidate_ids, draw_latent,
                            rollout, sample_response)
from vhred.diagnostics import random_dialogue
from vhred.models import ModelBundle, hred_forward, rnnlm_nll
from vhred.tensor import ContractError


def make_model(kind, seed, vocab_size=7, scale=1.0):
    m = ModelBundle(small_config(kind, vocab_size=vocab_size, seed=seed))
    m.randomize_parameters(seed, scale)
    return m


def score_of(model, context, seq, z):
    """Summed log-probability of ``seq`` by stepping the decoder one token at a time."""
    s = model.decoder_session(context, z)
    state, prev, total = s.start(1), SOU, 0.0
    for tok in seq:
        logp, state = s.step(state, [prev])
        total += logp[0, tok]
        prev = tok
    return total


def brute_force(model, context, max_tokens, z):
    cand = [int(c) for c in candidate_ids(model.config.vocab_size) if c != EOU]
    best = None
    for n in range(max_tokens):
        for body in itertools.product(cand, repeat=n):
            seq = list(body) + [EOU]
            lp = score_of(model, context, seq, z)
            key = (-lp / len(seq), len(seq), seq)
            best = key if best is None or key < best else best
    return best[2], -best[0]


@pytest.mark.parametrize("kind", ["hred", "vhred", "rnnlm"])
def test_session_matches_teacher_forcing(kind):
    m = make_model(kind, 1, scale=0.5)
    d = random_dialogue(7, 3, make_rng(1, "d"), 1, 4)
    z = draw_latent(m, d[:2], "prior_mean", 0)
    got = -score_of(m, d[:2], d[2][1:], z)
    if kind == "rnnlm":
        _, per = rnnlm_nll(m, [t for u in d for t in u])
        want = per[-(len(d[2]) - 1):].sum()
    else:
        want = hred_forward(m, d)[1]
    assert got == pytest.approx(want, abs=1e-10)


@pytest.mark.parametrize("kind,seed", [(k, s) for k in ("hred", "vhred", "rnnlm") for s in range(3)])
def test_exhaustive_beam_equals_brute_force(kind, seed):
    m = make_model(kind, seed, vocab_size=6)
    ctx = random_dialogue(6, 2, make_rng(seed, "ctx"), 1, 3)
    cfg = DecodeConfig(beam_width=3 ** 4, max_tokens=4, latent_mode="prior_mean")
    res = beam_search(m, ctx, cfg)
    seq, score = brute_force(m, ctx, 4, res.z)
    assert res.tokens == seq and not res.truncated
    assert res.score == pytest.approx(score, abs=1e-12)


def test_width_one_is_greedy():
    m = make_model("vhred", 4, scale=0.7)
    ctx = random_dialogue(7, 2, make_rng(4, "ctx"))
    cfg = DecodeConfig(beam_width=1, max_tokens=12, latent_mode="prior_mean")
    res = beam_search(m, ctx, cfg)
    s = m.decoder_session(ctx, res.z)
    cand = candidate_ids(7)
    state, prev, greedy = s.start(1), SOU, []
    for _ in range(12):
        logp, state = s.step(state, [prev])
        prev = int(cand[np.argmax(logp[0, cand])])
        greedy.append(prev)
        if prev == EOU:
            break
    assert res.tokens == greedy


def test_beam_is_deterministic_and_seeded():
    m = make_model("vhred", 5, scale=0.7)
    ctx = random_dialogue(7, 2, make_rng(5, "ctx"))
    cfg = DecodeConfig(beam_width=3, max_tokens=8, seed=11)
    a, b = beam_search(m, ctx, cfg), beam_search(m, ctx, cfg)
    assert a.tokens == b.tokens and a.score == b.score
    np.testing.assert_array_equal(a.z, b.z)
    other = beam_search(m, ctx, DecodeConfig(beam_width=3, max_tokens=8, seed=12))
    assert not np.array_equal(a.z, other.z)


def test_beam_never_emits_reserved_tokens():
    m = make_model("hred", 6, scale=1.0)
    m.out_b.data[UNK] = 50.0
    res = beam_search(m, random_dialogue(7, 1, make_rng(6, "ctx")), DecodeConfig(max_tokens=6))
    assert UNK not in res.tokens and SOU not in res.tokens and 0 not in res.tokens


def test_truncated_when_nothing_finishes():
    m = ModelBundle(small_config("hred"), init=False)
    m.out_b.data[EOU] = -1e9
    res = beam_search(m, [[SOU, 4, EOU]], DecodeConfig(beam_width=2, max_tokens=3))
    assert res.truncated and len(res.tokens) == 3


def test_empty_context_rejected():
    with pytest.raises(ContractError):
        beam_search(make_model("hred", 0), [], DecodeConfig())


def test_bad_config_rejected():
    with pytest.raises(ValueError):
        DecodeConfig(beam_width=0)
    with pytest.raises(ValueError):
        DecodeConfig(latent_mode="posterior")


def _fixed_softmax_model():
    m = ModelBundle(small_config("hred"), init=False)
    m.out_b.data[:] = -1e9
    m.out_b.data[[4, 5, 6]] = np.log([0.7, 0.2, 0.1])
    return m


def test_sampling_frequencies():
    m = _fixed_softmax_model()
    ctx = [[SOU, 4, EOU]]
    draws = [sample_response(m, ctx, seed=s, max_tokens=1)[0] for s in range(10**4)]
    freq = np.bincount(draws, minlength=7)[4:] / len(draws)
    assert np.all(np.abs(freq - [0.7, 0.2, 0.1]) <= 0.02)


def test_cold_sampling_is_greedy():
    m = make_model("vhred", 7, scale=0.7)
    ctx = random_dialogue(7, 2, make_rng(7, "ctx"))
    z = draw_latent(m, ctx, "prior_mean", 0)
    greedy = beam_search(m, ctx, DecodeConfig(beam_width=1, max_tokens=10), z=z).tokens
    for s in range(5):
        assert sample_response(m, ctx, temperature=1e-6, seed=s, max_tokens=10, z=z) == greedy


def test_sampling_reproducible():
    m = make_model("vhred", 8, scale=0.7)
    ctx = random_dialogue(7, 2, make_rng(8, "ctx"))
    assert sample_response(m, ctx, seed=3) == sample_response(m, ctx, seed=3)


def test_rollout_chains_beam_search():
    m = make_model("vhred", 9, scale=0.7)
    ctx = random_dialogue(7, 2, make_rng(9, "ctx"))
    cfg = DecodeConfig(beam_width=3, max_tokens=6, seed=2)
    one = rollout(m, ctx, 1, cfg)
    assert one[0].tokens == beam_search(m, ctx, cfg).tokens
    three = rollout(m, ctx, 3, cfg)
    assert len(three) == 3
    grown = [list(u) for u in ctx]
    for res in three:
        manual = beam_search(m, grown, cfg)
        assert manual.tokens == res.tokens
        grown.append(as_utterance(manual.tokens))
    assert len(grown) == len(ctx) + 3


@given(st.lists(st.integers(4, 9), max_size=5))
def test_as_utterance_wraps(body):
    assert as_utterance(body + [EOU]) == [SOU] + body + [EOU]
