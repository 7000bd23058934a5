import numpy as np
import pytest

from vhred.data import make_rng
from vhred.diagnostics import random_dialogue
from vhred.models import ModelBundle, ModelConfig

SMALL = dict(vocab_size=7, emb_dim=3, enc_dim=4, ctx_dim=5, dec_dim=4, gate_dim=3, latent_dim=2,
             rnnlm_hidden=4)


def small_config(kind="vhred", **kw):
    return ModelConfig(kind=kind, **{**SMALL, **kw})


@pytest.fixture
def small_vhred():
    m = ModelBundle(small_config("vhred"))
    m.randomize_parameters(3, 0.5)
    return m


@pytest.fixture
def dialogue():
    return random_dialogue(SMALL["vocab_size"], 3, make_rng(0, "fixture"), 1, 4)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
