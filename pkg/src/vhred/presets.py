"""Named configurations.

Presets are frozen; ``checksum`` hashes the canonical JSON form, so any edit
to a preset changes the value printed when a run starts.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

from .models import ModelConfig
from .training import TrainConfig

PRESET_VERSION = "1"


@dataclass(frozen=True)
class Preset:
    name: str
    model: ModelConfig
    train: TrainConfig
    beam_width: int = 5
    vocab_limit: int | None = 20000
    version: str = PRESET_VERSION

    def as_dict(self) -> dict:
        return {"name": self.name, "version": self.version, "model": asdict(self.model),
                "train": asdict(self.train), "beam_width": self.beam_width,
                "vocab_limit": self.vocab_limit}

    @property
    def checksum(self) -> str:
        blob = json.dumps(self.as_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @property
    def sizes(self) -> dict:
        m = self.model
        if m.kind == "rnnlm":
            return {"hidden": m.rnnlm_hidden, "embedding": m.emb_dim}
        enc = f"{m.enc_dim}+{m.enc_dim}" if m.bidirectional else m.enc_dim
        out = {"encoder": enc, "context": m.ctx_dim, "decoder": m.dec_dim, "embedding": m.emb_dim}
        if m.kind == "vhred":
            out["latent"] = m.latent_dim
        return out

    @property
    def hidden(self) -> int:
        return self.model.rnnlm_hidden if self.model.kind == "rnnlm" else self.model.dec_dim


# Ubuntu-scale runs use lr 1e-4 with batches of 40, Twitter-scale lr 2e-4 with 80.
_UBUNTU_TRAIN = dict(learning_rate=1e-4, batch_size=40, validate_every=5000)
_TWITTER_TRAIN = dict(learning_rate=2e-4, batch_size=80, validate_every=5000)

_UBUNTU_MODEL = dict(emb_dim=300, enc_dim=500, ctx_dim=1000, dec_dim=500, gate_dim=500,
                     gating="tanh", vocab_size=20004)
_TWITTER_MODEL = dict(emb_dim=400, enc_dim=1000, bidirectional=True, ctx_dim=1000, dec_dim=1000,
                      gate_dim=1000, gating="product", carry_encoder_state=True, vocab_size=20004)

PRESETS: dict[str, Preset] = {
    "ubuntu-hred": Preset("ubuntu-hred", ModelConfig(kind="hred", **_UBUNTU_MODEL),
                          TrainConfig(kl_ramp_batches=0, word_drop_rate=0.0, **_UBUNTU_TRAIN)),
    "ubuntu-vhred": Preset("ubuntu-vhred", ModelConfig(kind="vhred", latent_dim=100, **_UBUNTU_MODEL),
                           TrainConfig(kl_ramp_batches=75000, word_drop_rate=0.25, **_UBUNTU_TRAIN)),
    "twitter-hred": Preset("twitter-hred", ModelConfig(kind="hred", **_TWITTER_MODEL),
                           TrainConfig(kl_ramp_batches=0, word_drop_rate=0.0, **_TWITTER_TRAIN)),
    "twitter-vhred": Preset("twitter-vhred", ModelConfig(kind="vhred", latent_dim=100, **_TWITTER_MODEL),
                            TrainConfig(kl_ramp_batches=60000, word_drop_rate=0.25, **_TWITTER_TRAIN)),
    "lstm-baseline": Preset("lstm-baseline",
                            ModelConfig(kind="rnnlm", rnnlm_cell="lstm", rnnlm_hidden=2000,
                                        emb_dim=300, vocab_size=20004),
                            TrainConfig(kl_ramp_batches=0, word_drop_rate=0.0, **_UBUNTU_TRAIN)),
    "toy": Preset("toy",
                  ModelConfig(kind="vhred", emb_dim=16, enc_dim=32, ctx_dim=32, dec_dim=32,
                              gate_dim=16, latent_dim=8, vocab_size=0),
                  TrainConfig(learning_rate=3e-3, batch_size=32, kl_ramp_batches=1000,
                              word_drop_rate=0.25, validate_every=500, patience=5,
                              max_batches=2000),
                  vocab_limit=None),
}


def preset(name: str) -> Preset:
    try:
        return PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; available: {', '.join(sorted(PRESETS))}") from None
