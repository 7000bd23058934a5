from dataclasses import replace

import pytest

from vhred.presets import PRESETS, Preset, preset


def test_ubuntu_sizes():
    assert preset("ubuntu-hred").sizes == {"encoder": 500, "context": 1000, "decoder": 500,
                                           "embedding": 300}


def test_twitter_vhred():
    p = preset("twitter-vhred")
    assert p.sizes["encoder"] == "1000+1000"
    assert (p.sizes["context"], p.sizes["decoder"], p.sizes["embedding"]) == (1000, 1000, 400)
    assert p.train.kl_ramp_batches == 60000 and p.train.word_drop_rate == 0.25
    assert p.beam_width == 5 and p.model.covariance_scale == 0.1


def test_ubuntu_vhred_ramp():
    assert preset("ubuntu-vhred").train.kl_ramp_batches == 75000


def test_lstm_hidden():
    assert preset("lstm-baseline").hidden == 2000


def test_training_scale_pairs():
    for name, p in PRESETS.items():
        if name == "toy":
            continue
        assert (p.train.learning_rate, p.train.batch_size) in {(1e-4, 40), (2e-4, 80)}
        assert p.train.clip_threshold == 1.0


def test_unknown_preset_lists_names():
    with pytest.raises(KeyError, match="available"):
        preset("nope")


def test_checksum_tracks_content():
    p = preset("toy")
    assert p.checksum == preset("toy").checksum
    changed = Preset(p.name, replace(p.model, emb_dim=17), p.train, vocab_limit=p.vocab_limit)
    assert changed.checksum != p.checksum
    assert len({q.checksum for q in PRESETS.values()}) == len(PRESETS)
