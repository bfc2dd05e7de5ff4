import numpy as np
import pytest

from sicl_aed.decoding import BeamConfig, decode_utterance
from sicl_aed.errors import ContractError
from sicl_aed.model import PRESETS, ModelConfig, SiclAed


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_checkpoint_round_trip_reproduces_decoding(tmp_path, tiny_config, dtype, rng):
    model = SiclAed.initialize(tiny_config, seed=2, dtype=dtype)
    model.save(tmp_path / "m.ckpt")
    loaded = SiclAed.load(tmp_path / "m.ckpt")
    assert loaded.config == model.config
    for k, v in model.params.items():
        assert loaded.params[k].dtype == v.dtype and np.array_equal(loaded.params[k].data, v.data)
    feats = rng.normal(size=(20, 16))
    cfg = BeamConfig(max_tokens_per_utterance=6)
    a, b = decode_utterance(model, feats, cfg=cfg), decode_utterance(loaded, feats, cfg=cfg)
    assert a.hypothesis.tokens == b.hypothesis.tokens and a.score == b.score


def test_bad_checkpoint_magic(tmp_path):
    (tmp_path / "x.ckpt").write_bytes(b"NOTACKPT" + bytes(16))
    with pytest.raises(ContractError):
        SiclAed.load(tmp_path / "x.ckpt")


def test_config_dict_round_trip():
    for cfg in PRESETS.values():
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_initialisation_is_seeded(tiny_config):
    a = SiclAed.initialize(tiny_config, seed=4)
    b = SiclAed.initialize(tiny_config, seed=4)
    assert all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)


def test_full_preset_dimensions():
    cfg = PRESETS["full"]
    assert (cfg.encoder.num_layers, cfg.encoder.model_dim, cfg.encoder.num_heads) == (18, 512, 8)
    assert (cfg.decoder.num_layers, cfg.decoder.ff_dim) == (6, 2048)
