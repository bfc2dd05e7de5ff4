import numpy as np
import pytest

from sicl_aed import tensor as T
from sicl_aed.encoder import EncoderConfig, encode, encode_padded, subsampled_length
from sicl_aed.errors import ContractError, InputTooShortError
from sicl_aed.tensor import Tensor


@pytest.mark.parametrize("length", range(4, 40))
def test_subsampled_length_matches_conv_arithmetic(length):
    # two stride-2 kernel-3 padding-1 convolutions applied to a real signal
    x = Tensor(np.ones((1, length, 1)))
    w = Tensor(np.ones((3, 1)))
    y = T.conv1d(T.conv1d(x, w, stride=2, padding=1), w, stride=2, padding=1)
    assert subsampled_length(length) == y.shape[1]


def test_output_shape(tiny_model, rng):
    feats = [rng.normal(size=(n, 16)) for n in (9, 20)]
    enc = tiny_model.encode(feats)
    assert enc.outputs.shape == (2, subsampled_length(20), 8)
    assert list(enc.lengths) == [subsampled_length(9), subsampled_length(20)]


def test_too_short_input_raises(tiny_model, rng):
    with pytest.raises(InputTooShortError):
        tiny_model.encode([rng.normal(size=(3, 16))])


def test_padded_batch_matches_individual_encoding(tiny_model, rng):
    lengths = np.array([9, 23, 14])
    feats = [rng.normal(size=(n, 16)) for n in lengths]
    padded = np.zeros((3, 23, 16))
    for i, f in enumerate(feats):
        padded[i, :len(f)] = f
    batch = tiny_model.encode_padded(padded, lengths)
    alone = tiny_model.encode(feats)
    for i in range(3):
        n = alone.lengths[i]
        np.testing.assert_allclose(batch.outputs.data[i, :n], alone.outputs.data[i, :n], atol=1e-10, rtol=0)


def test_other_utterance_cannot_influence_output(tiny_model, rng):
    a = rng.normal(size=(12, 16))
    ref = tiny_model.encode([a]).outputs.data[0]
    for _ in range(3):
        other = rng.normal(size=(int(rng.integers(4, 30)), 16))
        out = tiny_model.encode([a, other]).outputs.data[0, :len(ref)]
        assert np.array_equal(out, ref)


def test_padding_content_is_ignored(tiny_model, rng):
    feats = rng.normal(size=(1, 20, 16))
    noisy = feats.copy()
    noisy[0, 13:] = 1e3
    a = encode_padded(tiny_model.params, tiny_model.config.encoder, Tensor(feats), np.array([13]))
    b = encode_padded(tiny_model.params, tiny_model.config.encoder, Tensor(noisy), np.array([13]))
    n = a.lengths[0]
    np.testing.assert_allclose(a.outputs.data[0, :n], b.outputs.data[0, :n], atol=1e-10, rtol=0)


def test_config_validation():
    with pytest.raises(ContractError):
        EncoderConfig(model_dim=10, num_heads=4)
    with pytest.raises(ContractError):
        EncoderConfig(conv_kernel=4)


def test_encode_rejects_wrong_feature_dim(tiny_model, rng):
    with pytest.raises(ValueError):
        encode(tiny_model.params, tiny_model.config.encoder, [rng.normal(size=(10, 5))])
