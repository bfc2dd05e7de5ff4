"""Conformer-lite utterance encoder.

Two stride-2 convolutions subsample time by four, sinusoidal positions are
added, and a stack of conformer blocks follows. Every utterance is encoded on
its own: nothing in one utterance's output depends on another utterance.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import layers as L
from . import tensor as T
from .errors import ContractError, DimensionError, InputTooShortError
from .tensor import Tensor


@dataclass(frozen=True)
class EncoderConfig:
    num_layers: int = 4
    model_dim: int = 64
    num_heads: int = 4
    ff_dim: int = 128
    conv_kernel: int = 3
    feature_dim: int = 16

    def __post_init__(self) -> None:
        if self.model_dim % self.num_heads:
            raise ContractError("model_dim must be divisible by num_heads")
        if self.conv_kernel % 2 == 0:
            raise ContractError("conv_kernel must be odd")


@dataclass
class EncodedBatch:
    outputs: Tensor  # [N, T', model_dim]; frames past lengths[i] are padding
    lengths: np.ndarray

    def __len__(self) -> int:
        return len(self.lengths)

    def select(self, indices) -> EncodedBatch:
        indices = np.asarray(indices, dtype=np.int64)
        lengths = self.lengths[indices]
        width = int(lengths.max()) if len(lengths) else 0
        return EncodedBatch(Tensor(self.outputs.data[indices, :width]), lengths)


def subsampled_length(length: int) -> int:
    """Length after the two stride-2, kernel-3, padding-1 convolutions."""
    for _ in range(2):
        length = (length - 1) // 2 + 1
    return length


def init_encoder(params: L.Params, rng: np.random.Generator, cfg: EncoderConfig, dtype) -> None:
    d = cfg.model_dim
    L.init_linear(params, rng, "enc.sub1", 3 * cfg.feature_dim, d, dtype)
    L.init_linear(params, rng, "enc.sub2", 3 * d, d, dtype)
    for i in range(cfg.num_layers):
        p = f"enc.{i}"
        L.init_layer_norm(params, f"{p}.ff1.ln", d, dtype)
        L.init_glu_ff(params, rng, f"{p}.ff1", d, cfg.ff_dim, dtype)
        L.init_layer_norm(params, f"{p}.att.ln", d, dtype)
        L.init_attention(params, rng, f"{p}.att", d, dtype)
        L.init_layer_norm(params, f"{p}.conv.ln", d, dtype)
        L.init_linear(params, rng, f"{p}.conv.pw1", d, 2 * d, dtype)
        limit = 1.0 / np.sqrt(cfg.conv_kernel)
        params[f"{p}.conv.dw.w"] = Tensor(
            rng.uniform(-limit, limit, (cfg.conv_kernel, d)).astype(dtype), requires_grad=True)
        params[f"{p}.conv.dw.b"] = Tensor(np.zeros(d, dtype=dtype), requires_grad=True)
        L.init_linear(params, rng, f"{p}.conv.pw2", d, d, dtype)
        L.init_layer_norm(params, f"{p}.ff2.ln", d, dtype)
        L.init_glu_ff(params, rng, f"{p}.ff2", d, cfg.ff_dim, dtype)
    L.init_layer_norm(params, "enc.out_ln", d, dtype)


def _valid(lengths: np.ndarray, width: int, dtype) -> np.ndarray:
    return (np.arange(width)[None, :] < lengths[:, None]).astype(dtype)[:, :, None]


def subsample(params: L.Params, features: Tensor, lengths) -> tuple[Tensor, np.ndarray]:
    """[N, T, F] -> ([N, T', d], lengths') with T' = subsampled_length(T)."""
    lengths = np.asarray(lengths, dtype=np.int64)
    if features.ndim != 3 or len(lengths) != features.shape[0]:
        raise DimensionError(f"features {features.shape} do not match {len(lengths)} lengths")
    if (lengths < 4).any():
        raise InputTooShortError(f"utterance lengths must be >= 4, got {lengths.min()}")
    dtype = features.dtype
    features = features * _valid(lengths, features.shape[1], dtype)
    x = T.swish(T.conv1d(features, params["enc.sub1.w"], 2, 1, params["enc.sub1.b"]))
    len1 = (lengths - 1) // 2 + 1
    x = x * _valid(len1, x.shape[1], dtype)
    x = T.swish(T.conv1d(x, params["enc.sub2.w"], 2, 1, params["enc.sub2.b"]))
    len2 = (len1 - 1) // 2 + 1
    return x, len2


def conformer_block(params: L.Params, prefix: str, x: Tensor, lengths: np.ndarray,
                    cfg: EncoderConfig) -> Tensor:
    """Half-step FF -> self-attention -> depthwise conv module -> half-step FF."""
    dtype = x.dtype
    valid = _valid(lengths, x.shape[1], dtype)
    x = x + 0.5 * L.glu_ff(params, f"{prefix}.ff1", L.norm(params, f"{prefix}.ff1.ln", x))

    h = L.norm(params, f"{prefix}.att.ln", x)
    q = L.split_heads(L.dense(params, f"{prefix}.att.q", h), cfg.num_heads)
    k = L.split_heads(L.dense(params, f"{prefix}.att.k", h), cfg.num_heads)
    v = L.split_heads(L.dense(params, f"{prefix}.att.v", h), cfg.num_heads)
    mask = L.padding_mask(lengths, x.shape[1], dtype)
    att = L.merge_heads(L.scaled_dot_attention(q, k, v, mask, kind="encoder_self"))
    x = x + L.dense(params, f"{prefix}.att.o", att)

    h = L.dense(params, f"{prefix}.conv.pw1", L.norm(params, f"{prefix}.conv.ln", x))
    d = x.shape[-1]
    h = h[:, :, :d] * T.sigmoid(h[:, :, d:])
    h = h * valid  # padding frames must not leak into the convolution
    h = T.depthwise_conv1d(h, params[f"{prefix}.conv.dw.w"], 1, cfg.conv_kernel // 2,
                           params[f"{prefix}.conv.dw.b"])
    h = L.dense(params, f"{prefix}.conv.pw2", T.swish(h))
    x = x + h

    x = x + 0.5 * L.glu_ff(params, f"{prefix}.ff2", L.norm(params, f"{prefix}.ff2.ln", x))
    return x


def encode_padded(params: L.Params, cfg: EncoderConfig, features: Tensor, lengths) -> EncodedBatch:
    """Encode a zero-padded batch ``[N, T, F]`` in one pass."""
    x, out_lengths = subsample(params, features, lengths)
    pe = L.sinusoidal_positions(x.shape[1], cfg.model_dim, dtype=x.dtype)
    x = x + pe
    for i in range(cfg.num_layers):
        x = conformer_block(params, f"enc.{i}", x, out_lengths, cfg)
    x = L.norm(params, "enc.out_ln", x)
    return EncodedBatch(x, out_lengths)


def encode(params: L.Params, cfg: EncoderConfig, utterances: list[np.ndarray]) -> EncodedBatch:
    """Encode each ``[T_i, F]`` utterance separately and stack the results.

    Each utterance runs at its own length, so its output is bit-identical to
    encoding it alone. Training uses :func:`encode_padded` instead.
    """
    if not utterances:
        raise ContractError("cannot encode an empty batch")
    outs = []
    for feats in utterances:
        feats = feats.data if isinstance(feats, Tensor) else np.asarray(feats)
        outs.append(encode_padded(params, cfg, Tensor(feats[None]), [feats.shape[0]]))
    return stack_encoded(outs)


def stack_encoded(parts: list[EncodedBatch]) -> EncodedBatch:
    lengths = np.concatenate([p.lengths for p in parts])
    width = int(lengths.max())
    dtype = parts[0].outputs.dtype
    dim = parts[0].outputs.shape[-1]
    if any(p.outputs.requires_grad for p in parts):
        rows = []
        for p in parts:
            pad = width - p.outputs.shape[1]
            o = p.outputs
            if pad:
                o = T.concat([o, Tensor(np.zeros((o.shape[0], pad, dim), dtype=dtype))], axis=1)
            rows.append(o)
        return EncodedBatch(T.concat(rows, axis=0), lengths)
    out = np.zeros((len(lengths), width, dim), dtype=dtype)
    row = 0
    for p in parts:
        n, t = p.outputs.shape[:2]
        out[row:row + n, :t] = p.outputs.data
        row += n
    return EncodedBatch(Tensor(out), lengths)
