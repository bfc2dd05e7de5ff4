"""SICL-AED model: parameters, presets, batched forward and checkpoint I/O."""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import layers as L
from . import objectives as O
from . import tensor as T
from .decoder import DecoderConfig, DecoderKVCache, decoder_forward, init_decoder
from .encoder import EncodedBatch, EncoderConfig, encode, encode_padded, init_encoder
from .errors import ContractError
from .tensor import Tensor
from .vocab import CTC_CLASSES, VOCAB_SIZE

CHECKPOINT_MAGIC = b"SICLCKPT"
CHECKPOINT_VERSION = 1
_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    ctc_weight: float = 0.2

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        return cls(EncoderConfig(**d["encoder"]), DecoderConfig(**d["decoder"]), d.get("ctc_weight", 0.2))


PRESETS = {
    "desk": ModelConfig(),
    # Full-size dimensions, kept for reference, too large for CPU tests.
    "full": ModelConfig(
        EncoderConfig(num_layers=18, model_dim=512, num_heads=8, ff_dim=684, conv_kernel=3, feature_dim=80),
        DecoderConfig(num_layers=6, model_dim=512, num_heads=8, ff_dim=2048, vocab_size=VOCAB_SIZE,
                      max_document_tokens=4096),
    ),
}


class SiclAed:
    """Conformer encoder + SICL decoder + CTC head over named parameters."""

    def __init__(self, config: ModelConfig, params: L.Params):
        if config.encoder.model_dim != config.decoder.model_dim:
            raise ContractError("encoder and decoder model_dim must match")
        self.config = config
        self.params = params

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int = 0, dtype=np.float32) -> SiclAed:
        rng = np.random.default_rng(seed)
        params: L.Params = {}
        init_encoder(params, rng, config.encoder, dtype)
        init_decoder(params, rng, config.decoder, dtype)
        L.init_linear(params, rng, "ctc", config.encoder.model_dim, CTC_CLASSES, dtype)
        return cls(config, params)

    @property
    def dtype(self):
        return self.params["dec.embed"].dtype

    def astype(self, dtype) -> SiclAed:
        return SiclAed(self.config, {k: Tensor(v.data.astype(dtype), requires_grad=True)
                                     for k, v in self.params.items()})

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    # -- forward helpers ---------------------------------------------------
    def encode(self, utterances: list[np.ndarray]) -> EncodedBatch:
        feats = [np.asarray(u, dtype=self.dtype) for u in utterances]
        return encode(self.params, self.config.encoder, feats)

    def encode_padded(self, features: np.ndarray, lengths) -> EncodedBatch:
        return encode_padded(self.params, self.config.encoder,
                             Tensor(np.asarray(features, dtype=self.dtype)), lengths)

    def ctc_log_probs(self, encoded: EncodedBatch) -> Tensor:
        return O.ctc_log_probs(self.params, encoded)

    def decode_step(self, tokens, assignment, encoded: EncodedBatch,
                    cache: DecoderKVCache | None = None, **kw) -> tuple[Tensor, DecoderKVCache]:
        return decoder_forward(self.params, self.config.decoder, tokens, assignment, encoded, cache, **kw)

    def loss(self, batch, loss_cfg: O.HybridLossConfig | None = None) -> tuple[Tensor, O.LossStats, Tensor]:
        """Hybrid loss of a collated document batch; returns (loss, stats, logits)."""
        loss_cfg = loss_cfg or O.HybridLossConfig(self.config.ctc_weight)
        encoded = self.encode_padded(batch.features, batch.frame_lengths)
        logits, _ = decoder_forward(self.params, self.config.decoder, batch.tokens, batch.assignment, encoded)
        ctc_logp = self.ctc_log_probs(encoded)
        loss, stats = O.hybrid_loss(ctc_logp, encoded.lengths, batch.ctc_targets, logits, batch.targets,
                                    batch.loss_mask, loss_cfg, batch.ctc_mask)
        return loss, stats, logits

    # -- checkpoints -------------------------------------------------------
    def save(self, path) -> None:
        save_checkpoint(path, self.config, self.params)

    @classmethod
    def load(cls, path) -> SiclAed:
        config, params = load_checkpoint(path)
        return cls(config, params)


def save_checkpoint(path, config: ModelConfig, params: L.Params) -> None:
    """Layout: magic, u32 version, u32+JSON config, u32 count, tensor table, raw data."""
    names = sorted(params)
    blobs = []
    table = bytearray()
    offset = 0
    for name in names:
        arr = np.ascontiguousarray(params[name].data)
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        code = _DTYPE_CODES.get(arr.dtype)
        if code is None:
            raise ContractError(f"unsupported checkpoint dtype {arr.dtype} for {name}")
        raw = arr.tobytes()
        encoded_name = name.encode("utf-8")
        table += struct.pack("<H", len(encoded_name)) + encoded_name
        table += struct.pack("<BB", code, arr.ndim)
        table += struct.pack(f"<{arr.ndim}I", *arr.shape)
        table += struct.pack("<Q", offset)
        blobs.append(raw)
        offset += len(raw)
    cfg_blob = json.dumps(config.to_dict(), sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(cfg_blob)))
        fh.write(cfg_blob)
        fh.write(struct.pack("<I", len(names)))
        fh.write(bytes(table))
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path) -> tuple[ModelConfig, L.Params]:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ContractError(f"{path}: not a checkpoint (bad magic)")
    pos = 8
    (version,) = struct.unpack_from("<I", data, pos)
    pos += 4
    if version != CHECKPOINT_VERSION:
        raise ContractError(f"{path}: unsupported checkpoint version {version}")
    (cfg_len,) = struct.unpack_from("<I", data, pos)
    pos += 4
    config = ModelConfig.from_dict(json.loads(data[pos:pos + cfg_len].decode("utf-8")))
    pos += cfg_len
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    entries = []
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + name_len].decode("utf-8")
        pos += name_len
        code, ndim = struct.unpack_from("<BB", data, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        (offset,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        entries.append((name, _CODE_DTYPES[code], shape, offset))
    params: L.Params = {}
    for name, dtype, shape, offset in entries:
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype=dtype, count=n, offset=pos + offset).reshape(shape)
        params[name] = Tensor(arr.astype(dtype.newbyteorder("="), copy=True), requires_grad=True)
    return config, params
