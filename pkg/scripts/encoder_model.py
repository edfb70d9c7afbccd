#!/usr/bin/env python3
"""
encoder_model.py - Patch-tokenized alternating-attention encoder for SBP/DBP regression

Two input channels (ECG, PPG) of 1250 samples are cut into non-overlapping patches,
projected into a latent space, and processed by pairs of pre-layernorm transformer
blocks: a temporal block (self-attention over patch positions within each channel)
followed by a spatial block (self-attention across the two channels at each patch
position). Tokens are mean-pooled and a single fully connected head emits two values
(SBP, DBP) in normalized target units.

The forward pass is written once against a ``LinearFn`` (name, input -> output), so
the float model, calibration and integer execution all share the same graph.

Model file "BPMDL1":
    magic "BPMDL1", version byte (1),
    config block: 9 little-endian u32 (num_channels, seq_len, patch_len, embed_dim,
        num_block_pairs, num_heads, mlp_ratio, head_outputs, size_tag index),
    target normalization: 4 little-endian f64 (sbp_mean, sbp_sd, dbp_mean, dbp_sd),
    then every weight tensor in canonical order as u64 element count + f32 data.
"""

import math
import struct
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Iterator, Optional

from common import ConfigError, ModelFileError, ShapeError, atomic_write_bytes, log
import numpy as np
from signal_data import NUM_CHANNELS, SEGMENT_SAMPLES
from tensor_numerics import (
    Tensor,
    add,
    default_dtype,
    gelu,
    layernorm,
    matmul,
    mean,
    mul,
    reshape,
    softmax,
    transpose,
    where,
)

MODEL_MAGIC = b"BPMDL1"
MODEL_VERSION = 1
SIZE_TAGS = ("tiny", "small", "medium", "large")
CONFIG_STRUCT = struct.Struct("<9I")
NORM_STRUCT = struct.Struct("<4d")
LENGTH_STRUCT = struct.Struct("<Q")

LinearFn = Callable[[str, Tensor], Tensor]


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelConfig:
    num_channels: int = NUM_CHANNELS
    seq_len: int = SEGMENT_SAMPLES
    patch_len: int = 25
    embed_dim: int = 64
    num_block_pairs: int = 2
    num_heads: int = 4
    mlp_ratio: int = 4
    head_outputs: int = 2
    size_tag: str = "tiny"

    def __post_init__(self):
        if self.num_channels != NUM_CHANNELS:
            raise ConfigError(f"num_channels must be {NUM_CHANNELS}, got {self.num_channels}")
        if self.patch_len < 1 or self.seq_len % self.patch_len != 0:
            raise ConfigError(
                f"seq_len {self.seq_len} is not a multiple of patch_len {self.patch_len}"
            )
        if self.num_heads < 1 or self.embed_dim % self.num_heads != 0:
            raise ConfigError(
                f"embed_dim {self.embed_dim} is not divisible by num_heads {self.num_heads}"
            )
        if self.num_block_pairs < 1:
            raise ConfigError("num_block_pairs must be >= 1")
        if self.mlp_ratio < 1 or self.head_outputs != 2:
            raise ConfigError("mlp_ratio must be >= 1 and head_outputs must be 2")
        if self.size_tag not in SIZE_TAGS:
            raise ConfigError(f"size_tag must be one of {SIZE_TAGS}, got {self.size_tag!r}")

    @property
    def num_patches(self) -> int:
        return self.seq_len // self.patch_len

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def hidden_dim(self) -> int:
        return self.embed_dim * self.mlp_ratio

    def to_dict(self) -> dict:
        return asdict(self)


# Parameter targets quoted for the published sizes are small 3.58M, medium 39.95M and
# large 85.15M; the layouts below land near them and are metadata, not run by tests.
PRESETS: dict[str, ModelConfig] = {
    "tiny": ModelConfig(),
    "small": ModelConfig(embed_dim=192, num_block_pairs=4, num_heads=4, size_tag="small"),
    "medium": ModelConfig(embed_dim=512, num_block_pairs=6, num_heads=8, size_tag="medium"),
    "large": ModelConfig(embed_dim=768, num_block_pairs=6, num_heads=12, size_tag="large"),
}


def preset(name: str) -> ModelConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"Unknown model preset '{name}' (choose from {', '.join(PRESETS)})")


@dataclass(frozen=True)
class TargetNorm:
    """Per-target (mean, sd) used to z-score SBP/DBP for training."""

    sbp_mean: float = 0.0
    sbp_sd: float = 1.0
    dbp_mean: float = 0.0
    dbp_sd: float = 1.0

    @property
    def means(self) -> np.ndarray:
        return np.array([self.sbp_mean, self.dbp_mean])

    @property
    def sds(self) -> np.ndarray:
        return np.array([self.sbp_sd, self.dbp_sd])


# ---------------------------------------------------------------------------
# Parameter layout
# ---------------------------------------------------------------------------

ATTN_PROJECTIONS = ("q", "k", "v", "o")
BLOCK_KINDS = ("temporal", "spatial")


def block_prefixes(cfg: ModelConfig) -> list[str]:
    return [f"blocks.{i}.{kind}" for i in range(cfg.num_block_pairs) for kind in BLOCK_KINDS]


def linear_layers(cfg: ModelConfig) -> dict[str, tuple[int, int]]:
    """Dense projections as name -> (fan_in, fan_out), in canonical order."""
    d, h = cfg.embed_dim, cfg.hidden_dim
    layers = {"patch_embed": (cfg.patch_len, d)}
    for prefix in block_prefixes(cfg):
        for proj in ATTN_PROJECTIONS:
            layers[f"{prefix}.attn.{proj}"] = (d, d)
        layers[f"{prefix}.ffn.fc1"] = (d, h)
        layers[f"{prefix}.ffn.fc2"] = (h, d)
    layers["head"] = (d, cfg.head_outputs)
    return layers


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every weight tensor's shape, in the canonical (serialization) order."""
    d = cfg.embed_dim
    layers = linear_layers(cfg)
    shapes: dict[str, tuple[int, ...]] = {
        "patch_embed.weight": layers["patch_embed"],
        "patch_embed.bias": (d,),
        "pos_embed": (cfg.num_patches, d),
        "chan_embed": (cfg.num_channels, d),
    }
    for prefix in block_prefixes(cfg):
        shapes[f"{prefix}.attn_norm.gain"] = (d,)
        shapes[f"{prefix}.attn_norm.bias"] = (d,)
        for proj in ATTN_PROJECTIONS:
            shapes[f"{prefix}.attn.{proj}.weight"] = (d, d)
            shapes[f"{prefix}.attn.{proj}.bias"] = (d,)
        shapes[f"{prefix}.ffn_norm.gain"] = (d,)
        shapes[f"{prefix}.ffn_norm.bias"] = (d,)
        for fc in ("fc1", "fc2"):
            fan_in, fan_out = layers[f"{prefix}.ffn.{fc}"]
            shapes[f"{prefix}.ffn.{fc}.weight"] = (fan_in, fan_out)
            shapes[f"{prefix}.ffn.{fc}.bias"] = (fan_out,)
    shapes["head.weight"] = layers["head"]
    shapes["head.bias"] = (cfg.head_outputs,)
    return shapes


def count_params(cfg: ModelConfig) -> int:
    """Closed-form parameter count.

    embedding: L*D + D, positions: P*D, channels: C*D;
    per block: 4D (two layernorms) + 4(D^2 + D) (attention) + 2DH + H + D (feed-forward);
    head: 2D + 2; with 2 blocks per pair.
    """
    d, h = cfg.embed_dim, cfg.hidden_dim
    embed = cfg.patch_len * d + d + cfg.num_patches * d + cfg.num_channels * d
    block = 4 * d + 4 * (d * d + d) + 2 * d * h + h + d
    head = d * cfg.head_outputs + cfg.head_outputs
    return embed + 2 * cfg.num_block_pairs * block + head


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------


@dataclass
class EncoderModel:
    """Configuration plus the full weight set, keyed by canonical parameter name."""

    cfg: ModelConfig
    params: dict[str, Tensor]
    target_norm: TargetNorm = field(default_factory=TargetNorm)

    def __post_init__(self):
        expected = param_shapes(self.cfg)
        if list(self.params) != list(expected):
            raise ShapeError("Parameter set does not match the configuration's canonical layout")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ShapeError(f"{name}: shape {self.params[name].shape}, expected {shape}")

    def __iter__(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self.params.items())

    def linear(self, name: str, x: Tensor) -> Tensor:
        return add(matmul(x, self.params[f"{name}.weight"]), self.params[f"{name}.bias"])

    def forward(self, signals: np.ndarray, trace: Optional[dict] = None) -> np.ndarray:
        """Predictions [B, 2] (normalized units) for a batch of [B, 2, 1250] signals."""
        return self.forward_tensor(signals, trace).data

    def forward_tensor(self, signals: np.ndarray, trace: Optional[dict] = None) -> Tensor:
        patches = Tensor(tokenize(signals, self.cfg), dtype=self.dtype)
        return forward_patches(self.params, self.cfg, patches, self.linear, trace=trace)

    @property
    def dtype(self):
        return self.params["head.weight"].dtype

    def astype(self, dtype) -> "EncoderModel":
        params = {
            n: Tensor(p.data.astype(dtype), requires_grad=p.requires_grad, name=n)
            for n, p in self.params.items()
        }
        return replace(self, params=params)

    def copy(self) -> "EncoderModel":
        return self.astype(self.dtype)

    def state_bytes(self) -> dict[str, bytes]:
        """Raw little-endian bytes per tensor; used to assert bit-identity."""
        return {n: p.data.astype("<f4").tobytes() for n, p in self.params.items()}


def init_xavier(cfg: ModelConfig, seed: int) -> EncoderModel:
    """Xavier-uniform weights, zero biases, unit layernorm gains.

    Projection weights are drawn from U[-sqrt(6/(fan_in+fan_out)), +sqrt(6/(fan_in+fan_out))];
    positional and channel embeddings use the same rule over their two axes.
    """
    rng = np.random.default_rng(seed)
    dtype = default_dtype()
    params: dict[str, Tensor] = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".gain"):
            data = np.ones(shape)
        elif len(shape) == 2:
            limit = math.sqrt(6.0 / (shape[0] + shape[1]))
            data = rng.uniform(-limit, limit, size=shape)
        else:
            data = np.zeros(shape)
        params[name] = Tensor(data.astype(dtype), requires_grad=True, name=name)
    return EncoderModel(cfg, params)


# ---------------------------------------------------------------------------
# Tokenization and embedding
# ---------------------------------------------------------------------------


def tokenize(signals: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """Cut [..., 2, seq_len] signals into [..., 2, P, patch_len] non-overlapping patches.

    Patch p of channel c holds samples [p*patch_len, (p+1)*patch_len).
    """
    signals = np.asarray(signals)
    if signals.shape[-2:] != (cfg.num_channels, cfg.seq_len):
        raise ShapeError(
            f"signals shape {signals.shape} does not end in ({cfg.num_channels}, {cfg.seq_len})"
        )
    return signals.reshape(*signals.shape[:-1], cfg.num_patches, cfg.patch_len)


def untokenize(patches: np.ndarray) -> np.ndarray:
    return patches.reshape(*patches.shape[:-2], patches.shape[-2] * patches.shape[-1])


def embed(
    params: dict[str, Tensor],
    patches: Tensor,
    linear: LinearFn,
    token_mask: Optional[np.ndarray] = None,
    mask_token: Optional[Tensor] = None,
) -> Tensor:
    """token[c, p] = W_embed . patch[c, p] + b + pos_emb[p] + chan_emb[c].

    With ``token_mask`` ([B, C, P] booleans) the projected patch of masked tokens is
    replaced by ``mask_token`` before positions and channels are added.
    """
    if patches.ndim != 4:
        raise ShapeError(f"patches must be [B, C, P, L], got {patches.shape}")
    c, p = patches.shape[1], patches.shape[2]
    if params["pos_embed"].shape[0] != p or params["chan_embed"].shape[0] != c:
        raise ShapeError(f"patch grid {c}x{p} does not match the embedding tables")
    tokens = linear("patch_embed", patches)
    if token_mask is not None:
        tokens = where(token_mask[..., None], mask_token, tokens)
    tokens = add(tokens, params["pos_embed"])
    chan = reshape(params["chan_embed"], (c, 1, params["chan_embed"].shape[1]))
    return add(tokens, chan)


# ---------------------------------------------------------------------------
# Transformer blocks
# ---------------------------------------------------------------------------


def attention(x: Tensor, prefix: str, num_heads: int, linear: LinearFn) -> Tensor:
    """Multi-head self-attention over axis 1 of a [N, L, D] tensor."""
    n, length, d = x.shape
    dh = d // num_heads

    def heads(t: Tensor) -> Tensor:
        return transpose(reshape(t, (n, length, num_heads, dh)), (0, 2, 1, 3))

    q = heads(linear(f"{prefix}.attn.q", x))
    k = heads(linear(f"{prefix}.attn.k", x))
    v = heads(linear(f"{prefix}.attn.v", x))
    scores = mul(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    context = matmul(softmax(scores, axis=-1), v)
    merged = reshape(transpose(context, (0, 2, 1, 3)), (n, length, d))
    return linear(f"{prefix}.attn.o", merged)


def feed_forward(x: Tensor, prefix: str, linear: LinearFn) -> Tensor:
    return linear(f"{prefix}.ffn.fc2", gelu(linear(f"{prefix}.ffn.fc1", x)))


def _grouped(tokens: Tensor, kind: str) -> Tensor:
    """[B, C, P, D] -> sequences for the block kind: [B*C, P, D] or [B*P, C, D]."""
    b, c, p, d = tokens.shape
    if kind == "temporal":
        return reshape(tokens, (b * c, p, d))
    return reshape(transpose(tokens, (0, 2, 1, 3)), (b * p, c, d))


def _ungrouped(seq: Tensor, kind: str, shape: tuple[int, ...]) -> Tensor:
    b, c, p, d = shape
    if kind == "temporal":
        return reshape(seq, shape)
    return transpose(reshape(seq, (b, p, c, d)), (0, 2, 1, 3))


def attention_sublayer(
    params: dict[str, Tensor],
    tokens: Tensor,
    prefix: str,
    kind: str,
    cfg: ModelConfig,
    linear: LinearFn,
) -> Tensor:
    """Pre-layernorm attention without the residual add, returned as [B, C, P, D].

    Temporal attention never mixes channels (sequences are per channel); spatial
    attention never mixes patch positions (sequences are per position).
    """
    seq = _grouped(tokens, kind)
    normed = layernorm(seq, params[f"{prefix}.attn_norm.gain"], params[f"{prefix}.attn_norm.bias"])
    return _ungrouped(attention(normed, prefix, cfg.num_heads, linear), kind, tokens.shape)


def transformer_block(
    params: dict[str, Tensor],
    tokens: Tensor,
    prefix: str,
    kind: str,
    cfg: ModelConfig,
    linear: LinearFn,
    trace: Optional[dict] = None,
) -> Tensor:
    attn_out = attention_sublayer(params, tokens, prefix, kind, cfg, linear)
    if trace is not None:
        trace[f"{prefix}.attn"] = attn_out.data
    tokens = add(tokens, attn_out)
    normed = layernorm(tokens, params[f"{prefix}.ffn_norm.gain"], params[f"{prefix}.ffn_norm.bias"])
    return add(tokens, feed_forward(normed, prefix, linear))


def encode_tokens(
    params: dict[str, Tensor],
    cfg: ModelConfig,
    patches: Tensor,
    linear: LinearFn,
    trace: Optional[dict] = None,
    token_mask: Optional[np.ndarray] = None,
    mask_token: Optional[Tensor] = None,
) -> Tensor:
    """Embed and run every (temporal, spatial) block pair; returns [B, C, P, D] tokens."""
    tokens = embed(params, patches, linear, token_mask, mask_token)
    if trace is not None:
        trace["embed"] = tokens.data
    for i in range(cfg.num_block_pairs):
        for kind in BLOCK_KINDS:
            tokens = transformer_block(
                params, tokens, f"blocks.{i}.{kind}", kind, cfg, linear, trace
            )
    return tokens


def forward_patches(
    params: dict[str, Tensor],
    cfg: ModelConfig,
    patches: Tensor,
    linear: LinearFn,
    trace: Optional[dict] = None,
) -> Tensor:
    """Full forward pass: tokens -> mean-pool over all 2*P positions -> head."""
    tokens = encode_tokens(params, cfg, patches, linear, trace)
    pooled = mean(tokens, axis=(1, 2))
    if trace is not None:
        trace["pooled"] = pooled.data
    return linear("head", pooled)


def predict(model, signals: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Batched forward for anything exposing ``forward(signals) -> [B, 2]``."""
    signals = np.asarray(signals)
    outputs = [
        np.asarray(model.forward(signals[start : start + batch_size]), dtype=np.float64)
        for start in range(0, signals.shape[0], batch_size)
    ]
    return np.concatenate(outputs, axis=0)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def encode_config(cfg: ModelConfig) -> bytes:
    return CONFIG_STRUCT.pack(
        cfg.num_channels,
        cfg.seq_len,
        cfg.patch_len,
        cfg.embed_dim,
        cfg.num_block_pairs,
        cfg.num_heads,
        cfg.mlp_ratio,
        cfg.head_outputs,
        SIZE_TAGS.index(cfg.size_tag),
    )


def decode_config(payload: bytes, offset: int) -> ModelConfig:
    try:
        fields = CONFIG_STRUCT.unpack_from(payload, offset)
    except struct.error as exc:
        raise ModelFileError("Truncated model configuration block") from exc
    if fields[8] >= len(SIZE_TAGS):
        raise ModelFileError(f"Unknown size tag index {fields[8]}")
    try:
        return ModelConfig(*fields[:8], size_tag=SIZE_TAGS[fields[8]])
    except ConfigError as exc:
        raise ModelFileError(f"Invalid model configuration: {exc}") from exc


def encode_norm(norm: TargetNorm) -> bytes:
    return NORM_STRUCT.pack(norm.sbp_mean, norm.sbp_sd, norm.dbp_mean, norm.dbp_sd)


def decode_norm(payload: bytes, offset: int) -> TargetNorm:
    try:
        return TargetNorm(*NORM_STRUCT.unpack_from(payload, offset))
    except struct.error as exc:
        raise ModelFileError("Truncated target normalization block") from exc


def encode_model(model: EncoderModel) -> bytes:
    chunks = [
        MODEL_MAGIC,
        bytes([MODEL_VERSION]),
        encode_config(model.cfg),
        encode_norm(model.target_norm),
    ]
    for _name, p in model:
        data = np.ascontiguousarray(p.data, dtype="<f4")
        chunks.append(LENGTH_STRUCT.pack(data.size))
        chunks.append(data.tobytes())
    return b"".join(chunks)


def decode_model(payload: bytes) -> EncoderModel:
    """Parse a BPMDL1 byte string.

    Raises:
        ModelFileError: On bad magic, unknown version, truncation, tensor-size mismatch
            or trailing bytes.
    """
    if payload[:6] != MODEL_MAGIC:
        raise ModelFileError(f"Bad model magic {payload[:6]!r}, expected {MODEL_MAGIC!r}")
    if len(payload) < 7 or payload[6] != MODEL_VERSION:
        raise ModelFileError("Unsupported or missing model version")
    offset = 7
    cfg = decode_config(payload, offset)
    offset += CONFIG_STRUCT.size
    norm = decode_norm(payload, offset)
    offset += NORM_STRUCT.size

    params: dict[str, Tensor] = {}
    for name, shape in param_shapes(cfg).items():
        if offset + LENGTH_STRUCT.size > len(payload):
            raise ModelFileError(f"Truncated model file before tensor '{name}'")
        (count,) = LENGTH_STRUCT.unpack_from(payload, offset)
        offset += LENGTH_STRUCT.size
        if count != int(np.prod(shape)):
            raise ModelFileError(f"Tensor '{name}' holds {count} values, expected shape {shape}")
        end = offset + 4 * count
        if end > len(payload):
            raise ModelFileError(f"Truncated model file inside tensor '{name}'")
        data = np.frombuffer(payload, dtype="<f4", count=count, offset=offset).reshape(shape)
        params[name] = Tensor(data.astype(np.float32), requires_grad=True, name=name)
        offset = end
    if offset != len(payload):
        raise ModelFileError(f"{len(payload) - offset} trailing bytes in model file")
    return EncoderModel(cfg, params, norm)


def serialized_element_count(payload: bytes) -> int:
    """Total tensor elements stored in a BPMDL1 payload (walks the length prefixes)."""
    cfg = decode_config(payload, 7)
    offset = 7 + CONFIG_STRUCT.size + NORM_STRUCT.size
    total = 0
    for _ in param_shapes(cfg):
        (count,) = LENGTH_STRUCT.unpack_from(payload, offset)
        total += count
        offset += LENGTH_STRUCT.size + 4 * count
    return total


def save_model(model: EncoderModel, path: str) -> int:
    written = atomic_write_bytes(path, encode_model(model))
    log("Saved model", path=path, bytes=written, params=count_params(model.cfg))
    return written


def load_model(path: str) -> EncoderModel:
    with open(path, "rb") as f:
        return decode_model(f.read())
