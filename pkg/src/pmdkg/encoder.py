"""Post-norm transformer encoder tower and the two-tower bi-encoder built from it."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Mapping

import numpy as np

from .autograd import Tensor, embedding, gelu, layer_norm, softmax
from .text import SequenceBatch

INIT_STD = 0.02
_NEG_INF = -1e9


@dataclass(frozen=True)
class EncoderConfig:
    layers: int = 4
    hidden: int = 128
    heads: int = 4
    ff: int = 256
    vocab_size: int = 1000
    max_len: int = 64
    dropout: float = 0.1
    pooling: str = "mean"

    def __post_init__(self):
        for name in ("layers", "hidden", "heads", "ff", "vocab_size", "max_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"encoder {name} must be >= 1")
        if self.hidden % self.heads:
            raise ValueError(f"hidden width {self.hidden} is not divisible by {self.heads} heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.pooling not in ("mean", "cls"):
            raise ValueError("pooling must be 'mean' or 'cls'")

    def with_layers(self, layers: int) -> EncoderConfig:
        return replace(self, layers=layers)

    def to_dict(self) -> dict:
        return asdict(self)


def layer_param_count(hidden: int, ff: int) -> int:
    d = hidden
    return 4 * (d * d + d) + (d * ff + ff) + (ff * d + d) + 4 * d


def count_params(config: EncoderConfig) -> int:
    """Closed-form parameter count of one tower."""
    d = config.hidden
    embeddings = config.vocab_size * d + config.max_len * d + 2 * d
    return embeddings + config.layers * layer_param_count(d, config.ff)


def count_bi_encoder_params(config: EncoderConfig, share_token_embeddings: bool = False) -> int:
    total = 2 * count_params(config)
    if share_token_embeddings:
        total -= config.vocab_size * config.hidden
    return total


def param_shapes(config: EncoderConfig) -> dict[str, tuple[int, ...]]:
    d, ff = config.hidden, config.ff
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (config.vocab_size, d),
        "pos_emb": (config.max_len, d),
        "emb_norm.gain": (d,),
        "emb_norm.shift": (d,),
    }
    for i in range(config.layers):
        p = f"layers.{i}."
        for proj in "qkvo":
            shapes[p + f"attn.{proj}.weight"] = (d, d)
            shapes[p + f"attn.{proj}.bias"] = (d,)
        shapes[p + "attn_norm.gain"] = (d,)
        shapes[p + "attn_norm.shift"] = (d,)
        shapes[p + "ffn.in.weight"] = (d, ff)
        shapes[p + "ffn.in.bias"] = (ff,)
        shapes[p + "ffn.out.weight"] = (ff, d)
        shapes[p + "ffn.out.bias"] = (d,)
        shapes[p + "ffn_norm.gain"] = (d,)
        shapes[p + "ffn_norm.shift"] = (d,)
    return shapes


@dataclass
class EncoderParams:
    config: EncoderConfig
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        expected = param_shapes(self.config)
        if set(expected) != set(self.tensors):
            missing = sorted(set(expected) - set(self.tensors))
            extra = sorted(set(self.tensors) - set(expected))
            raise ValueError(f"parameter names do not match config (missing={missing}, extra={extra})")
        for name, shape in expected.items():
            if self.tensors[name].shape != shape:
                raise ValueError(f"{name}: shape {self.tensors[name].shape} != {shape}")

    def copy(self) -> EncoderParams:
        return EncoderParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def astype(self, dtype) -> EncoderParams:
        return EncoderParams(self.config, {k: v.astype(dtype) for k, v in self.tensors.items()})

    def num_values(self) -> int:
        return sum(v.size for v in self.tensors.values())


def _is_weight(name: str) -> bool:
    return name.endswith("weight") or name in ("tok_emb", "pos_emb")


def _truncated_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def init_params(config: EncoderConfig, seed: int, dtype=np.float32) -> EncoderParams:
    """Truncated-normal weights (std 0.02, cut at two std), zero biases, unit norm gains."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in param_shapes(config).items():
        if _is_weight(name):
            tensors[name] = _truncated_normal(rng, shape, INIT_STD).astype(dtype)
        elif name.endswith("gain"):
            tensors[name] = np.ones(shape, dtype=dtype)
        else:
            tensors[name] = np.zeros(shape, dtype=dtype)
    return EncoderParams(config, tensors)


def select_layers(teacher: EncoderParams, student_config: EncoderConfig) -> EncoderParams:
    """Initialize a shallower student by copying uniformly strided teacher layers."""
    tc = teacher.config
    if (tc.hidden, tc.heads, tc.ff, tc.vocab_size, tc.max_len) != (
        student_config.hidden,
        student_config.heads,
        student_config.ff,
        student_config.vocab_size,
        student_config.max_len,
    ):
        raise ValueError("student and teacher widths differ; only depth compression is supported")
    mapping = layer_map(tc.layers, student_config.layers)
    tensors = {}
    for name, value in teacher.tensors.items():
        if not name.startswith("layers."):
            tensors[name] = value.copy()
    for j, src in enumerate(mapping):
        prefix = f"layers.{src}."
        for name, value in teacher.tensors.items():
            if name.startswith(prefix):
                tensors[f"layers.{j}." + name[len(prefix):]] = value.copy()
    return EncoderParams(student_config, tensors)


def layer_map(teacher_layers: int, student_layers: int) -> list[int]:
    """Teacher layer index copied into each student layer (0-indexed)."""
    if not 1 <= student_layers <= teacher_layers:
        raise ValueError(f"cannot map {student_layers} student layers onto {teacher_layers}")
    return [
        -(-(j + 1) * teacher_layers // student_layers) - 1 for j in range(student_layers)
    ]


@dataclass
class EncoderOutput:
    features: Tensor           # (B, T, d) final-layer token features
    pooled: Tensor             # (B, d)
    layer_states: list[Tensor]  # output of every transformer layer, last == features


def _dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rate <= 0.0 or rng is None:
        return x
    keep = 1.0 - rate
    mask = (rng.random(x.shape) < keep).astype(x.dtype) / keep
    return x * mask


def pool(features: Tensor, attention: np.ndarray, mode: str = "mean") -> Tensor:
    if mode == "cls":
        b, t, d = features.shape
        return (features * _cls_selector(t, features.dtype)).sum(axis=1)
    weights = attention.astype(features.dtype)
    weights = weights / weights.sum(axis=1, keepdims=True)
    return (features * weights[:, :, None]).sum(axis=1)


def _cls_selector(t: int, dtype) -> np.ndarray:
    sel = np.zeros((1, t, 1), dtype=dtype)
    sel[0, 0, 0] = 1.0
    return sel


def forward(
    config: EncoderConfig,
    weights: Mapping[str, Tensor],
    batch: SequenceBatch,
    rng: np.random.Generator | None = None,
) -> EncoderOutput:
    """Encoder forward pass on autograd tensors; dropout is active only when ``rng`` is given."""
    ids = np.asarray(batch.ids)
    b, t = ids.shape
    if t > config.max_len:
        raise ValueError(f"sequence length {t} exceeds max_len {config.max_len}")
    if ids.size and (ids.min() < 0 or ids.max() >= config.vocab_size):
        raise ValueError("token id outside the vocabulary")
    d, h = config.hidden, config.heads
    dh = d // h
    p = config.dropout
    w = weights
    dtype = w["tok_emb"].dtype

    x = embedding(w["tok_emb"], ids) + embedding(w["pos_emb"], np.arange(t))
    x = layer_norm(x, w["emb_norm.gain"], w["emb_norm.shift"])
    x = _dropout(x, p, rng)

    key_bias = ((1 - np.asarray(batch.attention)) * _NEG_INF).astype(dtype)[:, None, None, :]
    scale = 1.0 / math.sqrt(dh)
    states = []
    for i in range(config.layers):
        pre = f"layers.{i}."

        def heads(proj: str) -> Tensor:
            y = x @ w[pre + f"attn.{proj}.weight"] + w[pre + f"attn.{proj}.bias"]
            return y.reshape(b, t, h, dh).transpose(0, 2, 1, 3)

        q, k, v = heads("q"), heads("k"), heads("v")
        scores = (q @ k.transpose(0, 1, 3, 2)) * scale + key_bias
        ctx = softmax(scores) @ v
        ctx = ctx.transpose(0, 2, 1, 3).reshape(b, t, d)
        attn_out = ctx @ w[pre + "attn.o.weight"] + w[pre + "attn.o.bias"]
        x = layer_norm(
            x + _dropout(attn_out, p, rng), w[pre + "attn_norm.gain"], w[pre + "attn_norm.shift"]
        )
        hidden = gelu(x @ w[pre + "ffn.in.weight"] + w[pre + "ffn.in.bias"])
        ffn_out = hidden @ w[pre + "ffn.out.weight"] + w[pre + "ffn.out.bias"]
        x = layer_norm(
            x + _dropout(ffn_out, p, rng), w[pre + "ffn_norm.gain"], w[pre + "ffn_norm.shift"]
        )
        states.append(x)

    pooled = pool(x, np.asarray(batch.attention), config.pooling)
    return EncoderOutput(x, pooled, states)


def as_leaves(params: EncoderParams, requires_grad: bool = False) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=requires_grad, name=k) for k, v in params.tensors.items()}


def encode(params: EncoderParams, batch: SequenceBatch) -> EncoderOutput:
    """Inference-mode forward pass (no dropout, no gradient tracking)."""
    return forward(params.config, as_leaves(params), batch)


# -- two-tower model ---------------------------------------------------------------

TOWERS = ("hr", "tail")


@dataclass
class BiEncoder:
    hr: EncoderParams
    tail: EncoderParams

    def __post_init__(self):
        if self.hr.config != self.tail.config:
            raise ValueError("both towers must share one encoder config")

    @property
    def config(self) -> EncoderConfig:
        return self.hr.config

    def tower(self, name: str) -> EncoderParams:
        return getattr(self, name)

    def named_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for tower in TOWERS:
            for k, v in self.tower(tower).tensors.items():
                out[f"{tower}.{k}"] = v
        return out

    @classmethod
    def from_named(cls, config: EncoderConfig, named: Mapping[str, np.ndarray]) -> BiEncoder:
        parts: dict[str, dict[str, np.ndarray]] = {t: {} for t in TOWERS}
        for name, value in named.items():
            tower, _, rest = name.partition(".")
            if tower not in parts:
                raise ValueError(f"unknown tower in parameter name {name!r}")
            parts[tower][rest] = value
        return cls(EncoderParams(config, parts["hr"]), EncoderParams(config, parts["tail"]))

    def copy(self) -> BiEncoder:
        return BiEncoder(self.hr.copy(), self.tail.copy())

    def astype(self, dtype) -> BiEncoder:
        return BiEncoder(self.hr.astype(dtype), self.tail.astype(dtype))

    def num_params(self) -> int:
        return self.hr.num_values() + self.tail.num_values()


def init_bi_encoder(config: EncoderConfig, seed: int, dtype=np.float32) -> BiEncoder:
    return BiEncoder(init_params(config, seed, dtype), init_params(config, seed + 1, dtype))


def select_bi_encoder_layers(teacher: BiEncoder, student_config: EncoderConfig) -> BiEncoder:
    return BiEncoder(
        select_layers(teacher.hr, student_config), select_layers(teacher.tail, student_config)
    )
