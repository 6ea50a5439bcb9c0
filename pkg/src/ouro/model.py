"""Byte-level decoder transformer.

Pre-norm blocks with grouped-query causal attention, rotary position
encoding on adjacent channel pairs, and a SwiGLU feed-forward. Every
projection accepts an optional adapter hook so low-rank contributions can
be injected without the block knowing where they come from.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError

ATTN_TARGETS = ("q", "k", "v", "o")
FFN_TARGETS = ("gate", "up", "down")
ADAPT_TARGETS = ATTN_TARGETS + FFN_TARGETS


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 8
    d_model: int = 64
    n_heads: int = 4
    n_kv_heads: int = 2
    d_ffn: int = 256
    vocab: int = 256
    max_seq: int = 256
    rope_theta: float = 10000.0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.n_heads % self.n_kv_heads:
            raise ConfigError(f"n_heads {self.n_heads} not divisible by n_kv_heads {self.n_kv_heads}")
        if self.head_dim % 2:
            raise ConfigError(f"head dim {self.head_dim} must be even for pair rotation")
        if min(self.n_layers, self.d_ffn, self.vocab, self.max_seq) <= 0:
            raise ConfigError("all model extents must be positive")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def kv_dim(self) -> int:
        return self.n_kv_heads * self.head_dim


@dataclass
class LayerWeights:
    """One transformer block. Weight layout is [out_features, in_features]."""

    attn_norm: T.Tensor
    q: T.Tensor
    k: T.Tensor
    v: T.Tensor
    o: T.Tensor
    ffn_norm: T.Tensor
    gate: T.Tensor
    up: T.Tensor
    down: T.Tensor

    def named(self) -> dict[str, T.Tensor]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class BaseModel:
    cfg: ModelConfig
    embed: T.Tensor           # [vocab, d_model]
    layers: list[LayerWeights]
    final_norm: T.Tensor      # [d_model]
    head: T.Tensor            # [vocab, d_model], untied from embed

    def named_tensors(self) -> dict[str, T.Tensor]:
        out = {"embed": self.embed, "final_norm": self.final_norm, "head": self.head}
        for i, lw in enumerate(self.layers):
            for key, t in lw.named().items():
                out[f"layer.{i}.{key}"] = t
        return out

    def set_requires_grad(self, flag: bool) -> None:
        for t in self.named_tensors().values():
            t.requires_grad = flag


def _proj(rng, out_dim: int, in_dim: int, dtype, name: str) -> T.Tensor:
    w = rng.standard_normal((out_dim, in_dim)) * 0.02
    return T.Tensor(w.astype(dtype), requires_grad=True, name=name)


def init_layer(rng, cfg: ModelConfig, index: int, dtype=T.F32) -> LayerWeights:
    d, hd = cfg.d_model, cfg.head_dim
    pre = f"layer.{index}."
    return LayerWeights(
        attn_norm=T.ones((d,), dtype=dtype, requires_grad=True, name=pre + "attn_norm"),
        q=_proj(rng, cfg.n_heads * hd, d, dtype, pre + "q"),
        k=_proj(rng, cfg.kv_dim, d, dtype, pre + "k"),
        v=_proj(rng, cfg.kv_dim, d, dtype, pre + "v"),
        o=_proj(rng, d, cfg.n_heads * hd, dtype, pre + "o"),
        ffn_norm=T.ones((d,), dtype=dtype, requires_grad=True, name=pre + "ffn_norm"),
        gate=_proj(rng, cfg.d_ffn, d, dtype, pre + "gate"),
        up=_proj(rng, cfg.d_ffn, d, dtype, pre + "up"),
        down=_proj(rng, d, cfg.d_ffn, dtype, pre + "down"),
    )


def init_base_model(cfg: ModelConfig, seed: int, dtype=T.F32) -> BaseModel:
    rng = np.random.default_rng(seed)
    embed = T.Tensor((rng.standard_normal((cfg.vocab, cfg.d_model)) * 0.02).astype(dtype),
                     requires_grad=True, name="embed")
    layers = [init_layer(rng, cfg, i, dtype) for i in range(cfg.n_layers)]
    final_norm = T.ones((cfg.d_model,), dtype=dtype, requires_grad=True, name="final_norm")
    head = _proj(rng, cfg.vocab, cfg.d_model, dtype, "head")
    return BaseModel(cfg=cfg, embed=embed, layers=layers, final_norm=final_norm, head=head)


def rope_tables(seq_len: int, head_dim: int, theta: float, dtype=T.F32):
    """cos/sin of pos * theta^(-2i/head_dim) for channel pair i, as [T, hd/2]."""
    half = head_dim // 2
    inv = theta ** (-2.0 * np.arange(half) / head_dim)
    ang = np.arange(seq_len)[:, None] * inv[None, :]
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


def _split_heads(x: T.Tensor, n_heads: int, head_dim: int) -> T.Tensor:
    b, t, _ = x.shape
    return T.permute(T.reshape(x, (b, t, n_heads, head_dim)), (0, 2, 1, 3))


def _adapted(adapt, target: str, x: T.Tensor, base: T.Tensor) -> T.Tensor:
    if adapt is None:
        return base
    extra = adapt(target, x)
    return base if extra is None else T.add(base, extra)


def attention(x: T.Tensor, lw: LayerWeights, cfg: ModelConfig, cos, sin, adapt=None) -> T.Tensor:
    b, t, _ = x.shape
    hd = cfg.head_dim
    q = _split_heads(_adapted(adapt, "q", x, T.linear(x, lw.q)), cfg.n_heads, hd)
    k = _split_heads(_adapted(adapt, "k", x, T.linear(x, lw.k)), cfg.n_kv_heads, hd)
    v = _split_heads(_adapted(adapt, "v", x, T.linear(x, lw.v)), cfg.n_kv_heads, hd)

    q = T.rope(q, cos[:t], sin[:t])
    k = T.rope(k, cos[:t], sin[:t])

    if cfg.n_kv_heads != cfg.n_heads:
        # Each query head attends through its group's shared kv head.
        group = cfg.n_heads // cfg.n_kv_heads
        share = np.repeat(np.arange(cfg.n_kv_heads), group)
        k = T.index_select(k, 1, share)
        v = T.index_select(v, 1, share)

    scores = T.scale(T.matmul(q, T.permute(k, (0, 1, 3, 2))), 1.0 / float(np.sqrt(hd)))
    probs = T.softmax_last(T.causal_mask(scores))
    ctx = T.matmul(probs, v)
    merged = T.reshape(T.permute(ctx, (0, 2, 1, 3)), (b, t, cfg.n_heads * hd))
    return _adapted(adapt, "o", merged, T.linear(merged, lw.o))


def swiglu(x: T.Tensor, lw: LayerWeights, adapt=None) -> T.Tensor:
    gate = T.silu(_adapted(adapt, "gate", x, T.linear(x, lw.gate)))
    up = _adapted(adapt, "up", x, T.linear(x, lw.up))
    mixed = T.mul(gate, up)
    return _adapted(adapt, "down", mixed, T.linear(mixed, lw.down))


def layer_forward(x: T.Tensor, lw: LayerWeights, cfg: ModelConfig, cos, sin, adapt=None) -> T.Tensor:
    h = T.add(x, attention(T.rms_norm(x, lw.attn_norm), lw, cfg, cos, sin, adapt))
    return T.add(h, swiglu(T.rms_norm(h, lw.ffn_norm), lw, adapt))


def run_layers(x: T.Tensor, layers, cfg: ModelConfig, cos, sin, adapt=None) -> T.Tensor:
    for lw in layers:
        x = layer_forward(x, lw, cfg, cos, sin, adapt)
    return x


def embed_tokens(m: BaseModel, tokens: np.ndarray) -> T.Tensor:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 2:
        raise DimensionError(f"tokens must be [B, T], got {tokens.shape}")
    if tokens.shape[1] > m.cfg.max_seq:
        raise DimensionError(f"sequence length {tokens.shape[1]} exceeds max {m.cfg.max_seq}")
    b, t = tokens.shape
    flat = T.index_select(m.embed, 0, tokens.reshape(-1))
    return T.reshape(flat, (b, t, m.cfg.d_model))


def lm_head(m: BaseModel, h: T.Tensor) -> T.Tensor:
    return T.linear(T.rms_norm(h, m.final_norm), m.head)


def model_forward(m: BaseModel, tokens: np.ndarray, adapt=None) -> T.Tensor:
    """Token ids to logits through the whole dense stack."""
    t = np.asarray(tokens).shape[1]
    cos, sin = rope_tables(t, m.cfg.head_dim, m.cfg.rope_theta, m.embed.dtype)
    x = embed_tokens(m, tokens)
    x = run_layers(x, m.layers, m.cfg, cos, sin, adapt)
    return lm_head(m, x)
