"""Small decoder-only transformer used as the frozen teacher."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Callable, Iterator

import numpy as np

from .tensor import (
    ContractError,
    DimensionError,
    Tensor,
    default_dtype,
    linear_forward,
    log_softmax,
    pick,
    silu,
    softmax,
    where_mask,
)

NORM_EPS = 1e-6


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 256
    d_model: int = 64
    d_hidden: int = 256
    n_heads: int = 4
    n_layers: int = 2
    seq_len: int = 64

    def __post_init__(self):
        if self.n_layers < 1 or self.vocab_size < 2:
            raise ContractError("need n_layers >= 1 and vocab_size >= 2")
        if self.d_model % self.n_heads:
            raise ContractError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.d_hidden % self.d_model:
            raise ContractError("d_hidden must be an integer multiple of d_model")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class FfnWeights:
    w1: Tensor  # [d_e, d_h]
    b1: Tensor  # [d_h]
    w2: Tensor  # [d_h, d_e]
    b2: Tensor  # [d_e]

    def __post_init__(self):
        d_e, d_h = self.w1.shape
        if self.b1.shape != (d_h,) or self.w2.shape != (d_h, d_e) or self.b2.shape != (d_e,):
            raise DimensionError(
                f"inconsistent FFN shapes W1{self.w1.shape} b1{self.b1.shape} W2{self.w2.shape} b2{self.b2.shape}")

    @property
    def d_model(self) -> int:
        return self.w1.shape[0]

    @property
    def d_hidden(self) -> int:
        return self.w1.shape[1]


@dataclass
class BlockWeights:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    norm1_scale: Tensor
    norm1_shift: Tensor
    norm2_scale: Tensor
    norm2_shift: Tensor
    ffn: FfnWeights
    n_heads: int = 4


@dataclass
class ModelWeights:
    config: ModelConfig
    tok_emb: Tensor      # [C, d_e]
    pos_emb: Tensor      # [n_max, d_e]
    blocks: list[BlockWeights]
    norm_scale: Tensor
    norm_shift: Tensor
    head: Tensor         # [d_e, C]

    def named_tensors(self) -> Iterator[tuple[str, Tensor]]:
        yield "tok_emb", self.tok_emb
        yield "pos_emb", self.pos_emb
        for i, b in enumerate(self.blocks):
            for name in ("wq", "wk", "wv", "wo", "norm1_scale", "norm1_shift", "norm2_scale", "norm2_shift"):
                yield f"blocks.{i}.{name}", getattr(b, name)
            for name in ("w1", "b1", "w2", "b2"):
                yield f"blocks.{i}.ffn.{name}", getattr(b.ffn, name)
        yield "norm_scale", self.norm_scale
        yield "norm_shift", self.norm_shift
        yield "head", self.head

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_tensors()]

    def set_trainable(self, flag: bool) -> None:
        for t in self.parameters():
            t.requires_grad = flag

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.named_tensors()}

    @classmethod
    def from_state(cls, config: ModelConfig, state: dict[str, np.ndarray], dtype=None) -> ModelWeights:
        dtype = dtype or default_dtype()

        def t(name):
            return Tensor(np.array(state[name], dtype=dtype))

        blocks = []
        for i in range(config.n_layers):
            p = f"blocks.{i}."
            ffn = FfnWeights(t(p + "ffn.w1"), t(p + "ffn.b1"), t(p + "ffn.w2"), t(p + "ffn.b2"))
            blocks.append(BlockWeights(*(t(p + n) for n in ("wq", "wk", "wv", "wo", "norm1_scale", "norm1_shift",
                                                             "norm2_scale", "norm2_shift")),
                                       ffn=ffn, n_heads=config.n_heads))
        return cls(config, t("tok_emb"), t("pos_emb"), blocks, t("norm_scale"), t("norm_shift"), t("head"))

    def astype(self, dtype) -> ModelWeights:
        return ModelWeights.from_state(self.config, self.state_dict(), dtype=dtype)


def init_model(config: ModelConfig, seed: int = 0, dtype=None) -> ModelWeights:
    dtype = dtype or default_dtype()
    rng = np.random.default_rng(seed)
    d, h, L = config.d_model, config.d_hidden, config.n_layers

    def normal(shape, std):
        return Tensor((rng.standard_normal(shape) * std).astype(dtype))

    def const(shape, value):
        return Tensor(np.full(shape, value, dtype=dtype))

    resid = 1.0 / math.sqrt(2 * L)
    blocks = []
    for _ in range(L):
        ffn = FfnWeights(normal((d, h), 1 / math.sqrt(d)), const((h,), 0.0),
                         normal((h, d), resid / math.sqrt(h)), const((d,), 0.0))
        blocks.append(BlockWeights(
            wq=normal((d, d), 1 / math.sqrt(d)), wk=normal((d, d), 1 / math.sqrt(d)),
            wv=normal((d, d), 1 / math.sqrt(d)), wo=normal((d, d), resid / math.sqrt(d)),
            norm1_scale=const((d,), 1.0), norm1_shift=const((d,), 0.0),
            norm2_scale=const((d,), 1.0), norm2_shift=const((d,), 0.0),
            ffn=ffn, n_heads=config.n_heads))
    return ModelWeights(config, normal((config.vocab_size, d), 0.5), normal((config.seq_len, d), 0.1), blocks,
                        const((d,), 1.0), const((d,), 0.0), normal((d, config.vocab_size), 1 / math.sqrt(d)))


# -- forward pieces -------------------------------------------------------------

def rms_norm(x: Tensor, scale: Tensor, shift: Tensor) -> Tensor:
    inv = ((x * x).mean(axis=-1, keepdims=True) + NORM_EPS) ** -0.5
    return x * inv * scale + shift


def ffn_forward(x: Tensor, w: FfnWeights) -> Tensor:
    """Dense feed-forward: ``silu(x W1 + b1) W2 + b2``."""
    return linear_forward(silu(linear_forward(x, w.w1, w.b1)), w.w2, w.b2)


def attention(x: Tensor, bw: BlockWeights) -> Tensor:
    """Causal multi-head self-attention over ``x[b, n, d_e]`` (no projection biases)."""
    b, n, d = x.shape
    H = bw.n_heads
    dh = d // H

    def heads(t: Tensor) -> Tensor:
        return t.reshape(b, n, H, dh).transpose(0, 2, 1, 3)

    q, k, v = heads(x @ bw.wq), heads(x @ bw.wk), heads(x @ bw.wv)
    scores = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(dh))
    future = np.triu(np.ones((n, n), dtype=bool), k=1)
    att = softmax(where_mask(future, scores, -1e9), axis=-1)
    out = (att @ v).transpose(0, 2, 1, 3).reshape(b, n, d)
    return out @ bw.wo


def attention_residual(x: Tensor, bw: BlockWeights) -> Tensor:
    """``x + MHA(norm(x))``: the hidden state handed to the FFN sub-block."""
    return x + attention(rms_norm(x, bw.norm1_scale, bw.norm1_shift), bw)


FfnFn = Callable[[Tensor, int], Tensor]


def block_forward(x: Tensor, bw: BlockWeights, ffn: Callable[[Tensor], Tensor] | None = None
                  ) -> tuple[Tensor, Tensor]:
    """Pre-norm block. Returns ``(output, post_attention_hidden)``.

    ``ffn`` replaces the dense feed-forward when given; it receives the
    normalised hidden state.
    """
    if x.ndim == 2:
        out, hidden = block_forward(x.reshape(1, *x.shape), bw, ffn)
        return out.reshape(out.shape[1:]), hidden.reshape(hidden.shape[1:])
    hidden = attention_residual(x, bw)
    u = rms_norm(hidden, bw.norm2_scale, bw.norm2_shift)
    y = ffn_forward(u, bw.ffn) if ffn is None else ffn(u)
    return hidden + y, hidden


def embed(tokens: np.ndarray, m: ModelWeights) -> Tensor:
    tokens = np.asarray(tokens)
    n = tokens.shape[-1]
    if n > m.config.seq_len:
        raise ContractError(f"sequence of {n} tokens exceeds n_max={m.config.seq_len}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= m.config.vocab_size):
        raise ContractError(f"token out of range [0, {m.config.vocab_size})")
    return m.tok_emb[tokens] + m.pos_emb[np.arange(n)]


def head_forward(x: Tensor, m: ModelWeights) -> Tensor:
    return rms_norm(x, m.norm_scale, m.norm_shift) @ m.head


def lm_forward(tokens, m: ModelWeights, ffn: FfnFn | None = None) -> Tensor:
    """Logits ``[..., n, C]`` for ``tokens[n]`` or ``tokens[b, n]``.

    ``ffn(u, layer)`` optionally replaces each block's dense FFN.
    """
    tokens = np.asarray(tokens)
    squeeze = tokens.ndim == 1
    if squeeze:
        tokens = tokens[None]
    x = embed(tokens, m)
    for i, bw in enumerate(m.blocks):
        layer_ffn = None if ffn is None else (lambda u, i=i: ffn(u, i))
        x, _ = block_forward(x, bw, layer_ffn)
    logits = head_forward(x, m)
    return logits.reshape(logits.shape[1:]) if squeeze else logits


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean next-token cross-entropy over every position."""
    labels = np.asarray(labels)
    C = logits.shape[-1]
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise ContractError(f"label out of range [0, {C})")
    flat = logits.reshape(-1, C)
    return -pick(log_softmax(flat), labels.reshape(-1)).mean()
