"""Transformer building blocks shared by the encoder, text encoder and decoder.

Parameters live in flat ``dict[str, Tensor]`` maps keyed by dotted names, so
every block here takes the map plus the name prefix of its own parameters.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

Params = dict[str, Tensor]


def normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    return rng.normal(0.0, std, size=shape)


def init_linear(p: Params, prefix: str, rng, d_in: int, d_out: int, std: float = 0.02, bias: bool = True) -> None:
    p[f"{prefix}.weight"] = Tensor(normal(rng, (d_in, d_out), std), name=f"{prefix}.weight")
    if bias:
        p[f"{prefix}.bias"] = Tensor(np.zeros(d_out), name=f"{prefix}.bias")


def init_norm(p: Params, prefix: str, dim: int) -> None:
    p[f"{prefix}.gamma"] = Tensor(np.ones(dim), name=f"{prefix}.gamma")
    p[f"{prefix}.beta"] = Tensor(np.zeros(dim), name=f"{prefix}.beta")


def init_attention(p: Params, prefix: str, rng, dim: int, std: float = 0.02) -> None:
    for part in ("q", "k", "v", "o"):
        init_linear(p, f"{prefix}.{part}", rng, dim, dim, std)


def init_ffn(p: Params, prefix: str, rng, dim: int, hidden: int, std: float = 0.02) -> None:
    init_linear(p, f"{prefix}.fc1", rng, dim, hidden, std)
    init_linear(p, f"{prefix}.fc2", rng, hidden, dim, std)


def dense(x: Tensor, p: Params, prefix: str) -> Tensor:
    """Affine map ``x @ W + b``; picks up a LoRA delta ``A @ B`` when present."""
    w = p[f"{prefix}.weight"]
    a = p.get(f"{prefix}.lora_a")
    if a is not None:
        w = w + ad.matmul(a, p[f"{prefix}.lora_b"])
    b = p.get(f"{prefix}.bias")
    return ad.linear(x, w, b)


def norm(x: Tensor, p: Params, prefix: str, eps: float = 1e-5) -> Tensor:
    return ad.layer_norm(x, p[f"{prefix}.gamma"], p[f"{prefix}.beta"], eps)


def ffn(x: Tensor, p: Params, prefix: str) -> Tensor:
    return dense(ad.gelu(dense(x, p, f"{prefix}.fc1")), p, f"{prefix}.fc2")


_causal_cache: dict[int, np.ndarray] = {}


def causal_mask(n: int) -> np.ndarray:
    if n not in _causal_cache:
        m = np.zeros((n, n))
        m[np.triu_indices(n, k=1)] = -np.inf
        _causal_cache[n] = m
    return _causal_cache[n]


def self_attention(x: Tensor, p: Params, prefix: str, heads: int, causal: bool = False) -> Tensor:
    batch, length, dim = x.shape
    dh = dim // heads

    def split(t: Tensor) -> Tensor:
        return ad.permute(ad.reshape(t, (batch, length, heads, dh)), (0, 2, 1, 3))

    q = split(dense(x, p, f"{prefix}.q"))
    k = split(dense(x, p, f"{prefix}.k"))
    v = split(dense(x, p, f"{prefix}.v"))
    scores = ad.matmul(q, ad.swap_last(k)) * (1.0 / np.sqrt(dh))
    if causal:
        scores = scores + causal_mask(length)
    mixed = ad.matmul(ad.softmax(scores, axis=-1), v)
    merged = ad.reshape(ad.permute(mixed, (0, 2, 1, 3)), (batch, length, dim))
    return dense(merged, p, f"{prefix}.o")


def transformer_block(x: Tensor, p: Params, prefix: str, heads: int, causal: bool = False) -> Tensor:
    """Pre-norm block: attention and FFN sub-blocks, each with a residual."""
    x = x + self_attention(norm(x, p, f"{prefix}.ln1"), p, f"{prefix}.attn", heads, causal)
    return x + ffn(norm(x, p, f"{prefix}.ln2"), p, f"{prefix}.ffn")
