"""Contextual vector extraction and the frozen toy text encoder.

At every CoMoE block the block input and the running text stream are refined
by bottleneck residual blocks, and a single-head cross-attention, queried by
the refined summary text token, pools ``[visual; text]`` into a context
vector ``c`` of width D. The refined text stream is carried to the next block.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, InputError
from .layers import Params, init_attention, init_ffn, init_linear, init_norm, norm, transformer_block
from .taskgen import Vocab

CONTEXT_KINDS = ("image_only", "text_only", "concat", "cve")

TEXT_ENCODER_SEED = 20240917
TEXT_DEPTH = 2
TEXT_HEADS = 4
SUMMARY_INDEX = 0  # the <cls> token every instruction starts with


@dataclass
class ContextState:
    c: Tensor  # (B, D)
    t: Tensor  # (B, T, D)
    layer: int


# ---------------------------------------------------------------- text encoder


def init_text_encoder(dim: int, vocab: int = Vocab.SIZE, max_len: int = 8) -> Params:
    """Frozen stand-in for a pretrained text encoder; same weights in every run."""
    rng = np.random.default_rng(TEXT_ENCODER_SEED + dim)
    p: Params = {}
    std = 1.0 / np.sqrt(dim)
    p["text.embed"] = Tensor(rng.normal(0.0, 1.0, (vocab, dim)), name="text.embed")
    p["text.pos"] = Tensor(rng.normal(0.0, 0.5, (max_len, dim)), name="text.pos")
    for j in range(TEXT_DEPTH):
        pre = f"text.blocks.{j}"
        init_norm(p, f"{pre}.ln1", dim)
        init_attention(p, f"{pre}.attn", rng, dim, std)
        init_norm(p, f"{pre}.ln2", dim)
        init_ffn(p, f"{pre}.ffn", rng, dim, 2 * dim, std)
    init_norm(p, "text.ln_f", dim)
    return p


def text_embed(p: Params, tokens: np.ndarray) -> Tensor:
    """Per-token embeddings (B, T, D) of the frozen text encoder; never trained."""
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    vocab = p["text.embed"].shape[0]
    if tokens.size and (tokens.min() < 0 or tokens.max() >= vocab):
        raise InputError(f"instruction token outside vocabulary of size {vocab}")
    heads = TEXT_HEADS
    with ad.no_grad():
        x = ad.embedding(p["text.embed"], tokens) + p["text.pos"].data[: tokens.shape[1]]
        for j in range(TEXT_DEPTH):
            x = transformer_block(x, p, f"text.blocks.{j}", heads)
        x = norm(x, p, "text.ln_f")
    return Tensor(x.data)


# ---------------------------------------------------------------- CVE layer


def init_cve_layer(p: Params, prefix: str, rng: np.random.Generator, dim: int, bottleneck: int, context: str = "cve") -> None:
    """Refiners start as identities (zero down-projection)."""
    for side in ("vis", "txt"):
        init_linear(p, f"{prefix}.{side}_up", rng, dim, bottleneck, std=1.0 / np.sqrt(dim), bias=False)
        p[f"{prefix}.{side}_down.weight"] = Tensor(np.zeros((bottleneck, dim)), name=f"{prefix}.{side}_down.weight")
    if context == "cve":
        for part in ("q", "k", "v"):
            init_linear(p, f"{prefix}.{part}", rng, dim, dim, std=1.0 / np.sqrt(dim), bias=False)
        for n in ("ln_q", "ln_z", "ln_t"):
            init_norm(p, f"{prefix}.{n}", dim)
    elif context == "concat":
        init_linear(p, f"{prefix}.concat", rng, 2 * dim, dim, std=1.0 / np.sqrt(2 * dim))


def residual_refine(x: Tensor, p: Params, prefix: str) -> Tensor:
    """``x + GELU(x @ W_up) @ W_down``."""
    return x + ad.matmul(ad.gelu(ad.matmul(x, p[f"{prefix}_up.weight"])), p[f"{prefix}_down.weight"])


def extract_context(z_hat: Tensor, t_hat: Tensor, p: Params, prefix: str) -> Tensor:
    """Cross-attention pooling of ``[norm(z_hat); norm(t_hat)]`` queried by the summary token."""
    if z_hat.shape[1] == 0:
        raise ContractError("context extraction needs at least one visual token")
    batch, _, dim = z_hat.shape
    query_src = ad.layer_norm(t_hat, p[f"{prefix}.ln_q.gamma"], p[f"{prefix}.ln_q.beta"])
    q = ad.matmul(query_src[:, SUMMARY_INDEX:SUMMARY_INDEX + 1, :], p[f"{prefix}.q.weight"])
    kv = ad.concat(
        [
            ad.layer_norm(z_hat, p[f"{prefix}.ln_z.gamma"], p[f"{prefix}.ln_z.beta"]),
            ad.layer_norm(t_hat, p[f"{prefix}.ln_t.gamma"], p[f"{prefix}.ln_t.beta"]),
        ],
        axis=1,
    )
    k = ad.matmul(kv, p[f"{prefix}.k.weight"])
    v = ad.matmul(kv, p[f"{prefix}.v.weight"])
    attn = ad.softmax(ad.matmul(q, ad.swap_last(k)) * (1.0 / np.sqrt(dim)), axis=-1)
    return ad.reshape(ad.matmul(attn, v), (batch, dim))


def contextual_variant(kind: str, z_hat: Tensor, t_hat: Tensor, p: Params, prefix: str) -> Tensor:
    """Context vector under one of the ablation constructions."""
    if kind == "image_only":
        return ad.mean(z_hat, axis=1)
    summary = t_hat[:, SUMMARY_INDEX, :]
    if kind == "text_only":
        return summary
    if kind == "concat":
        joined = ad.concat([ad.mean(z_hat, axis=1), summary], axis=-1)
        return ad.linear(joined, p[f"{prefix}.concat.weight"], p[f"{prefix}.concat.bias"])
    if kind == "cve":
        return extract_context(z_hat, t_hat, p, prefix)
    raise InputError(f"unknown context kind {kind!r}; expected one of {CONTEXT_KINDS}")


def cve_step(z: Tensor, state: ContextState, p: Params, prefix: str, layer: int, kind: str = "cve") -> ContextState:
    """Refine both streams, pool a new context, and thread the refined text onward."""
    z_hat = residual_refine(z, p, f"{prefix}.vis")
    t_hat = residual_refine(state.t, p, f"{prefix}.txt")
    c = contextual_variant(kind, z_hat, t_hat, p, prefix)
    return ContextState(c=c, t=t_hat, layer=layer)
