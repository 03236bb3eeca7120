"""ViT-style image encoder whose FFN sub-blocks can be swapped for CoMoE."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .comoe import ExpertSet, RoutingPolicy, RoutingWeights, comoe_forward, route
from .cve import CONTEXT_KINDS, ContextState, cve_step
from .errors import ConfigError, ContractError, DimensionError
from .layers import Params, ffn, init_attention, init_ffn, init_linear, init_norm, norm, normal, self_attention


@dataclass(frozen=True)
class EncoderConfig:
    image_size: int = 16
    patch_size: int = 4
    depth: int = 8
    dim: int = 32
    heads: int = 4
    mlp_ratio: int = 4
    comoe_start: int = 4
    comoe_end: int = 7
    feature_layer: int = 7
    experts: int = 0  # 0 disables CoMoE
    context: str = "cve"
    routing: str = "dense"
    # seeded router-weight noise applied when experts are added; 0 keeps the zero router
    router_init_std: float = 0.01
    vpt_prompts: int = 0
    lora_rank: int = 0
    channels: int = 3

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if not 0 <= self.feature_layer < self.depth:
            raise ConfigError(f"feature_layer {self.feature_layer} outside 0..{self.depth - 1}")
        if self.experts:
            if self.experts < 2:
                raise ConfigError("CoMoE needs at least 2 experts")
            if not 0 <= self.comoe_start <= self.comoe_end < self.depth:
                raise ConfigError(
                    f"CoMoE range {self.comoe_start}..{self.comoe_end} invalid for depth {self.depth}"
                )
            if self.context not in CONTEXT_KINDS:
                raise ConfigError(f"unknown context kind {self.context!r}")
            RoutingPolicy.parse(self.routing)
        if self.vpt_prompts < 0 or self.lora_rank < 0:
            raise ConfigError("vpt_prompts and lora_rank must be non-negative")
        if not self.router_init_std >= 0:
            raise ConfigError(f"router_init_std must be >= 0, got {self.router_init_std}")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def hidden(self) -> int:
        return self.mlp_ratio * self.dim

    @property
    def cve_rank(self) -> int:
        return max(1, self.dim // 4)

    def uses_comoe(self, block: int) -> bool:
        return bool(self.experts) and self.comoe_start <= block <= self.comoe_end

    @property
    def comoe_blocks(self) -> list[int]:
        return [i for i in range(self.depth) if self.uses_comoe(i)]


@dataclass
class EncoderOutput:
    features: Tensor  # (B, L_v, D)
    ctx_trace: list[ContextState] = field(default_factory=list)
    routing_trace: list[RoutingWeights] = field(default_factory=list)


def block_prefix(i: int) -> str:
    return f"encoder.blocks.{i}"


def init_encoder(cfg: EncoderConfig, rng: np.random.Generator) -> Params:
    """Plain ViT parameters (no CoMoE, LoRA or prompts; those are added by upgrades)."""
    p: Params = {}
    patch_in = cfg.patch_size * cfg.patch_size * cfg.channels
    init_linear(p, "encoder.patch", rng, patch_in, cfg.dim)
    p["encoder.pos"] = Tensor(normal(rng, (cfg.num_patches, cfg.dim)), name="encoder.pos")
    for i in range(cfg.depth):
        pre = block_prefix(i)
        init_norm(p, f"{pre}.ln1", cfg.dim)
        init_attention(p, f"{pre}.attn", rng, cfg.dim)
        init_norm(p, f"{pre}.ln2", cfg.dim)
        init_ffn(p, f"{pre}.ffn", rng, cfg.dim, cfg.hidden)
    return p


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    b, h, w, ch = images.shape
    g = h // patch
    x = images.reshape(b, g, patch, g, patch, ch).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, g * g, patch * patch * ch)


def patch_embed(p: Params, cfg: EncoderConfig, images: np.ndarray) -> Tensor:
    """(B, H, W, 3) or (H, W, 3) images -> (B, L_v, D) tokens with position embeddings."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    if images.ndim != 4 or images.shape[1:3] != (cfg.image_size, cfg.image_size) or images.shape[3] != cfg.channels:
        raise DimensionError(
            f"expected images of shape (B, {cfg.image_size}, {cfg.image_size}, {cfg.channels}), got {images.shape}"
        )
    flat = patchify(images, cfg.patch_size)
    return ad.linear(flat, p["encoder.patch.weight"], p["encoder.patch.bias"]) + p["encoder.pos"]


def block_forward(
    z: Tensor,
    p: Params,
    cfg: EncoderConfig,
    i: int,
    ctx: ContextState | None = None,
    policy: RoutingPolicy | None = None,
    sample_ids: np.ndarray | None = None,
) -> tuple[Tensor, RoutingWeights | None]:
    """One pre-norm block; the FFN sub-block is CoMoE when block ``i`` is in range."""
    pre = block_prefix(i)
    z = z + self_attention(norm(z, p, f"{pre}.ln1"), p, f"{pre}.attn", cfg.heads)
    h = norm(z, p, f"{pre}.ln2")
    if not cfg.uses_comoe(i):
        return z + ffn(h, p, f"{pre}.ffn"), None
    if ctx is None:
        raise ContractError(f"block {i} uses CoMoE but no context was supplied")
    experts = ExpertSet(f"{pre}.moe", cfg.experts)
    policy = policy or RoutingPolicy.parse(cfg.routing)
    rw = route(ctx.c, p, experts, policy, sample_ids, layer=i)
    return z + comoe_forward(h, rw, p, experts), rw


def encode(
    p: Params,
    cfg: EncoderConfig,
    images: np.ndarray,
    text: Tensor | None = None,
    policy: RoutingPolicy | None = None,
    sample_ids: np.ndarray | None = None,
) -> EncoderOutput:
    """Run blocks 0..feature_layer, threading context and routing state.

    ``text`` holds the frozen text embeddings (B, T, D) and is required when
    CoMoE is enabled. Prompt tokens (VPT) are stripped from the returned features.
    """
    z = patch_embed(p, cfg, images)
    batch = z.shape[0]
    n_prompts = cfg.vpt_prompts
    if n_prompts:
        prompts = p["encoder.vpt.prompts"]
        z = ad.concat([ad.mul(prompts, np.ones((batch, 1, 1))), z], axis=1)
    if cfg.experts and text is None:
        raise ContractError("CoMoE encoder needs instruction embeddings")
    out = EncoderOutput(features=z)
    state = ContextState(c=None, t=text, layer=-1) if cfg.experts else None
    for i in range(cfg.feature_layer + 1):
        if cfg.uses_comoe(i):
            state = cve_step(z, state, p, f"{block_prefix(i)}.cve", i, cfg.context)
            out.ctx_trace.append(state)
        z, rw = block_forward(z, p, cfg, i, state if cfg.uses_comoe(i) else None, policy, sample_ids)
        if rw is not None:
            out.routing_trace.append(rw)
    out.features = z[:, n_prompts:, :] if n_prompts else z
    return out
