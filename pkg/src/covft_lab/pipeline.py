"""The toy multimodal model: encoder -> projector -> causal decoder, plus the loss."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .comoe import RoutingPolicy, init_experts_from_ffn
from .cve import init_cve_layer, init_text_encoder, text_embed
from .encoder import EncoderConfig, EncoderOutput, block_prefix, encode, init_encoder
from .errors import ConfigError, InputError
from .layers import Params, dense, init_linear, init_norm, init_attention, init_ffn, norm, normal, transformer_block
from .taskgen import INSTRUCTION_LEN, MAX_ANSWER_LEN, Sample, Vocab

# named RNG streams so structural variants never perturb the shared base init
STREAM_BASE, STREAM_CVE, STREAM_LORA, STREAM_VPT, STREAM_ROUTER = 1, 2, 3, 4, 5


@dataclass(frozen=True)
class DecoderConfig:
    vocab: int = Vocab.SIZE
    dim: int = 48
    depth: int = 2
    heads: int = 4
    max_len: int = 32

    def __post_init__(self):
        if self.dim % self.heads:
            raise ConfigError(f"decoder dim {self.dim} not divisible by heads {self.heads}")


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)

    def __post_init__(self):
        need = self.encoder.num_patches + INSTRUCTION_LEN + MAX_ANSWER_LEN + 1
        if self.decoder.max_len < need:
            raise ConfigError(f"decoder max_len {self.decoder.max_len} < required sequence length {need}")


@dataclass
class Model:
    config: ModelConfig
    params: Params
    seed: int = 0

    def copy(self) -> "Model":
        return Model(self.config, {k: Tensor(v.data.copy(), name=k) for k, v in self.params.items()}, self.seed)

    def names(self, prefix: str = "") -> list[str]:
        return [k for k in self.params if k.startswith(prefix)]

    def n_params(self, names: Sequence[str] | None = None) -> int:
        names = self.params if names is None else names
        return int(sum(self.params[k].size for k in names))


# ---------------------------------------------------------------- construction


def _stream(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream])


def init_model(config: ModelConfig, seed: int = 0) -> Model:
    """Base parameters from the base stream, then any structural variant on top."""
    rng = _stream(seed, STREAM_BASE)
    enc = config.encoder
    base_enc = replace(enc, experts=0, vpt_prompts=0, lora_rank=0)
    p = init_encoder(base_enc, rng)
    dec = config.decoder
    # fan-in scaled so visual tokens are not drowned by the text embeddings
    init_linear(p, "projector.fc1", rng, enc.dim, dec.dim, std=enc.dim ** -0.5)
    init_linear(p, "projector.fc2", rng, dec.dim, dec.dim, std=dec.dim ** -0.5)
    p["decoder.embed"] = Tensor(normal(rng, (dec.vocab, dec.dim)), name="decoder.embed")
    p["decoder.pos"] = Tensor(normal(rng, (dec.max_len, dec.dim)), name="decoder.pos")
    for j in range(dec.depth):
        pre = f"decoder.blocks.{j}"
        init_norm(p, f"{pre}.ln1", dec.dim)
        init_attention(p, f"{pre}.attn", rng, dec.dim)
        init_norm(p, f"{pre}.ln2", dec.dim)
        init_ffn(p, f"{pre}.ffn", rng, dec.dim, 4 * dec.dim)
    init_norm(p, "decoder.ln_f", dec.dim)
    init_linear(p, "decoder.head", rng, dec.dim, dec.vocab)
    p.update(init_text_encoder(enc.dim))
    base = Model(ModelConfig(base_enc, dec), p, seed)
    return with_structure(base, enc)


def with_structure(model: Model, enc: EncoderConfig) -> Model:
    """Copy ``model`` (a plain-encoder model) and add CoMoE/CVE, LoRA or prompts per ``enc``."""
    cur = model.config.encoder
    if cur.experts or cur.vpt_prompts or cur.lora_rank:
        raise ConfigError("structural upgrades start from a plain-encoder model")
    out = model.copy()
    p = out.params
    seed = model.seed
    if enc.experts:
        rng = _stream(seed, STREAM_CVE)
        router_rng = _stream(seed, STREAM_ROUTER)
        for i in enc.comoe_blocks:
            pre = block_prefix(i)
            init_experts_from_ffn(p, f"{pre}.ffn", f"{pre}.moe", enc.experts)
            init_cve_layer(p, f"{pre}.cve", rng, enc.dim, enc.cve_rank, enc.context)
            if enc.router_init_std:
                # Identical experts under a zero router are a fixed point of training: every expert gets
                # the same gradient and the router gets none. A small random router breaks the tie while
                # the block output still equals the donor FFN exactly.
                w = p[f"{pre}.moe.router.weight"]
                w.data = router_rng.normal(0.0, enc.router_init_std, w.shape)
    if enc.lora_rank:
        from .vft import apply_lora

        apply_lora(p, enc, enc.lora_rank, _stream(seed, STREAM_LORA))
    if enc.vpt_prompts:
        from .vft import apply_vpt

        apply_vpt(p, enc, enc.vpt_prompts, _stream(seed, STREAM_VPT))
    out.config = replace(model.config, encoder=enc)
    return out


# ---------------------------------------------------------------- batches


@dataclass
class Batch:
    images: np.ndarray  # (B, H, W, 3)
    instructions: np.ndarray  # (B, INSTRUCTION_LEN)
    inputs: np.ndarray  # (B, A + 1): <bos>, answer tokens, padding
    targets: np.ndarray  # (B, A + 1): answer tokens, <eos>, padding
    mask: np.ndarray  # (B, A + 1) 1.0 on scored positions
    kinds: list[str]
    sample_ids: np.ndarray

    def __len__(self) -> int:
        return len(self.kinds)

    @classmethod
    def from_samples(cls, samples: Sequence[Sample], ids: Sequence[int] | None = None) -> "Batch":
        if not samples:
            raise InputError("empty batch")
        width = max(len(s.answer) for s in samples) + 1
        b = len(samples)
        inputs = np.full((b, width), Vocab.PAD, dtype=np.int64)
        targets = np.full((b, width), Vocab.PAD, dtype=np.int64)
        mask = np.zeros((b, width))
        for r, s in enumerate(samples):
            if not s.answer:
                raise InputError("sample has an empty answer")
            n = len(s.answer)
            inputs[r, 0] = Vocab.BOS
            inputs[r, 1:n + 1] = s.answer
            targets[r, :n] = s.answer
            targets[r, n] = Vocab.EOS
            mask[r, :n + 1] = 1.0
        return cls(
            images=np.stack([s.image for s in samples]),
            instructions=np.array([s.instruction for s in samples], dtype=np.int64),
            inputs=inputs,
            targets=targets,
            mask=mask,
            kinds=[s.task_kind for s in samples],
            sample_ids=np.asarray(ids if ids is not None else [s.scene_id for s in samples]),
        )


# ---------------------------------------------------------------- forward


def project(p: Params, z: Tensor) -> Tensor:
    """Two-layer MLP from encoder width to decoder width, per token."""
    if z.shape[-1] != p["projector.fc1.weight"].shape[0]:
        raise InputError(f"projector expects width {p['projector.fc1.weight'].shape[0]}, got {z.shape[-1]}")
    return dense(ad.gelu(dense(z, p, "projector.fc1")), p, "projector.fc2")


def encode_batch(model: Model, batch: Batch, policy: RoutingPolicy | None = None) -> EncoderOutput:
    enc = model.config.encoder
    text = text_embed(model.params, batch.instructions) if enc.experts else None
    return encode(model.params, enc, batch.images, text, policy, batch.sample_ids)


def decode(model: Model, visual: Tensor, instructions: np.ndarray, answer_inputs: np.ndarray) -> Tensor:
    """Causal decoder over [visual; instruction; answer inputs]; logits for the answer part only."""
    p, dec = model.params, model.config.decoder
    text_ids = np.concatenate([instructions, answer_inputs], axis=1)
    seq = ad.concat([visual, ad.embedding(p["decoder.embed"], text_ids)], axis=1)
    length = seq.shape[1]
    if length > dec.max_len:
        raise ConfigError(f"sequence length {length} exceeds decoder max_len {dec.max_len}")
    x = seq + p["decoder.pos"][:length]
    for j in range(dec.depth):
        x = transformer_block(x, p, f"decoder.blocks.{j}", dec.heads, causal=True)
    x = norm(x[:, length - answer_inputs.shape[1]:, :], p, "decoder.ln_f")
    return dense(x, p, "decoder.head")


def forward(model: Model, batch: Batch, policy: RoutingPolicy | None = None) -> tuple[Tensor, EncoderOutput]:
    enc_out = encode_batch(model, batch, policy)
    logits = decode(model, project(model.params, enc_out.features), batch.instructions, batch.inputs)
    return logits, enc_out


def instruction_loss(model: Model, batch: Batch, policy: RoutingPolicy | None = None) -> Tensor:
    """Next-token loss summed over answer positions (incl. <eos>), averaged over the batch."""
    logits, _ = forward(model, batch, policy)
    return ad.cross_entropy(logits, batch.targets, batch.mask, scale=1.0 / len(batch))


# ---------------------------------------------------------------- readout


def generate(
    model: Model,
    images: np.ndarray,
    instructions: np.ndarray,
    max_len: int = MAX_ANSWER_LEN + 1,
    sample_ids: np.ndarray | None = None,
) -> list[list[int]]:
    """Greedy decoding until <eos> or ``max_len`` tokens; the <eos> is not returned."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    instructions = np.atleast_2d(np.asarray(instructions, dtype=np.int64))
    b = images.shape[0]
    ids = np.arange(b) if sample_ids is None else np.asarray(sample_ids)
    dummy = Batch(images, instructions, np.zeros((b, 1), np.int64), np.zeros((b, 1), np.int64),
                  np.zeros((b, 1)), [""] * b, ids)
    with ad.no_grad():
        visual = project(model.params, encode_batch(model, dummy).features)
        seq = np.full((b, 1), Vocab.BOS, dtype=np.int64)
        done = np.zeros(b, dtype=bool)
        out: list[list[int]] = [[] for _ in range(b)]
        for _ in range(max_len):
            logits = decode(model, visual, instructions, seq)
            nxt = logits.data[:, -1, :].argmax(axis=-1)
            for r in range(b):
                if done[r]:
                    continue
                if nxt[r] == Vocab.EOS:
                    done[r] = True
                else:
                    out[r].append(int(nxt[r]))
            if done.all():
                break
            seq = np.concatenate([seq, nxt[:, None]], axis=1)
    return out


def evaluate(model: Model, samples: Sequence[Sample], batch_size: int = 128) -> dict[str, float]:
    """Exact-match accuracy per task kind plus the unweighted ``macro`` mean."""
    if not samples:
        raise InputError("cannot evaluate on an empty dataset")
    hits: dict[str, list[int]] = {}
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        preds = generate(
            model,
            np.stack([s.image for s in chunk]),
            np.array([s.instruction for s in chunk]),
            sample_ids=np.array([s.scene_id for s in chunk]),
        )
        for s, pred in zip(chunk, preds):
            hits.setdefault(s.task_kind, []).append(int(pred == list(s.answer)))
    acc = {k: float(np.mean(v)) for k, v in sorted(hits.items())}
    acc["macro"] = float(np.mean(list(acc.values())))
    return acc


def evaluation_counts(samples: Sequence[Sample]) -> dict[str, int]:
    counts: dict[str, int] = {}
    for s in samples:
        counts[s.task_kind] = counts.get(s.task_kind, 0) + 1
    return counts

