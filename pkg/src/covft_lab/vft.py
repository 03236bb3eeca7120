"""Visual fine-tuning strategies, AdamW and the two-stage training loop."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .autodiff import Tensor
from .comoe import RoutingPolicy
from .encoder import EncoderConfig, block_prefix
from .errors import ConfigError, NumericError
from .layers import Params
from .pipeline import Batch, Model, decode, encode_batch, evaluate, forward, project, with_structure
from . import autodiff as ad
from .taskgen import Sample

STRATEGY_KINDS = ("freeze", "full_ft", "bitfit", "lora", "vpt", "covft")
STAGES = ("pretrain", "instruct")


@dataclass(frozen=True)
class Strategy:
    kind: str = "freeze"
    lora_rank: int = 8
    vpt_prompts: int = 4

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise ConfigError(f"unknown strategy {self.kind!r}; expected one of {STRATEGY_KINDS}")
        if self.kind == "vpt" and self.vpt_prompts < 1:
            raise ConfigError("vpt needs at least one prompt token")
        if self.kind == "lora" and self.lora_rank < 1:
            raise ConfigError("lora rank must be >= 1")

    def encoder_config(self, enc: EncoderConfig, experts: int = 4) -> EncoderConfig:
        """Structural encoder config this strategy runs on, derived from a plain config."""
        base = replace(enc, experts=0, lora_rank=0, vpt_prompts=0)
        if self.kind == "covft":
            return replace(base, experts=enc.experts or experts)
        if self.kind == "lora":
            return replace(base, lora_rank=self.lora_rank)
        if self.kind == "vpt":
            return replace(base, vpt_prompts=self.vpt_prompts)
        return base


# ---------------------------------------------------------------- masks


def _is_encoder_norm(name: str) -> bool:
    return name.startswith("encoder.blocks.") and (".ln1." in name or ".ln2." in name)


def trainable_mask(model: Model, strategy: Strategy, stage: str) -> set[str]:
    if stage not in STAGES:
        raise ConfigError(f"unknown stage {stage!r}")
    names = list(model.params)
    mask = {n for n in names if n.startswith("projector.")}
    if stage == "pretrain":
        return mask
    mask |= {n for n in names if n.startswith("decoder.")}
    encoder = [n for n in names if n.startswith("encoder.")]
    kind = strategy.kind
    if kind == "full_ft":
        mask |= set(encoder)
    elif kind == "bitfit":
        mask |= {n for n in encoder if n.endswith(".bias") and ".moe." not in n and ".cve." not in n}
    elif kind == "lora":
        mask |= {n for n in encoder if ".lora_" in n}
    elif kind == "vpt":
        mask |= {n for n in encoder if n.startswith("encoder.vpt.")}
    elif kind == "covft":
        if not model.config.encoder.experts:
            raise ConfigError("covft needs a model with CoMoE blocks")
        mask |= {n for n in encoder if ".moe." in n or ".cve." in n or _is_encoder_norm(n)}
    return mask


def set_trainable(model: Model, mask: set[str]) -> None:
    for name, t in model.params.items():
        t.requires_grad = name in mask
        t.grad = None


# ---------------------------------------------------------------- structural variants


def apply_lora(p: Params, enc: EncoderConfig, rank: int, rng: np.random.Generator) -> list[str]:
    """Low-rank deltas ``A @ B`` on every encoder query and value projection; ``B`` starts at zero."""
    if rank < 1 or rank > enc.dim:
        raise ConfigError(f"lora rank {rank} must lie in 1..{enc.dim}")
    added = []
    for i in range(enc.depth):
        for part in ("q", "v"):
            pre = f"{block_prefix(i)}.attn.{part}"
            d_in, d_out = p[f"{pre}.weight"].shape
            p[f"{pre}.lora_a"] = Tensor(rng.normal(0.0, 1.0 / math.sqrt(d_in), (d_in, rank)), name=f"{pre}.lora_a")
            p[f"{pre}.lora_b"] = Tensor(np.zeros((rank, d_out)), name=f"{pre}.lora_b")
            added += [f"{pre}.lora_a", f"{pre}.lora_b"]
    return added


def apply_vpt(p: Params, enc: EncoderConfig, n_prompts: int, rng: np.random.Generator) -> list[str]:
    """Learnable prompt tokens prepended once to the patch tokens (shallow variant)."""
    if n_prompts < 1:
        raise ConfigError("vpt needs at least one prompt token")
    p["encoder.vpt.prompts"] = Tensor(rng.normal(0.0, 0.02, (n_prompts, enc.dim)), name="encoder.vpt.prompts")
    return ["encoder.vpt.prompts"]


def prepare(base: Model, strategy: Strategy, experts: int = 4, **encoder_overrides) -> Model:
    """Model for ``strategy`` built on a plain-encoder ``base`` (typically after pretraining)."""
    enc = strategy.encoder_config(replace(base.config.encoder, **encoder_overrides), experts)
    return with_structure(base, enc)


# ---------------------------------------------------------------- optimizer


@dataclass(frozen=True)
class AdamWHyper:
    lr: float = 3e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adamw_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray | None],
    state: OptimizerState,
    hyper: AdamWHyper,
    lr: float | None = None,
) -> None:
    """One in-place AdamW update with bias correction and decoupled weight decay."""
    lr = hyper.lr if lr is None else lr
    b1, b2 = hyper.betas
    for name, g in grads.items():
        if g is not None and not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for {name!r} at step {state.step + 1}")
    state.step += 1
    t = state.step
    c1, c2 = 1.0 - b1**t, 1.0 - b2**t
    for name, param in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(param.data)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(param.data)
            state.v[name] = np.zeros_like(param.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + hyper.eps)
        param.data = param.data * (1.0 - lr * hyper.weight_decay) - lr * update


def cosine_lr(step: int, total: int, base: float, warmup_frac: float = 0.05) -> float:
    """Linear warmup then cosine decay to zero; ``step`` counts from 1."""
    warm = max(1, int(round(total * warmup_frac)))
    if step <= warm:
        return base * step / warm
    progress = (step - warm) / max(1, total - warm)
    return base * 0.5 * (1.0 + math.cos(math.pi * min(1.0, progress)))


# ---------------------------------------------------------------- training


@dataclass(frozen=True)
class TrainConfig:
    pretrain_steps: int = 2000
    instruct_steps: int = 5000
    batch_size: int = 32
    lr_pretrain: float = 1e-3
    lr_instruct: float = 3e-4
    weight_decay: float = 0.01
    warmup_frac: float = 0.05
    log_every: int = 10
    eval_every: int = 0
    snapshot_every: int = 0
    checkpoint_every: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.pretrain_steps < 0 or self.instruct_steps < 0:
            raise ConfigError("batch_size must be positive and step budgets non-negative")


@dataclass
class GradSnapshot:
    step: int
    vector: np.ndarray
    norm: float


@dataclass
class RunRecord:
    """Per-step metrics; mirrored line by line to ``path`` when given."""

    strategy: str
    rows: list[dict] = field(default_factory=list)
    path: Path | None = None
    snapshots: list[GradSnapshot] = field(default_factory=list)
    snapshot_dir: Path | None = None
    aborted: str | None = None

    def log(self, row: dict) -> None:
        self.rows.append(row)
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(row, sort_keys=True) + "\n")

    def losses(self, stage: str = "instruct") -> np.ndarray:
        return np.array([r["loss"] for r in self.rows if r["stage"] == stage])

    def add_snapshot(self, step: int, vector: np.ndarray) -> str:
        snap = GradSnapshot(step, vector, float(np.linalg.norm(vector)))
        self.snapshots.append(snap)
        sid = f"g{step:06d}"
        if self.snapshot_dir is not None:
            self.snapshot_dir.mkdir(parents=True, exist_ok=True)
            vector.astype("<f8").tofile(self.snapshot_dir / f"{sid}.bin")
        return sid


@dataclass
class TrainHooks:
    on_checkpoint: Callable[[int, Model], None] | None = None
    on_eval: Callable[[int, dict], None] | None = None


def batch_stream(n: int, batch_size: int, rng: np.random.Generator):
    """Endless minibatches of indices: epochs of seeded permutations."""
    while True:
        perm = rng.permutation(n)
        for start in range(0, n - batch_size + 1 if n >= batch_size else 1, batch_size):
            yield perm[start:start + batch_size]


SUBSEED_DATA, SUBSEED_ROUTING = 11, 13


def frozen_features(model: Model, data: Sequence[Sample], chunk: int = 256) -> np.ndarray:
    """Encoder features for every sample; valid while the encoder is frozen and context-free."""
    out = []
    with ad.no_grad():
        for start in range(0, len(data), chunk):
            batch = Batch.from_samples(data[start:start + chunk])
            out.append(encode_batch(model, batch).features.data)
    return np.concatenate(out)


def run_stage(
    model: Model,
    strategy: Strategy,
    stage: str,
    data: Sequence[Sample],
    cfg: TrainConfig,
    record: RunRecord,
    eval_data: Sequence[Sample] | None = None,
    hooks: TrainHooks | None = None,
    routing: str | None = None,
) -> Model:
    steps = cfg.pretrain_steps if stage == "pretrain" else cfg.instruct_steps
    base_lr = cfg.lr_pretrain if stage == "pretrain" else cfg.lr_instruct
    if steps == 0:
        return model
    hooks = hooks or TrainHooks()
    mask = trainable_mask(model, strategy, stage)
    set_trainable(model, mask)
    trainable = {k: model.params[k] for k in model.params if k in mask}
    encoder_trainable = sorted(k for k in trainable if k.startswith("encoder."))
    hyper = AdamWHyper(lr=base_lr, weight_decay=cfg.weight_decay)
    state = OptimizerState()
    stage_id = STAGES.index(stage)
    stream = batch_stream(len(data), min(cfg.batch_size, len(data)), np.random.default_rng([cfg.seed, SUBSEED_DATA, stage_id]))
    routing = routing or model.config.encoder.routing
    cache = frozen_features(model, data) if not encoder_trainable and not model.config.encoder.experts else None
    if hooks.on_checkpoint and stage == "instruct":
        hooks.on_checkpoint(0, model)
    for step in range(1, steps + 1):
        idx = next(stream)
        batch = Batch.from_samples([data[i] for i in idx], ids=idx)
        policy = RoutingPolicy.parse(routing, seed=cfg.seed * 1000 + SUBSEED_ROUTING, step=step)
        for t in trainable.values():
            t.grad = None
        if cache is not None:
            logits = decode(model, project(model.params, Tensor(cache[idx])), batch.instructions, batch.inputs)
            enc_out = None
        else:
            logits, enc_out = forward(model, batch, policy)
        loss = ad.cross_entropy(logits, batch.targets, batch.mask, scale=1.0 / len(batch))
        if not np.isfinite(loss.data):
            raise NumericError(f"non-finite loss at {stage} step {step}")
        loss.backward()
        lr = cosine_lr(step, steps, base_lr, cfg.warmup_frac)
        row = None
        if step % cfg.log_every == 0 or step == 1 or step == steps:
            row = {"step": step, "stage": stage, "loss": float(loss.data), "lr": lr, "strategy": strategy.kind}
            if enc_out is not None and enc_out.routing_trace:
                row["routing"] = [rw.g.data.mean(axis=0).tolist() for rw in enc_out.routing_trace]
        if stage == "instruct" and cfg.snapshot_every and encoder_trainable and step % cfg.snapshot_every == 0:
            vec = np.concatenate([
                (trainable[k].grad if trainable[k].grad is not None else np.zeros(trainable[k].shape)).ravel()
                for k in encoder_trainable
            ])
            sid = record.add_snapshot(step, vec)
            row = row or {"step": step, "stage": stage, "loss": float(loss.data), "lr": lr, "strategy": strategy.kind}
            row["grad_snapshot_id"] = sid
        adamw_step(trainable, {k: t.grad for k, t in trainable.items()}, state, hyper, lr)
        if stage == "instruct" and cfg.eval_every and eval_data and step % cfg.eval_every == 0:
            acc = evaluate(model, eval_data)
            row = row or {"step": step, "stage": stage, "loss": float(loss.data), "lr": lr, "strategy": strategy.kind}
            row["eval"] = acc
            if hooks.on_eval:
                hooks.on_eval(step, acc)
        if row is not None:
            record.log(row)
        if hooks.on_checkpoint and stage == "instruct" and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            hooks.on_checkpoint(step, model)
    for t in model.params.values():
        t.requires_grad = False
        t.grad = None
    return model


def train(
    model: Model,
    strategy: Strategy,
    cfg: TrainConfig,
    instruct_data: Sequence[Sample] | None = None,
    pretrain_data: Sequence[Sample] | None = None,
    eval_data: Sequence[Sample] | None = None,
    stages: Sequence[str] = STAGES,
    record: RunRecord | None = None,
    hooks: TrainHooks | None = None,
    routing: str | None = None,
) -> RunRecord:
    """Run the requested stages in order; aborts leave the partial record intact."""
    record = record or RunRecord(strategy.kind)
    if strategy.kind == "covft" and not model.config.encoder.experts:
        raise ConfigError("covft needs a model with CoMoE blocks")
    try:
        for stage in stages:
            data = pretrain_data if stage == "pretrain" else instruct_data
            if not data:
                raise ConfigError(f"no data for stage {stage!r}")
            run_stage(model, strategy, stage, data, cfg, record, eval_data, hooks, routing)
    except NumericError as exc:
        record.aborted = str(exc)
        raise
    return record
