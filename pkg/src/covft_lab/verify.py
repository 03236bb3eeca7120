"""The invariant suite behind ``covft-lab verify``: gradients, modulation, init equivalence, masks."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .comoe import RoutingPolicy, comoe_forward, init_experts_from_ffn, route, verify_gradient_modulation
from .encoder import EncoderConfig
from .layers import ffn, init_ffn
from .pipeline import Batch, ModelConfig, init_model, instruction_loss
from .taskgen import TASK_KINDS, build_dataset, pretrain_pairs
from .vft import Strategy, TrainConfig, prepare, train, trainable_mask

ROUTINGS = ("dense", "sparse_2", "uniform", "random_2")


@dataclass
class CheckResult:
    name: str
    passed: bool
    seconds: float = 0.0
    detail: dict = field(default_factory=dict)

    def line(self) -> str:
        extras = ", ".join(f"{k}={_short(v)}" for k, v in self.detail.items() if not isinstance(v, (dict, list)))
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name} ({self.seconds:.1f}s) {extras}"


def _short(v) -> str:
    return f"{v:.3g}" if isinstance(v, float) else str(v)


def _timed(name: str, fn: Callable[[], tuple[bool, dict]]) -> CheckResult:
    t0 = time.perf_counter()
    passed, detail = fn()
    return CheckResult(name, bool(passed), time.perf_counter() - t0, detail)


# ---------------------------------------------------------------- gradients


def perturbed_covft_model(seed: int = 0, scale: float = 0.05):
    """CoVFT model pushed off its symmetric init: distinct experts, live router and refiners."""
    model = init_model(ModelConfig(EncoderConfig(experts=4)), seed)
    rng = np.random.default_rng([seed, 0xF1D])
    for name, t in model.params.items():
        if not name.startswith("text."):
            t.data = t.data + rng.normal(0.0, scale, t.shape)
    return model


def check_gradients(seed: int = 0, step: float = 1e-5, coords: int = 2, tol: float = 1e-4) -> tuple[bool, dict]:
    model = perturbed_covft_model(seed)
    sample = build_dataset(TASK_KINDS, 15, seed=seed)[seed % 15]
    batch = Batch.from_samples([sample])
    params = {k: t for k, t in model.params.items() if not k.startswith("text.")}
    for t in params.values():
        t.requires_grad = True
    report: dict[str, float] = {}
    err = ad.finite_diff_check(lambda: instruction_loss(model, batch), params, step=step, max_coords=coords, report=report)
    worst = max(report, key=report.get)
    return err < tol, {"max_rel_err": err, "worst_tensor": worst, "tensors": len(params), "step": step}


# ---------------------------------------------------------------- modulation


def modulation_configs(n: int = 10, base_seed: int = 0) -> list[dict]:
    """Seeded layer configurations cycling through the routing strategies and expert counts."""
    out = []
    for i in range(n):
        rng = np.random.default_rng([base_seed, i, 0x311])
        experts = (2, 4, 8)[i % 3]
        routing = ROUTINGS[i % len(ROUTINGS)]
        policy = RoutingPolicy.parse(routing, seed=base_seed, step=i)
        if policy.k > experts:
            policy = RoutingPolicy(policy.strategy, experts - 1, policy.seed, policy.step)
        out.append({"seed": int(rng.integers(1 << 31)), "experts": experts, "policy": policy,
                    "batch": int(rng.integers(2, 5)), "tokens": int(rng.integers(3, 7)), "dim": 8})
    return out


def _modulation_layer(conf: dict):
    rng = np.random.default_rng(conf["seed"])
    dim = conf["dim"]
    p = {}
    init_ffn(p, "ffn", rng, dim, 4 * dim, std=0.3)
    experts = init_experts_from_ffn(p, "ffn", "moe", conf["experts"])
    for name, t in p.items():  # distinct experts and a non-trivial router
        t.data = t.data + rng.normal(0.0, 0.3, t.shape)
    z = rng.normal(size=(conf["batch"], conf["tokens"], dim))
    c = rng.normal(size=(conf["batch"], dim))
    return p, experts, z, c, rng


def check_modulation(n: int = 10, seed: int = 0) -> tuple[bool, dict]:
    fails = []
    worst_ratio = worst_chain = 0.0
    for i, conf in enumerate(modulation_configs(n, seed)):
        p, experts, z, c, rng = _modulation_layer(conf)
        ids = np.arange(conf["batch"]) + 100 * i
        rep = verify_gradient_modulation(z, c, p, experts, conf["policy"], rng, ids)
        worst_ratio = max(worst_ratio, rep.ratio_rel_err)
        worst_chain = max(worst_chain, rep.chain_rel_err)
        if not rep.passed:
            fails.append({"config": i, "routing": conf["policy"].label, "checks": rep.checks, "worst": rep.worst_tensor})
    return not fails, {"configs": n, "max_ratio_rel_err": worst_ratio, "max_chain_rel_err": worst_chain, "failures": fails}


# ---------------------------------------------------------------- init equivalence


def check_init_equivalence(n_contexts: int = 100, seed: int = 0) -> tuple[bool, dict]:
    rng = np.random.default_rng([seed, 0xE0])
    dim = 32
    p = {}
    init_ffn(p, "ffn", rng, dim, 4 * dim)
    donor = {k: Tensor(v.data.copy()) for k, v in p.items()}
    experts = init_experts_from_ffn(p, "ffn", "moe", 4)
    z = Tensor(rng.normal(size=(n_contexts, 6, dim)))
    c = Tensor(rng.normal(size=(n_contexts, dim)))
    ref = ffn(z, donor, "ffn").data
    diffs = {}
    with ad.no_grad():
        for routing in ROUTINGS:
            rw = route(c, p, experts, RoutingPolicy.parse(routing, seed=seed), np.arange(n_contexts))
            diffs[routing] = float(np.abs(comoe_forward(z, rw, p, experts).data - ref).max())
    worst = max(diffs.values())
    return worst < 1e-12, {"max_abs_diff": worst, **{f"diff_{k}": v for k, v in diffs.items()}}


# ---------------------------------------------------------------- masks


def check_masks(steps: int = 50, seed: int = 0, strategies=("freeze", "bitfit", "lora", "vpt", "covft")) -> tuple[bool, dict]:
    base = init_model(ModelConfig(), seed)
    cfg = TrainConfig(pretrain_steps=5, instruct_steps=steps, batch_size=8, seed=seed, log_every=steps)
    train(base, Strategy("freeze"), cfg, pretrain_data=pretrain_pairs(64, seed), stages=["pretrain"])
    data = build_dataset(TASK_KINDS, 240, seed=seed)
    out = {}
    ok = True
    for kind in strategies:
        strat = Strategy(kind)
        model = prepare(base, strat)
        before = {k: v.data.copy() for k, v in model.params.items()}
        mask = trainable_mask(model, strat, "instruct")
        train(model, strat, cfg, instruct_data=data, stages=["instruct"])
        changed_outside = [k for k, v in model.params.items() if k not in mask and not np.array_equal(v.data, before[k])]
        moved_inside = sum(not np.array_equal(model.params[k].data, before[k]) for k in mask)
        out[kind] = {"outside_changed": changed_outside[:5], "inside_moved": moved_inside, "mask_size": len(mask)}
        ok &= not changed_outside and moved_inside > 0
    return ok, {"strategies": out}


# ---------------------------------------------------------------- suite


def parameter_budget(seed: int = 0) -> dict:
    """Encoder-trainable counts per strategy at the default shapes."""
    base = init_model(ModelConfig(), seed)
    out = {}
    for kind in ("freeze", "full_ft", "bitfit", "lora", "vpt", "covft"):
        model = prepare(base, Strategy(kind))
        mask = trainable_mask(model, Strategy(kind), "instruct")
        enc = model.names("encoder.")
        out[kind] = {
            "encoder_params": model.n_params(enc),
            "encoder_trainable": model.n_params([k for k in enc if k in mask]),
            "total_trainable": model.n_params(sorted(mask)),
        }
    return out


def check_parameter_budget(seed: int = 0) -> tuple[bool, dict]:
    b = parameter_budget(seed)
    frac = {k: v["encoder_trainable"] / v["encoder_params"] for k, v in b.items()}
    ok = frac["freeze"] < frac["covft"] < frac["full_ft"]
    return ok, {**{f"frac_{k}": v for k, v in frac.items()}, "budget": b}


def run_suite(seed: int = 0) -> list[CheckResult]:
    return [
        _timed("gradient-correctness", lambda: check_gradients(seed)),
        _timed("gradient-modulation", lambda: check_modulation(10, seed)),
        _timed("init-equivalence", lambda: check_init_equivalence(100, seed)),
        _timed("mask-soundness", lambda: check_masks(50, seed)),
        _timed("parameter-budget", lambda: check_parameter_budget(seed)),
    ]

