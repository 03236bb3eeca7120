"""Contextual mixture-of-experts: FFN experts mixed by context-conditioned routing."""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError
from .layers import Params, ffn

ROUTING_STRATEGIES = ("dense", "sparse", "uniform", "random")


@dataclass(frozen=True)
class RoutingPolicy:
    """How contexts become expert weights. ``k`` matters for sparse/random only."""

    strategy: str = "dense"
    k: int = 2
    seed: int = 0
    step: int = 0

    @classmethod
    def parse(cls, spec: str, **kw) -> "RoutingPolicy":
        m = re.fullmatch(r"(dense|uniform)|(sparse|random)_(\d+)", spec)
        if not m:
            raise ConfigError(f"unknown routing strategy {spec!r}; use dense, uniform, sparse_K or random_K")
        if m.group(1):
            return cls(m.group(1), **kw)
        return cls(m.group(2), int(m.group(3)), **kw)

    @property
    def label(self) -> str:
        return self.strategy if self.strategy in ("dense", "uniform") else f"{self.strategy}_{self.k}"


@dataclass(frozen=True)
class ExpertSet:
    prefix: str
    n: int

    def expert_prefix(self, e: int) -> str:
        return f"{self.prefix}.experts.{e}"

    def param_names(self, p: Params) -> list[str]:
        return [k for k in p if k.startswith(self.prefix + ".")]


@dataclass
class RoutingWeights:
    g: Tensor  # (B, N)
    active: np.ndarray  # (B, N) bool


def init_experts_from_ffn(p: Params, ffn_prefix: str, moe_prefix: str, n: int) -> ExpertSet:
    """Replace the FFN at ``ffn_prefix`` by ``n`` copies of it plus a zero router."""
    if n < 2:
        raise ConfigError(f"an expert set needs at least 2 experts, got {n}")
    donor = {k[len(ffn_prefix):]: p.pop(k) for k in list(p) if k.startswith(ffn_prefix + ".")}
    if not donor:
        raise ConfigError(f"no FFN parameters under {ffn_prefix!r}")
    dim = donor[".fc1.weight"].shape[0]
    for e in range(n):
        for suffix, t in donor.items():
            name = f"{moe_prefix}.experts.{e}{suffix}"
            p[name] = Tensor(t.data.copy(), name=name)
    p[f"{moe_prefix}.router.weight"] = Tensor(np.zeros((n, dim)), name=f"{moe_prefix}.router.weight")
    p[f"{moe_prefix}.router.bias"] = Tensor(np.zeros(n), name=f"{moe_prefix}.router.bias")
    return ExpertSet(moe_prefix, n)


def _topk_mask(probs: np.ndarray, k: int) -> np.ndarray:
    order = np.argsort(-probs, axis=-1, kind="stable")[..., :k]
    mask = np.zeros(probs.shape, dtype=bool)
    np.put_along_axis(mask, order, True, axis=-1)
    return mask


def route(
    c: Tensor,
    p: Params,
    experts: ExpertSet,
    policy: RoutingPolicy,
    sample_ids: np.ndarray | None = None,
    layer: int = 0,
) -> RoutingWeights:
    """Per-sample expert weights from contexts ``c`` of shape (B, D) or (D,)."""
    if c.ndim == 1:
        c = ad.reshape(c, (1, c.shape[0]))
    if not np.isfinite(c.data).all():
        raise ContractError("routing context contains non-finite values")
    n, batch = experts.n, c.shape[0]
    k = policy.k
    if policy.strategy in ("sparse", "random") and not 1 <= k <= n:
        raise ConfigError(f"top-k routing with k={k} needs 1 <= k <= {n}")

    if policy.strategy == "uniform":
        return RoutingWeights(Tensor(np.full((batch, n), 1.0 / n)), np.ones((batch, n), dtype=bool))

    if policy.strategy == "random":
        ids = np.arange(batch) if sample_ids is None else np.asarray(sample_ids)
        active = np.zeros((batch, n), dtype=bool)
        for row, sid in enumerate(ids):
            rng = np.random.default_rng([policy.seed, policy.step, int(sid), layer])
            active[row, rng.choice(n, size=k, replace=False)] = True
        return RoutingWeights(Tensor(np.where(active, 1.0 / k, 0.0)), active)

    logits = ad.matmul(c, ad.swap_last(p[f"{experts.prefix}.router.weight"])) + p[f"{experts.prefix}.router.bias"]
    if policy.strategy == "dense":
        return RoutingWeights(ad.softmax(logits, axis=-1), np.ones((batch, n), dtype=bool))
    if policy.strategy == "sparse":
        # softmax over the kept logits == top-k of the softmax, renormalised
        with np.errstate(invalid="ignore"):
            probs = np.exp(logits.data - logits.data.max(axis=-1, keepdims=True))
        active = _topk_mask(probs, k)
        return RoutingWeights(ad.softmax(logits + np.where(active, 0.0, -np.inf), axis=-1), active)
    raise ConfigError(f"unknown routing strategy {policy.strategy!r}")


def comoe_forward(z: Tensor, routing: RoutingWeights, p: Params, experts: ExpertSet) -> Tensor:
    """Sum of expert outputs weighted per sample; never-active experts are skipped."""
    batch = z.shape[0]
    out = None
    for e in range(experts.n):
        if not routing.active[:, e].any():
            continue
        w = ad.reshape(routing.g[:, e], (batch, 1, 1))
        term = w * ffn(z, p, experts.expert_prefix(e))
        out = term if out is None else out + term
    return out


# ---------------------------------------------------------------- gradient modulation


@dataclass
class ModulationReport:
    inactive_zero: bool
    inactive_max_abs: float
    ratio_rel_err: float
    chain_rel_err: float
    worst_tensor: str
    checks: dict

    @property
    def passed(self) -> bool:
        return self.checks["a"] and self.checks["b"] and self.checks["c"]


def _gelu_np(x):
    from scipy.special import erf

    cdf = 0.5 * (1.0 + erf(x / np.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
    return x * cdf, cdf + x * pdf


def manual_expert_grads(z: np.ndarray, g: np.ndarray, upstream: np.ndarray, expert: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Hand-written expert gradients: routing weight times upstream times expert Jacobian.

    ``z`` (B, L, D) expert input, ``g`` (B,) this expert's routing weights,
    ``upstream`` (B, L, D) the loss gradient w.r.t. the mixed output.
    """
    w1, b1, w2 = expert["fc1.weight"], expert["fc1.bias"], expert["fc2.weight"]
    pre = z @ w1 + b1
    act, dact = _gelu_np(pre)
    dy = upstream * g[:, None, None]  # scaled by the routing weight
    d_hidden = (dy @ w2.T) * dact
    flat = lambda a: a.reshape(-1, a.shape[-1])  # noqa: E731
    return {
        "fc2.weight": flat(act).T @ flat(dy),
        "fc2.bias": flat(dy).sum(axis=0),
        "fc1.weight": flat(z).T @ flat(d_hidden),
        "fc1.bias": flat(d_hidden).sum(axis=0),
    }


def _rel(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.abs(a).max(), np.abs(b).max(), 1e-300)
    return float(np.abs(a - b).max() / scale)


def verify_gradient_modulation(
    z: np.ndarray,
    c: np.ndarray,
    p: Params,
    experts: ExpertSet,
    policy: RoutingPolicy,
    rng: np.random.Generator,
    sample_ids: np.ndarray | None = None,
) -> ModulationReport:
    """Check how routing weights scale each expert's gradient on one isolated layer.

    The context ``c`` is detached and the loss is ``sum(R * mixed)`` for a
    fixed random ``R``, so the upstream gradient is exactly ``R``. Three checks:
    (a) experts inactive for every sample get exactly zero gradient;
    (b) on a copy whose experts all equal expert 0, per-expert gradients are
        proportional to the routing weights (single-sample batch, rel 1e-10);
    (c) autodiff expert gradients equal :func:`manual_expert_grads` (rel 1e-8).
    """
    p = {k: Tensor(p[k].data.copy(), requires_grad=True, name=k) for k in experts.param_names(p)}
    names = {e: [k for k in p if k.startswith(experts.expert_prefix(e) + ".")] for e in range(experts.n)}
    zt = Tensor(z)
    ct = Tensor(c)
    upstream = rng.normal(size=z.shape)

    def run(params: Params, ids):
        rw = route(ct, params, experts, policy, ids)
        out = comoe_forward(zt, rw, params, experts)
        ad.sum(out * upstream).backward()
        return rw

    rw = run(p, sample_ids)
    active = rw.active
    worst_name, worst_val = "", 0.0

    # (a)
    inactive_max = 0.0
    for e in range(experts.n):
        if active[:, e].any():
            continue
        for key in names[e]:
            gmax = 0.0 if p[key].grad is None else float(np.abs(p[key].grad).max())
            if gmax >= inactive_max:
                inactive_max = gmax
                if gmax > 0:
                    worst_name = key
    check_a = inactive_max == 0.0

    # (c) manual chain for every expert with any active sample
    chain_err = 0.0
    gvals = rw.g.data
    for e in range(experts.n):
        if not active[:, e].any():
            continue
        prefix = experts.expert_prefix(e)
        expert = {k[len(prefix) + 1:]: p[k].data for k in names[e]}
        manual = manual_expert_grads(z, gvals[:, e], upstream, expert)
        for suffix, m in manual.items():
            got = p[f"{prefix}.{suffix}"].grad
            err = _rel(got if got is not None else np.zeros_like(m), m)
            if err > chain_err:
                chain_err = err
                if err > worst_val:
                    worst_name, worst_val = f"{prefix}.{suffix}", err
    check_c = chain_err < 1e-8

    # (b) identical experts: gradient of expert e == g_e * common factor
    twin = dict(p)
    for e in range(experts.n):
        for key in names[e]:
            src = key.replace(experts.expert_prefix(e) + ".", experts.expert_prefix(0) + ".", 1)
            twin[key] = Tensor(p[src].data.copy(), requires_grad=True)
    ratio_err = 0.0
    for row in range(z.shape[0]):
        sub_z, sub_c = Tensor(z[row:row + 1]), Tensor(c[row:row + 1])
        ids = None if sample_ids is None else np.asarray(sample_ids)[row:row + 1]
        for key in twin:
            twin[key].grad = None
        rw1 = route(sub_c, twin, experts, policy, ids)
        out = comoe_forward(sub_z, rw1, twin, experts)
        ad.sum(out * upstream[row:row + 1]).backward()
        g1 = rw1.g.data[0]
        ref_e = int(np.argmax(g1))
        for e in range(experts.n):
            if not rw1.active[0, e]:
                continue
            for key in names[e]:
                ref_key = key.replace(experts.expert_prefix(e) + ".", experts.expert_prefix(ref_e) + ".", 1)
                expected = twin[ref_key].grad * (g1[e] / g1[ref_e])
                err = _rel(twin[key].grad, expected)
                if err > ratio_err:
                    ratio_err = err
                    if err > worst_val:
                        worst_name, worst_val = key, err
    check_b = ratio_err < 1e-10
    return ModulationReport(
        inactive_zero=check_a,
        inactive_max_abs=inactive_max,
        ratio_rel_err=ratio_err,
        chain_rel_err=chain_err,
        worst_tensor=worst_name,
        checks={"a": check_a, "b": check_b, "c": check_c},
    )
