import numpy as np
import pytest

from covft_lab import autodiff as ad
from covft_lab.autodiff import Tensor
from covft_lab.comoe import (
    RoutingPolicy,
    comoe_forward,
    init_experts_from_ffn,
    manual_expert_grads,
    route,
    verify_gradient_modulation,
)
from covft_lab.errors import ConfigError, ContractError
from covft_lab.layers import ffn, init_ffn
from covft_lab.verify import check_modulation

DIM = 8


def _layer(n=4, seed=0, std=0.3):
    rng = np.random.default_rng(seed)
    p = {}
    init_ffn(p, "ffn", rng, DIM, 4 * DIM, std=std)
    donor = {k: Tensor(v.data.copy()) for k, v in p.items()}
    experts = init_experts_from_ffn(p, "ffn", "moe", n)
    return p, donor, experts, rng


def _set_router(p, probs):
    p["moe.router.weight"].data[:] = 0.0
    p["moe.router.bias"].data[:] = np.log(probs)


def test_init_copies_donor_byte_identical():
    p, donor, experts, _ = _layer(4)
    assert experts.n == 4
    for e in range(4):
        for suffix in ("fc1.weight", "fc1.bias", "fc2.weight", "fc2.bias"):
            assert p[f"moe.experts.{e}.{suffix}"].data.tobytes() == donor[f"ffn.{suffix}"].data.tobytes()
    assert not any(k.startswith("ffn.") for k in p)
    assert np.all(p["moe.router.weight"].data == 0) and np.all(p["moe.router.bias"].data == 0)


def test_init_rejects_single_expert():
    with pytest.raises(ConfigError):
        _layer(1)


def test_copies_are_independent():
    p, _, _, _ = _layer(2)
    p["moe.experts.0.fc1.weight"].data[0, 0] += 1.0
    assert p["moe.experts.0.fc1.weight"].data[0, 0] != p["moe.experts.1.fc1.weight"].data[0, 0]


@pytest.mark.parametrize("n", [2, 4, 8])
def test_initial_routing_is_uniform(n):
    p, _, experts, rng = _layer(n)
    rw = route(Tensor(rng.normal(size=(5, DIM))), p, experts, RoutingPolicy("dense"))
    np.testing.assert_array_equal(rw.g.data, np.full((5, n), 1.0 / n))


def test_sparse_2_renormalises_top_two():
    p, _, experts, _ = _layer(4)
    _set_router(p, np.array([0.5, 0.3, 0.15, 0.05]))
    rw = route(Tensor(np.ones(DIM)), p, experts, RoutingPolicy.parse("sparse_2"))
    np.testing.assert_array_equal(rw.active[0], [True, True, False, False])
    np.testing.assert_allclose(rw.g.data[0], [0.625, 0.375, 0.0, 0.0], atol=1e-14)
    assert rw.g.data[0, 2] == 0.0 and rw.g.data[0, 3] == 0.0


def test_uniform_ignores_router():
    p, _, experts, rng = _layer(4)
    p["moe.router.weight"].data = rng.normal(size=(4, DIM))
    rw = route(Tensor(rng.normal(size=(3, DIM))), p, experts, RoutingPolicy("uniform"))
    np.testing.assert_array_equal(rw.g.data, np.full((3, 4), 0.25))


def test_random_k_is_seeded_per_sample():
    p, _, experts, rng = _layer(8)
    c = Tensor(rng.normal(size=(6, DIM)))
    pol = RoutingPolicy.parse("random_2", seed=3, step=7)
    a = route(c, p, experts, pol, np.arange(6))
    b = route(c, p, experts, pol, np.arange(6))
    np.testing.assert_array_equal(a.active, b.active)
    assert np.all(a.active.sum(axis=1) == 2)
    np.testing.assert_array_equal(a.g.data[a.active], 0.5)
    other = route(c, p, experts, RoutingPolicy.parse("random_2", seed=4, step=7), np.arange(6))
    assert not np.array_equal(a.active, other.active)


@pytest.mark.parametrize("spec", ["sparse_5", "random_5"])
def test_k_larger_than_n_rejected(spec):
    p, _, experts, _ = _layer(4)
    with pytest.raises(ConfigError):
        route(Tensor(np.ones(DIM)), p, experts, RoutingPolicy.parse(spec))


@pytest.mark.parametrize("spec", ["dense", "top_2", "sparse", "random_x"])
def test_parse(spec):
    if spec == "dense":
        assert RoutingPolicy.parse(spec).label == "dense"
    else:
        with pytest.raises(ConfigError):
            RoutingPolicy.parse(spec)


def test_nonfinite_context_rejected():
    p, _, experts, _ = _layer(4)
    with pytest.raises(ContractError):
        route(Tensor(np.full(DIM, np.nan)), p, experts, RoutingPolicy("dense"))


@pytest.mark.parametrize("spec", ["dense", "sparse_2", "uniform", "random_2"])
@pytest.mark.parametrize("n", [2, 4, 8])
def test_weights_sum_to_one_over_1000_contexts(spec, n):
    p, _, experts, rng = _layer(n)
    p["moe.router.weight"].data = rng.normal(0.0, 2.0, (n, DIM))
    p["moe.router.bias"].data = rng.normal(0.0, 2.0, n)
    rw = route(Tensor(rng.normal(size=(1000, DIM))), p, experts, RoutingPolicy.parse(spec), np.arange(1000))
    g = rw.g.data
    assert np.all(g >= 0)
    assert np.all(g[~rw.active] == 0.0)
    np.testing.assert_allclose(g.sum(axis=1), 1.0, atol=1e-12)


@pytest.mark.parametrize("spec", ["dense", "sparse_2", "uniform", "random_2"])
def test_identical_experts_equal_donor(spec):
    p, donor, experts, rng = _layer(4)
    p["moe.router.weight"].data = rng.normal(size=(4, DIM))
    z = Tensor(rng.normal(size=(5, 3, DIM)))
    rw = route(Tensor(rng.normal(size=(5, DIM))), p, experts, RoutingPolicy.parse(spec), np.arange(5))
    diff = np.abs(comoe_forward(z, rw, p, experts).data - ffn(z, donor, "ffn").data).max()
    assert diff < 1e-12


def test_one_hot_routing_selects_single_expert():
    p, _, experts, rng = _layer(4)
    for t in p.values():
        t.data = t.data + rng.normal(0.0, 0.3, t.shape)
    p["moe.router.weight"].data[:] = 0.0
    p["moe.router.bias"].data = np.array([0.0, 0.0, 800.0, 0.0])
    z = Tensor(rng.normal(size=(2, 3, DIM)))
    rw = route(Tensor(rng.normal(size=(2, DIM))), p, experts, RoutingPolicy("dense"))
    np.testing.assert_array_equal(rw.g.data, [[0, 0, 1, 0]] * 2)
    np.testing.assert_allclose(comoe_forward(z, rw, p, experts).data, ffn(z, p, "moe.experts.2").data, atol=1e-14)


def test_dense_grad_check_including_router():
    p, _, experts, rng = _layer(4)
    for t in p.values():
        t.data = t.data + rng.normal(0.0, 0.3, t.shape)
        t.requires_grad = True
    z = Tensor(rng.normal(size=(2, 3, DIM)))
    c = Tensor(rng.normal(size=(2, DIM)))
    target = rng.normal(size=(2, 3, DIM))

    def f():
        return ad.sum(comoe_forward(z, route(c, p, experts, RoutingPolicy("dense")), p, experts) * target)

    report = {}
    assert ad.finite_diff_check(f, p, report=report) < 1e-4
    assert np.abs(p["moe.router.weight"].grad).max() > 0


def test_sparse_inactive_expert_untouched():
    p, _, experts, rng = _layer(4)
    _set_router(p, np.array([0.4, 0.3, 0.2, 0.1]))
    report = verify_gradient_modulation(
        rng.normal(size=(3, 4, DIM)), np.zeros((3, DIM)), p, experts, RoutingPolicy.parse("sparse_2"), rng
    )
    assert report.inactive_zero and report.inactive_max_abs == 0.0
    assert report.passed


def test_identical_expert_grad_norms_in_4_3_2_1():
    p, _, experts, rng = _layer(4)
    _set_router(p, np.array([0.4, 0.3, 0.2, 0.1]))
    for t in p.values():
        t.requires_grad = True
    z = Tensor(rng.normal(size=(1, 5, DIM)))
    rw = route(Tensor(rng.normal(size=(1, DIM))), p, experts, RoutingPolicy("dense"))
    ad.sum(comoe_forward(z, rw, p, experts) * rng.normal(size=(1, 5, DIM))).backward()
    norms = np.array([np.linalg.norm(p[f"moe.experts.{e}.fc1.weight"].grad) for e in range(4)])
    np.testing.assert_allclose(norms / norms[-1], [4.0, 3.0, 2.0, 1.0], rtol=1e-10)


def test_manual_chain_matches_autodiff():
    p, _, experts, rng = _layer(2)
    for t in p.values():
        t.data = t.data + rng.normal(0.0, 0.3, t.shape)
        t.requires_grad = True
    z = rng.normal(size=(3, 4, DIM))
    up = rng.normal(size=z.shape)
    rw = route(Tensor(rng.normal(size=(3, DIM))), p, experts, RoutingPolicy("dense"))
    ad.sum(comoe_forward(Tensor(z), rw, p, experts) * up).backward()
    expert = {k[len("moe.experts.1."):]: p[k].data for k in p if k.startswith("moe.experts.1.")}
    manual = manual_expert_grads(z, rw.g.data[:, 1], up, expert)
    for suffix, m in manual.items():
        np.testing.assert_allclose(p[f"moe.experts.1.{suffix}"].grad, m, rtol=1e-8, atol=1e-12)


def test_modulation_suite_ten_configs():
    ok, detail = check_modulation(10, seed=0)
    assert ok, detail["failures"]
    assert detail["max_ratio_rel_err"] < 1e-10
    assert detail["max_chain_rel_err"] < 1e-8


def test_equal_contexts_equal_weights():
    p, _, experts, rng = _layer(4)
    p["moe.router.weight"].data = rng.normal(size=(4, DIM))
    c = rng.normal(size=DIM)
    rw = route(Tensor(np.stack([c, c.copy()])), p, experts, RoutingPolicy("dense"))
    assert rw.g.data[0].tobytes() == rw.g.data[1].tobytes()
