import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from covft_lab.analysis import (
    DOMINANT_DIRECTION_METHOD,
    dominant_direction,
    encoder_l2_distance,
    exemplars,
    grad_cosine_series,
    intra_inter_similarity,
    kmeans,
    pca_2d,
    pearson,
    routing_context_correlation,
    sample_pairs,
    spearman,
)
from covft_lab.errors import DegenerateInputError, InputError
from covft_lab.pipeline import ModelConfig, init_model
from covft_lab.vft import GradSnapshot


@pytest.fixture(scope="module")
def params():
    return {k: v.data for k, v in init_model(ModelConfig(), 0).params.items()}


def test_identical_checkpoints_zero(params):
    rep = encoder_l2_distance(params, params)
    assert rep.total == 0.0 and rep.other == 0.0 and rep.blocks == [0.0] * 8


def test_perturbing_one_block_is_local(params):
    other = dict(params)
    key = "encoder.blocks.5.attn.q.weight"
    delta = np.random.default_rng(0).normal(size=params[key].shape)
    other[key] = params[key] + delta
    rep = encoder_l2_distance(params, other)
    assert rep.blocks[5] == pytest.approx(np.linalg.norm(delta), rel=1e-12)
    assert all(d == 0.0 for i, d in enumerate(rep.blocks) if i != 5)
    assert rep.halves() == (0.0, pytest.approx(np.linalg.norm(delta) / 4))


def test_distance_symmetric_and_shape_checked(params):
    rng = np.random.default_rng(1)
    b = {k: v + rng.normal(0, 0.01, v.shape) for k, v in params.items()}
    assert encoder_l2_distance(params, b).blocks == encoder_l2_distance(b, params).blocks
    bad = dict(params)
    bad["encoder.pos"] = np.zeros((3, 3))
    with pytest.raises(InputError):
        encoder_l2_distance(params, bad)
    with pytest.raises(InputError):
        encoder_l2_distance(params, {k: v for k, v in params.items() if k != "encoder.pos"})


def test_spearman():
    assert spearman([1, 2, 3, 4], [1, 3, 9, 27]) == pytest.approx(1.0)
    with pytest.raises(DegenerateInputError):
        spearman([1, 2, 3], [5, 5, 5])


def test_dominant_direction_constant():
    g = np.array([3.0, 0.0, 4.0])
    np.testing.assert_allclose(dominant_direction([g, g, g]), g / 5.0, atol=1e-15)


def test_dominant_direction_opposite_degenerate():
    g = np.array([1.0, 2.0])
    with pytest.raises(DegenerateInputError):
        dominant_direction([g, -g])
    with pytest.raises(DegenerateInputError):
        dominant_direction([np.zeros(3), np.zeros(3)])


def test_dominant_direction_unit_norm():
    snaps = np.random.default_rng(0).normal(size=(100, 50))
    assert abs(np.linalg.norm(dominant_direction(snaps)) - 1.0) < 1e-12
    assert "normalized mean" in DOMINANT_DIRECTION_METHOD


def test_cosine_series_constant():
    g = np.array([1.0, -2.0, 0.5])
    cs = grad_cosine_series([GradSnapshot(i, g, 1.0) for i in range(5)])
    np.testing.assert_allclose(cs.series, 1.0, atol=1e-15)
    assert cs.std == pytest.approx(0.0, abs=1e-15)


def test_cosine_series_orthogonal_alternation():
    e1, e2 = np.array([1.0, 0.0]), np.array([0.0, 1.0])
    cs = grad_cosine_series([e1, e2, e1, e2])
    np.testing.assert_allclose(cs.series, 1 / np.sqrt(2), atol=1e-15)
    cs = grad_cosine_series([e1, e2, e1, e2], direction=e1)
    np.testing.assert_array_equal(cs.series, [1.0, 0.0, 1.0, 0.0])


def test_cosine_series_needs_two():
    with pytest.raises(InputError):
        grad_cosine_series([np.ones(3)])


def test_kmeans_two_blobs():
    rng = np.random.default_rng(0)
    x = np.vstack([rng.normal(-5, 0.5, (50, 3)), rng.normal(5, 0.5, (50, 3))])
    labels = np.repeat([0, 1], 50)
    rep = kmeans(x, 2, seed=1)
    same = (rep.assignments == labels).all() or (rep.assignments == 1 - labels).all()
    assert same


def test_kmeans_k_equals_n():
    x = np.random.default_rng(1).normal(size=(12, 4))
    rep = kmeans(x, 12, seed=0)
    assert rep.inertia == pytest.approx(0.0, abs=1e-20)
    assert sorted(rep.assignments) == list(range(12))


def test_kmeans_errors_and_determinism():
    x = np.random.default_rng(2).normal(size=(30, 2))
    with pytest.raises(InputError):
        kmeans(x, 31)
    a, b = kmeans(x, 4, seed=3), kmeans(x, 4, seed=3)
    np.testing.assert_array_equal(a.assignments, b.assignments)
    np.testing.assert_array_equal(a.centroids, b.centroids)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 8))
def test_kmeans_inertia_nonincreasing(seed, k):
    x = np.random.default_rng(seed).normal(size=(60, 3))
    rep = kmeans(x, k, seed=seed)
    assert all(b <= a * (1 + 1e-9) + 1e-9 for a, b in zip(rep.inertia_trace, rep.inertia_trace[1:]))
    assert rep.centroids.shape == (k, 3) and len(rep.assignments) == 60


def test_kmeans_ten_clusters_on_5000():
    x = np.random.default_rng(4).normal(size=(5000, 32))
    rep = kmeans(x, 10, seed=0)
    assert rep.iterations <= 300 and len(np.unique(rep.assignments)) == 10


def test_exemplars_four_nearest():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(80, 3))
    rep = kmeans(x, 5, seed=0)
    ex = exemplars(x, rep, 4)
    assert len(ex) == 5
    for j, ids in enumerate(ex):
        assert len(ids) == 4 and all(rep.assignments[i] == j for i in ids)
        members = np.flatnonzero(rep.assignments == j)
        d = np.linalg.norm(x[members] - rep.centroids[j], axis=1)
        assert sorted(ids) == sorted(members[np.argsort(d)[:4]].tolist())


def test_pca_collinear():
    t = np.linspace(-1, 1, 20)[:, None]
    res = pca_2d(t * np.array([[1.0, 2.0, -1.0]]))
    assert res.variance[1] == pytest.approx(0.0, abs=1e-12)


def test_pca_orthonormal_and_ordered():
    x = np.random.default_rng(6).normal(size=(200, 6)) * np.array([5, 3, 1, 1, 0.5, 0.2])
    res = pca_2d(x)
    np.testing.assert_allclose(res.axes @ res.axes.T, np.eye(2), atol=1e-10)
    assert res.variance[0] >= res.variance[1]
    assert res.coords.shape == (200, 2)


def test_pca_rank_zero():
    with pytest.raises(DegenerateInputError):
        pca_2d(np.ones((5, 3)))


def test_pca_beats_random_rotations_in_3d():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(300, 3)) @ rng.normal(size=(3, 3))
    c = x - x.mean(axis=0)
    res = pca_2d(x)
    best = np.sum((c - res.coords @ res.axes) ** 2)
    for rot in Rotation.random(2000, random_state=8).as_matrix():
        axes = rot[:2]
        err = np.sum((c - (c @ axes.T) @ axes) ** 2)
        assert best <= err + 1e-9


def test_similarity_identical_vectors():
    v = np.repeat(np.eye(3), 4, axis=0) + 0.0
    assign = np.repeat([0, 1, 2], 4)
    rep = intra_inter_similarity(assign, v, v)
    assert rep["visual"]["intra"] == pytest.approx(1.0)
    assert rep["textual"]["inter"] == pytest.approx(0.0, abs=1e-15)


def test_similarity_random_assignment_no_lift():
    rng = np.random.default_rng(9)
    feats = rng.normal(size=(1000, 8)) + 2.0
    lifts = [intra_inter_similarity(rng.integers(0, 10, 1000), feats, feats)["visual"]["lift_pct"] for _ in range(20)]
    # permutation band: random labels leave intra and inter indistinguishable
    assert abs(np.mean(lifts)) < 0.5 and max(abs(v) for v in lifts) < 2.0


def test_similarity_singletons_degenerate():
    with pytest.raises(DegenerateInputError):
        intra_inter_similarity(np.arange(5), np.ones((5, 2)), np.ones((5, 2)))


def test_similarity_bounds():
    rng = np.random.default_rng(10)
    rep = intra_inter_similarity(rng.integers(0, 3, 50), rng.normal(size=(50, 4)), rng.normal(size=(50, 4)))
    for part in rep.values():
        assert -1 <= part["intra"] <= 1 and -1 <= part["inter"] <= 1


def test_pairs_distinct_and_seeded():
    i, j = sample_pairs(100, 10_000, seed=3)
    assert (i != j).all() and i.max() < 100 and j.max() < 100
    i2, j2 = sample_pairs(100, 10_000, seed=3)
    assert (i == i2).all() and (j == j2).all()


def test_correlation_identity_is_one():
    c = np.abs(np.random.default_rng(11).normal(size=(300, 6)))
    rep = routing_context_correlation(c, c, n_pairs=2000)
    assert rep.r == pytest.approx(1.0)


def test_correlation_shuffle_null():
    rng = np.random.default_rng(12)
    c = rng.normal(size=(1000, 8))
    g = np.abs(rng.normal(size=(1000, 16)))
    rep = routing_context_correlation(c, g, n_pairs=10_000)
    assert abs(rep.null_r) < 0.1 and abs(rep.r) < 0.1


def test_correlation_constant_degenerate():
    c = np.random.default_rng(13).normal(size=(50, 4))
    with pytest.raises(DegenerateInputError):
        routing_context_correlation(c, np.ones((50, 4)), n_pairs=500)
    with pytest.raises(DegenerateInputError):
        pearson(np.ones(4), np.arange(4.0))
