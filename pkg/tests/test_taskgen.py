import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from covft_lab.errors import InputError
from covft_lab.taskgen import (
    CELL_PX,
    DIVERSITY_LEVELS,
    GRID,
    LOCAL_KINDS,
    TASK_KINDS,
    Scene,
    Vocab,
    build_dataset,
    build_paired_datasets,
    kinds_for_diversity,
    load_jsonl,
    make_sample,
    pretrain_pairs,
    random_scene,
    read_scene,
    render,
    save_jsonl,
    solve,
)


def test_registry_has_fifteen_kinds():
    assert len(TASK_KINDS) == 15 and len(set(TASK_KINDS)) == 15
    assert LOCAL_KINDS < set(TASK_KINDS)


def test_scene_invariants():
    with pytest.raises(InputError):
        Scene(())
    with pytest.raises(InputError):
        Scene(((3, 0, 0), (3, 1, 1)))
    assert Scene(((5, 0, 0), (1, 1, 1))).objects[0][0] == 1


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_random_scene_bounds(seed):
    sc = random_scene(np.random.default_rng(seed))
    assert 2 <= len(sc.objects) <= 6
    assert len({(c, s) for _, c, s in sc.objects}) == len(sc.objects)


def test_render_background_and_determinism():
    sc = Scene(((0, 0, 0), (5, 2, 1)))
    img = render(sc)
    assert img.shape == (16, 16, 3)
    assert np.array_equal(img, render(sc))
    assert not img[CELL_PX:2 * CELL_PX, 2 * CELL_PX:3 * CELL_PX].any()  # cell 6 is empty
    assert img[:CELL_PX, :CELL_PX].any()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(0, 15), st.integers(0, 3), st.integers(0, 2))
def test_render_locality(seed, cell, color, shape):
    sc = random_scene(np.random.default_rng(seed))
    others = tuple(o for o in sc.objects if o[0] != cell)
    if not others:
        return
    a = render(Scene(others))
    b = render(Scene(others + ((cell, color, shape),)))
    diff = np.argwhere(np.any(a != b, axis=2))
    r, c = divmod(cell, GRID)
    assert diff.size
    assert np.all(diff[:, 0] // CELL_PX == r) and np.all(diff[:, 1] // CELL_PX == c)


def test_grounding_example():
    sc = Scene(((2 * GRID + 3, 0, 0), (0, 1, 2)))  # red square at row 2, col 3
    red_square = Vocab.obj(0, 0)
    for seed in range(20):
        s = make_sample("grounding", np.random.default_rng(seed), scene=sc)
        if s.instruction[2] == red_square:
            assert s.answer == [Vocab.cell(2 * GRID + 3)]
            return
    pytest.fail("no grounding question about the red square drawn")


def test_counting_zero():
    sc = Scene(((0, 1, 0), (1, 1, 1)))  # two green objects
    for seed in range(50):
        s = make_sample("count_color", np.random.default_rng(seed), scene=sc)
        if s.instruction[2] != Vocab.color(1):
            assert s.answer == [Vocab.count(0)]
            return
    pytest.fail("no zero-count question drawn")


def test_single_object_caption():
    sc = Scene(((7, 3, 2),))
    s = make_sample("captioning", np.random.default_rng(0), scene=sc)
    assert s.answer == [Vocab.obj(3, 2)]


def test_unhostable_fixed_scene_is_input_error():
    with pytest.raises(InputError):
        make_sample("relation_left", np.random.default_rng(0), scene=Scene(((7, 3, 2),)))


def test_unknown_kind():
    with pytest.raises(InputError):
        make_sample("ocr", np.random.default_rng(0))


def test_tokens_in_vocab_and_checker_agrees_on_10k():
    data = build_dataset(TASK_KINDS, 10_000, seed=7)
    for s in data:
        assert all(0 <= t < Vocab.SIZE for t in s.instruction + s.answer)
        assert read_scene(s.image) == s.scene
        assert solve(s.image, s.instruction) == list(s.answer), (s.task_kind, s.scene)


def _mask_cell(scene, cell):
    return Scene(tuple(o for o in scene.objects if o[0] != cell))


def test_conflict_by_construction():
    rng = np.random.default_rng(0)
    for _ in range(200):
        s = make_sample("grounding", rng)
        target = s.answer[0] - Vocab.cell(0)
        for cell, _, _ in s.scene.objects:
            if cell != target:
                assert solve(render(_mask_cell(s.scene, cell)), s.instruction) == s.answer
        c = make_sample("captioning", rng)
        for cell, _, _ in c.scene.objects:
            if len(c.scene.objects) > 1:
                assert solve(render(_mask_cell(c.scene, cell)), c.instruction) != c.answer


def test_single_kind_dataset():
    data = build_dataset(["grounding"], 100, seed=0)
    assert len(data) == 100 and {s.task_kind for s in data} == {"grounding"}


def test_round_robin_and_determinism():
    a = build_dataset(TASK_KINDS, 45, seed=3)
    b = build_dataset(TASK_KINDS, 45, seed=3)
    assert [s.task_kind for s in a] == [TASK_KINDS[i % 15] for i in range(45)]
    assert all(np.array_equal(x.image, y.image) and x.answer == y.answer for x, y in zip(a, b))


def test_fraction_prefix_property():
    full = build_dataset(TASK_KINDS, 400, 1.0, seed=5)
    ids = {f: {s.scene_id for s in build_dataset(TASK_KINDS, 400, f, seed=5)} for f in (0.125, 0.25, 0.5)}
    assert ids[0.125] < ids[0.25] < ids[0.5] < {s.scene_id for s in full}
    assert len(ids[0.25]) == 100


def test_dataset_errors():
    with pytest.raises(InputError):
        build_dataset([], 10)
    with pytest.raises(InputError):
        build_dataset(TASK_KINDS, 20, fraction=0.5)
    with pytest.raises(InputError):
        build_dataset(["grounding"], 10, fraction=0.0)


@pytest.mark.parametrize("level", DIVERSITY_LEVELS)
def test_diversity_levels(level):
    kinds = kinds_for_diversity(level)
    data = build_dataset(kinds, 10 * level, seed=0)
    assert {s.task_kind for s in data} == set(kinds)


def test_paired_datasets_share_scenes():
    pair = build_paired_datasets(["grounding", "captioning"], 50, seed=2)
    g, c = pair["grounding"], pair["captioning"]
    assert [s.scene_id for s in g] == [s.scene_id for s in c] == list(range(50))
    assert all(np.array_equal(a.image, b.image) for a, b in zip(g, c))


def test_pretrain_pairs():
    pairs = pretrain_pairs(20, seed=1)
    assert pairs[0].instruction[0] == Vocab.CLS and set(pairs[0].instruction[1:]) == {Vocab.PAD}
    cap_instr = make_sample("captioning", np.random.default_rng(0), scene=pairs[3].scene).instruction
    assert solve(pairs[3].image, cap_instr) == pairs[3].answer
    again = pretrain_pairs(20, seed=1)
    assert all(np.array_equal(a.image, b.image) for a, b in zip(pairs, again))
    with pytest.raises(InputError):
        pretrain_pairs(0)


def test_pretrain_pairs_timing():
    t0 = time.perf_counter()
    pretrain_pairs(5000, seed=0)
    assert time.perf_counter() - t0 < 1.0


def test_jsonl_roundtrip(tmp_path):
    data = build_dataset(TASK_KINDS, 30, seed=4)
    path = tmp_path / "d.jsonl"
    save_jsonl(data, path)
    back = load_jsonl(path)
    assert len(back) == 30
    for a, b in zip(data, back):
        assert np.array_equal(a.image, b.image)
        assert (a.instruction, a.answer, a.task_kind, a.scene_id, a.seed) == (
            b.instruction, b.answer, b.task_kind, b.scene_id, b.seed)
    assert "image" not in path.read_text().splitlines()[0]
