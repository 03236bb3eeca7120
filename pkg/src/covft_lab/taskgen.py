"""Synthetic grid scenes and instruction tasks over them.

Scenes are 4x4 grids of coloured shapes rendered to 16x16 RGB images, one
cell per 4x4 pixel block (and therefore one cell per encoder patch). Local
tasks (grounding, cell lookups) read a single cell; global tasks (captioning,
counting) read every cell, so the two families pull a shared encoder in
different directions.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import InputError

GRID = 4
CELL_PX = 4
IMAGE_SIZE = GRID * CELL_PX

COLORS = ("red", "green", "blue", "yellow")
SHAPES = ("square", "circle", "triangle")
RGB = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 1.0, 0.0]])
PATTERNS = np.array(
    [
        [[1, 1, 1, 1], [1, 1, 1, 1], [1, 1, 1, 1], [1, 1, 1, 1]],
        [[0, 1, 1, 0], [1, 1, 1, 1], [1, 1, 1, 1], [0, 1, 1, 0]],
        [[1, 0, 0, 0], [1, 1, 0, 0], [1, 1, 1, 0], [1, 1, 1, 1]],
    ],
    dtype=np.float64,
)

MAX_OBJECTS = 6
MIN_OBJECTS = 2

# Kind registry. Order matters: diversity level k uses the first k kinds.
TASK_KINDS = (
    "grounding",
    "captioning",
    "count_color",
    "attribute_color",
    "relation_left",
    "existence",
    "identify_cell",
    "caption_colors",
    "count_shape",
    "relation_above",
    "occupancy",
    "count_total",
    "attribute_shape",
    "locate_color",
    "caption_shapes",
)
LOCAL_KINDS = frozenset({"grounding", "identify_cell", "occupancy", "attribute_color", "attribute_shape"})
DIVERSITY_LEVELS = (3, 6, 9, 12, 15)


class Vocab:
    """Fixed 64-token vocabulary."""

    CLS, PAD, BOS, EOS, SEP = 0, 1, 2, 3, 4
    CELL0 = 5
    COLOR0 = CELL0 + GRID * GRID
    SHAPE0 = COLOR0 + len(COLORS)
    OBJECT0 = SHAPE0 + len(SHAPES)
    COUNT0 = OBJECT0 + len(COLORS) * len(SHAPES)
    YES = COUNT0 + MAX_OBJECTS + 1
    NO = YES + 1
    TASK0 = NO + 1
    SIZE = TASK0 + len(TASK_KINDS)

    @staticmethod
    def cell(index: int) -> int:
        return Vocab.CELL0 + index

    @staticmethod
    def color(c: int) -> int:
        return Vocab.COLOR0 + c

    @staticmethod
    def shape(s: int) -> int:
        return Vocab.SHAPE0 + s

    @staticmethod
    def obj(c: int, s: int) -> int:
        return Vocab.OBJECT0 + c * len(SHAPES) + s

    @staticmethod
    def count(n: int) -> int:
        return Vocab.COUNT0 + n

    @staticmethod
    def task(kind: str) -> int:
        return Vocab.TASK0 + TASK_KINDS.index(kind)

    @staticmethod
    def name(token: int) -> str:
        v = Vocab
        if token < v.CELL0:
            return ("<cls>", "<pad>", "<bos>", "<eos>", "<sep>")[token]
        if token < v.COLOR0:
            r, c = divmod(token - v.CELL0, GRID)
            return f"cell_{r}_{c}"
        if token < v.SHAPE0:
            return COLORS[token - v.COLOR0]
        if token < v.OBJECT0:
            return SHAPES[token - v.SHAPE0]
        if token < v.COUNT0:
            c, s = divmod(token - v.OBJECT0, len(SHAPES))
            return f"{COLORS[c]}_{SHAPES[s]}"
        if token < v.YES:
            return f"count_{token - v.COUNT0}"
        if token == v.YES:
            return "yes"
        if token == v.NO:
            return "no"
        if token < v.SIZE:
            return f"task:{TASK_KINDS[token - v.TASK0]}"
        raise InputError(f"token {token} outside vocabulary of {v.SIZE}")


assert Vocab.SIZE == 64

INSTRUCTION_LEN = 4
MAX_ANSWER_LEN = MAX_OBJECTS


@dataclass(frozen=True)
class Scene:
    """Occupied cells as sorted ``(cell, color, shape)`` triples; object types are distinct."""

    objects: tuple[tuple[int, int, int], ...]

    def __post_init__(self):
        cells = [o[0] for o in self.objects]
        if not self.objects:
            raise InputError("scene needs at least one object")
        if len(set(cells)) != len(cells):
            raise InputError("two objects share a cell")
        if list(cells) != sorted(cells):
            object.__setattr__(self, "objects", tuple(sorted(self.objects)))

    def at(self, cell: int) -> tuple[int, int] | None:
        for c, color, shape in self.objects:
            if c == cell:
                return color, shape
        return None

    def to_list(self) -> list[list[int]]:
        return [list(o) for o in self.objects]

    @classmethod
    def from_list(cls, items: Iterable[Sequence[int]]) -> "Scene":
        return cls(tuple(tuple(int(v) for v in o) for o in items))


@dataclass
class Sample:
    image: np.ndarray
    instruction: list[int]
    answer: list[int]
    task_kind: str
    scene_id: int
    scene: Scene = field(repr=False)
    seed: int = 0


def render(scene: Scene) -> np.ndarray:
    img = np.zeros((IMAGE_SIZE, IMAGE_SIZE, 3))
    for cell, color, shape in scene.objects:
        r, c = divmod(cell, GRID)
        block = PATTERNS[shape][:, :, None] * RGB[color][None, None, :]
        img[r * CELL_PX:(r + 1) * CELL_PX, c * CELL_PX:(c + 1) * CELL_PX] = block
    return img


def random_scene(rng: np.random.Generator) -> Scene:
    n = int(rng.integers(MIN_OBJECTS, MAX_OBJECTS + 1))
    cells = rng.choice(GRID * GRID, size=n, replace=False)
    types = rng.choice(len(COLORS) * len(SHAPES), size=n, replace=False)
    return Scene(tuple(sorted((int(c), int(t) // len(SHAPES), int(t) % len(SHAPES)) for c, t in zip(cells, types))))


# ---------------------------------------------------------------- questions


def _unique_by(scene: Scene, key: int) -> list[int]:
    """Values of attribute ``key`` (1=color, 2=shape) held by exactly one object."""
    vals = [o[key] for o in scene.objects]
    return sorted(v for v in set(vals) if vals.count(v) == 1)


def _question(kind: str, scene: Scene, rng: np.random.Generator) -> tuple[list[int], list[int]] | None:
    """Instruction args and answer tokens, or None when the scene cannot host ``kind``."""
    objs = scene.objects
    if kind == "grounding":
        cell, color, shape = objs[rng.integers(len(objs))]
        return [Vocab.obj(color, shape)], [Vocab.cell(cell)]
    if kind == "captioning":
        return [], [Vocab.obj(c, s) for _, c, s in objs]
    if kind == "caption_colors":
        return [], [Vocab.color(c) for _, c, _ in objs]
    if kind == "caption_shapes":
        return [], [Vocab.shape(s) for _, _, s in objs]
    if kind == "count_color":
        color = int(rng.integers(len(COLORS)))
        return [Vocab.color(color)], [Vocab.count(sum(o[1] == color for o in objs))]
    if kind == "count_shape":
        shape = int(rng.integers(len(SHAPES)))
        return [Vocab.shape(shape)], [Vocab.count(sum(o[2] == shape for o in objs))]
    if kind == "count_total":
        return [], [Vocab.count(len(objs))]
    if kind == "attribute_color":
        shapes = _unique_by(scene, 2)
        if not shapes:
            return None
        shape = shapes[rng.integers(len(shapes))]
        color = next(o[1] for o in objs if o[2] == shape)
        return [Vocab.shape(shape)], [Vocab.color(color)]
    if kind == "attribute_shape":
        colors = _unique_by(scene, 1)
        if not colors:
            return None
        color = colors[rng.integers(len(colors))]
        shape = next(o[2] for o in objs if o[1] == color)
        return [Vocab.color(color)], [Vocab.shape(shape)]
    if kind in ("relation_left", "relation_above"):
        if len(objs) < 2:
            return None
        i, j = rng.choice(len(objs), size=2, replace=False)
        (ca, col_a, sh_a), (cb, col_b, sh_b) = objs[i], objs[j]
        (ra, xa), (rb, xb) = divmod(ca, GRID), divmod(cb, GRID)
        holds = xa < xb if kind == "relation_left" else ra < rb
        return [Vocab.obj(col_a, sh_a), Vocab.obj(col_b, sh_b)], [Vocab.YES if holds else Vocab.NO]
    if kind == "existence":
        t = int(rng.integers(len(COLORS) * len(SHAPES)))
        color, shape = divmod(t, len(SHAPES))
        present = any(o[1] == color and o[2] == shape for o in objs)
        return [Vocab.obj(color, shape)], [Vocab.YES if present else Vocab.NO]
    if kind == "identify_cell":
        cell, color, shape = objs[rng.integers(len(objs))]
        return [Vocab.cell(cell)], [Vocab.obj(color, shape)]
    if kind == "occupancy":
        cell = int(rng.integers(GRID * GRID))
        return [Vocab.cell(cell)], [Vocab.YES if scene.at(cell) else Vocab.NO]
    if kind == "locate_color":
        present = sorted({o[1] for o in objs})
        color = present[rng.integers(len(present))]
        return [Vocab.color(color)], [Vocab.cell(o[0]) for o in objs if o[1] == color]
    raise InputError(f"unknown task kind {kind!r}")


def instruction_tokens(kind: str, args: Sequence[int]) -> list[int]:
    toks = [Vocab.CLS, Vocab.task(kind), *args]
    return toks + [Vocab.PAD] * (INSTRUCTION_LEN - len(toks))


def make_sample(kind: str, rng: np.random.Generator, scene: Scene | None = None, scene_id: int = 0) -> Sample:
    """Draw a sample of ``kind``; redraws the scene until the kind is answerable.

    A caller-provided ``scene`` is used as-is and must be able to host ``kind``.
    """
    if kind not in TASK_KINDS:
        raise InputError(f"unknown task kind {kind!r}")
    fixed = scene is not None
    while True:
        sc = scene if fixed else random_scene(rng)
        q = _question(kind, sc, rng)
        if q is not None:
            break
        if fixed:
            raise InputError(f"scene cannot host a {kind} question")
    args, answer = q
    return Sample(render(sc), instruction_tokens(kind, args), answer, kind, scene_id, sc)


# ---------------------------------------------------------------- independent checker


def read_scene(image: np.ndarray) -> Scene:
    """Recover the scene from pixels alone."""
    objs = []
    for cell in range(GRID * GRID):
        r, c = divmod(cell, GRID)
        block = image[r * CELL_PX:(r + 1) * CELL_PX, c * CELL_PX:(c + 1) * CELL_PX]
        if not block.any():
            continue
        mask = block.max(axis=2)
        shape = int(np.argmin([np.abs(mask - pat).sum() for pat in PATTERNS]))
        rgb = block.reshape(-1, 3).max(axis=0)
        color = int(np.argmin(np.abs(RGB - rgb).sum(axis=1)))
        objs.append((cell, color, shape))
    return Scene(tuple(objs))


def solve(image: np.ndarray, instruction: Sequence[int]) -> list[int]:
    """Answer an instruction by reading the image; independent of the generator."""
    scene = read_scene(image)
    task = TASK_KINDS[instruction[1] - Vocab.TASK0]
    args = [t for t in instruction[2:] if t != Vocab.PAD]
    items = [(cell, Vocab.obj(col, sh), col, sh) for cell, col, sh in scene.objects]

    def find(obj_token):
        return [it for it in items if it[1] == obj_token]

    if task == "grounding":
        return [Vocab.cell(find(args[0])[0][0])]
    if task == "captioning":
        return [it[1] for it in items]
    if task == "caption_colors":
        return [Vocab.color(it[2]) for it in items]
    if task == "caption_shapes":
        return [Vocab.shape(it[3]) for it in items]
    if task == "count_color":
        return [Vocab.count(len([it for it in items if Vocab.color(it[2]) == args[0]]))]
    if task == "count_shape":
        return [Vocab.count(len([it for it in items if Vocab.shape(it[3]) == args[0]]))]
    if task == "count_total":
        return [Vocab.count(len(items))]
    if task == "attribute_color":
        (hit,) = [it for it in items if Vocab.shape(it[3]) == args[0]]
        return [Vocab.color(hit[2])]
    if task == "attribute_shape":
        (hit,) = [it for it in items if Vocab.color(it[2]) == args[0]]
        return [Vocab.shape(hit[3])]
    if task in ("relation_left", "relation_above"):
        a, b = find(args[0])[0][0], find(args[1])[0][0]
        axis = 1 if task == "relation_left" else 0
        holds = divmod(a, GRID)[axis] < divmod(b, GRID)[axis]
        return [Vocab.YES if holds else Vocab.NO]
    if task == "existence":
        return [Vocab.YES if find(args[0]) else Vocab.NO]
    if task == "identify_cell":
        return [next(it[1] for it in items if Vocab.cell(it[0]) == args[0])]
    if task == "occupancy":
        return [Vocab.YES if any(Vocab.cell(it[0]) == args[0] for it in items) else Vocab.NO]
    if task == "locate_color":
        return [Vocab.cell(it[0]) for it in items if Vocab.color(it[2]) == args[0]]
    raise InputError(f"unknown task {task!r}")


# ---------------------------------------------------------------- datasets


def _index_rng(seed: int, index: int, *extra: int) -> np.random.Generator:
    return np.random.default_rng([seed, index, *extra])


def kinds_for_diversity(level: int) -> tuple[str, ...]:
    if not 1 <= level <= len(TASK_KINDS):
        raise InputError(f"diversity level {level} outside 1..{len(TASK_KINDS)}")
    return TASK_KINDS[:level]


def build_dataset(kinds: Sequence[str], n: int, fraction: float = 1.0, seed: int = 0) -> list[Sample]:
    """Round-robin over ``kinds``; sample ``i`` is a pure function of (seed, i).

    Fractions keep a prefix of one seeded shuffle, so smaller fractions are
    subsets of larger ones.
    """
    kinds = list(kinds)
    if not kinds:
        raise InputError("need at least one task kind")
    for k in kinds:
        if k not in TASK_KINDS:
            raise InputError(f"unknown task kind {k!r}")
    if not 0.0 < fraction <= 1.0:
        raise InputError(f"fraction {fraction} outside (0, 1]")
    keep = int(round(n * fraction))
    if keep < len(kinds):
        raise InputError(f"n*fraction = {n * fraction:g} is smaller than the {len(kinds)} requested kinds")
    samples = []
    for i in range(n):
        s = make_sample(kinds[i % len(kinds)], _index_rng(seed, i), scene_id=i)
        s.seed = seed
        samples.append(s)
    order = np.random.default_rng([seed, 0x5EED]).permutation(n)
    return [samples[i] for i in sorted(order[:keep])]


def build_paired_datasets(kinds: Sequence[str], n: int, seed: int = 0) -> dict[str, list[Sample]]:
    """One dataset per kind, all over the same scenes (scene ids 0..n-1)."""
    out: dict[str, list[Sample]] = {k: [] for k in kinds}
    for i in range(n):
        attempt = 0
        while True:
            rng = _index_rng(seed, i, attempt)
            scene = random_scene(rng)
            try:
                drawn = {k: make_sample(k, _index_rng(seed, i, attempt, j), scene, i) for j, k in enumerate(kinds)}
                break
            except InputError:
                attempt += 1
        for k, s in drawn.items():
            s.seed = seed
            out[k].append(s)
    return out


def pretrain_pairs(n: int, seed: int = 0) -> list[Sample]:
    """Image-caption pairs: empty instruction, caption = object enumeration."""
    if n <= 0:
        raise InputError("pretrain_pairs needs n > 0")
    out = []
    for i in range(n):
        scene = random_scene(_index_rng(seed, i, 0xCA9))
        caption = [Vocab.obj(c, s) for _, c, s in scene.objects]
        out.append(Sample(render(scene), [Vocab.CLS] + [Vocab.PAD] * (INSTRUCTION_LEN - 1), caption, "pretrain_caption", i, scene, seed))
    return out


def save_jsonl(samples: Iterable[Sample], path: str | Path) -> None:
    with open(path, "w") as fh:
        for s in samples:
            rec = {
                "scene": s.scene.to_list(),
                "instruction_tokens": list(map(int, s.instruction)),
                "answer_tokens": list(map(int, s.answer)),
                "task_kind": s.task_kind,
                "seed": s.seed,
                "scene_id": s.scene_id,
            }
            fh.write(json.dumps(rec) + "\n")


def load_jsonl(path: str | Path) -> list[Sample]:
    out = []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            scene = Scene.from_list(rec["scene"])
            out.append(
                Sample(render(scene), rec["instruction_tokens"], rec["answer_tokens"], rec["task_kind"],
                       rec.get("scene_id", 0), scene, rec.get("seed", 0))
            )
    return out
