"""Experiment configs, run directories and the train/bench/conflict/analyze drivers."""

from __future__ import annotations

import csv
import hashlib
import itertools
import json
import os
import time
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from . import autodiff as ad
from . import analysis
from .checkpoint import load_checkpoint, restore, save_checkpoint
from .comoe import RoutingPolicy
from .cve import SUMMARY_INDEX, text_embed
from .encoder import EncoderConfig
from .errors import ArtifactError, ConfigError, DegenerateInputError, InputError, LabError, NumericError
from .pipeline import Batch, DecoderConfig, Model, ModelConfig, encode_batch, evaluate, evaluation_counts, init_model
from .taskgen import TASK_KINDS, Sample, build_dataset, build_paired_datasets, kinds_for_diversity, pretrain_pairs
from .vft import STAGES, RunRecord, Strategy, TrainConfig, TrainHooks, prepare, train

DEFAULT_ROOT = "covft-runs"
OUT_ENV = "COVFT_LAB_OUT"


# ---------------------------------------------------------------- config


@dataclass
class ModelSection:
    image_size: int = 16
    patch_size: int = 4
    depth: int = 8
    dim: int = 32
    heads: int = 4
    mlp_ratio: int = 4
    experts: int = 4
    routing: str = "dense"
    router_init_std: float = 0.01
    context: str = "cve"
    comoe_start: int = 4
    comoe_end: int = 7
    feature_layer: int = -1  # -1 = last block
    decoder_dim: int = 48
    decoder_depth: int = 2
    decoder_heads: int = 4
    max_len: int = 32


@dataclass
class DataSection:
    kinds: str = "all"
    diversity: int = 0  # > 0 selects the first k registry kinds instead of ``kinds``
    n: int = 5000
    fraction: float = 1.0
    eval_per_kind: int = 40
    pretrain_n: int = 3000


@dataclass
class TrainSection:
    strategy: str = "covft"
    stages: str = "pretrain,instruct"
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
    lora_rank: int = 8
    vpt_prompts: int = 4


@dataclass
class AnalysisSection:
    traces: bool = True
    samples: int = 1000
    k: int = 10
    pairs: int = 10000
    context_layer: int = -1
    exemplars: int = 4


@dataclass
class ConflictSection:
    kinds: str = "grounding,captioning"
    n: int = 2000


SECTIONS = {
    "model": ModelSection,
    "data": DataSection,
    "train": TrainSection,
    "analysis": AnalysisSection,
    "conflict": ConflictSection,
}
TOP_LEVEL = {"name": "", "seed": 0, "out": ""}
MATRIX_AXES = ("strategy", "seed", "routing", "context", "experts", "placement", "diversity", "fraction")


def _coerce(key: str, raw: str, default: Any) -> Any:
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: expected {type(default).__name__}, got {raw!r}") from None
    return raw


def _fmt(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


@dataclass
class ExperimentConfig:
    name: str = ""
    seed: int = 0
    out: str = ""
    model: ModelSection = field(default_factory=ModelSection)
    data: DataSection = field(default_factory=DataSection)
    train: TrainSection = field(default_factory=TrainSection)
    analysis: AnalysisSection = field(default_factory=AnalysisSection)
    conflict: ConflictSection = field(default_factory=ConflictSection)
    matrix: dict[str, list[str]] = field(default_factory=dict)

    # -- parsing

    @classmethod
    def from_text(cls, text: str, base: "ExperimentConfig | None" = None) -> "ExperimentConfig":
        """Parse ``key = value`` lines, applied on top of ``base`` (defaults when omitted)."""
        pairs: dict[str, str] = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key in pairs:
                raise ConfigError(f"line {lineno}: duplicate key {key!r}")
            pairs[key] = value
        return cls.from_mapping(pairs, base)

    @classmethod
    def from_mapping(cls, pairs: dict[str, str], base: "ExperimentConfig | None" = None) -> "ExperimentConfig":
        cfg = base.copy() if base is not None else cls()
        for key, value in pairs.items():
            cfg.set(key, value)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path, base: "ExperimentConfig | None" = None) -> "ExperimentConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        return cls.from_text(text, base)

    def set(self, key: str, value: Any) -> None:
        """Set a dotted key from its text (or already typed) value."""
        if key in TOP_LEVEL:
            setattr(self, key, _coerce(key, str(value), TOP_LEVEL[key]))
            return
        section, _, name = key.partition(".")
        if section == "matrix":
            if name not in MATRIX_AXES:
                raise ConfigError(f"{key}: unknown matrix axis; expected one of {MATRIX_AXES}")
            values = [v.strip() for v in str(value).split(",") if v.strip()]
            if not values:
                raise ConfigError(f"{key}: empty value list")
            self.matrix[name] = values
            return
        if section not in SECTIONS:
            raise ConfigError(f"unknown config key {key!r}")
        sec = getattr(self, section)
        known = {f.name: f for f in fields(sec)}
        if name not in known:
            raise ConfigError(f"unknown config key {key!r}")
        setattr(sec, name, _coerce(key, str(value), getattr(SECTIONS[section](), name)))

    # -- derived objects

    @property
    def kinds(self) -> tuple[str, ...]:
        if self.data.diversity:
            return kinds_for_diversity(self.data.diversity)
        if self.data.kinds == "all":
            return TASK_KINDS
        return tuple(k.strip() for k in self.data.kinds.split(",") if k.strip())

    @property
    def strategy(self) -> Strategy:
        t = self.train
        return Strategy(t.strategy, lora_rank=t.lora_rank, vpt_prompts=t.vpt_prompts)

    @property
    def stages(self) -> tuple[str, ...]:
        return tuple(s.strip() for s in self.train.stages.split(",") if s.strip())

    def encoder_config(self) -> EncoderConfig:
        """Structured encoder for this run's strategy."""
        m = self.model
        plain = EncoderConfig(
            image_size=m.image_size,
            patch_size=m.patch_size,
            depth=m.depth,
            dim=m.dim,
            heads=m.heads,
            mlp_ratio=m.mlp_ratio,
            comoe_start=m.comoe_start,
            comoe_end=m.comoe_end,
            feature_layer=m.depth - 1 if m.feature_layer < 0 else m.feature_layer,
            context=m.context,
            routing=m.routing,
            router_init_std=m.router_init_std,
        )
        return self.strategy.encoder_config(plain, m.experts)

    def model_config(self, plain: bool = False) -> ModelConfig:
        enc = self.encoder_config()
        if plain:
            enc = replace(enc, experts=0, lora_rank=0, vpt_prompts=0)
        m = self.model
        dec = DecoderConfig(dim=m.decoder_dim, depth=m.decoder_depth, heads=m.decoder_heads, max_len=m.max_len)
        return ModelConfig(enc, dec)

    def train_config(self) -> TrainConfig:
        t = self.train
        return TrainConfig(
            pretrain_steps=t.pretrain_steps,
            instruct_steps=t.instruct_steps,
            batch_size=t.batch_size,
            lr_pretrain=t.lr_pretrain,
            lr_instruct=t.lr_instruct,
            weight_decay=t.weight_decay,
            warmup_frac=t.warmup_frac,
            log_every=t.log_every,
            eval_every=t.eval_every,
            snapshot_every=t.snapshot_every,
            checkpoint_every=t.checkpoint_every,
            seed=self.seed,
        )

    def validate(self) -> None:
        """Build every derived object once so errors surface before any compute."""
        try:
            self.strategy
            if self.train.strategy == "covft" and self.model.experts < 2:
                raise ConfigError("model.experts: covft needs at least 2 experts")
            self.model_config()
            self.train_config()
            for s in self.stages:
                if s not in STAGES:
                    raise ConfigError(f"train.stages: unknown stage {s!r}")
            kinds = self.kinds
            for k in kinds:
                if k not in TASK_KINDS:
                    raise ConfigError(f"data.kinds: unknown task kind {k!r}")
            if not 0.0 < self.data.fraction <= 1.0:
                raise ConfigError(f"data.fraction: {self.data.fraction} outside (0, 1]")
            if self.data.n * self.data.fraction < len(kinds):
                raise ConfigError("data.n * data.fraction must cover every requested kind")
            if self.data.eval_per_kind < 1 or self.data.pretrain_n < 1:
                raise ConfigError("data.eval_per_kind and data.pretrain_n must be positive")
            if self.analysis.k < 1 or self.analysis.samples < self.analysis.k:
                raise ConfigError("analysis.samples must be >= analysis.k >= 1")
            if self.analysis.pairs < 2:
                raise ConfigError("analysis.pairs must be >= 2")
            for k in self.conflict.kinds.split(","):
                if k.strip() not in TASK_KINDS:
                    raise ConfigError(f"conflict.kinds: unknown task kind {k.strip()!r}")
        except InputError as exc:
            raise ConfigError(str(exc)) from None

    # -- serialization

    def items(self) -> list[tuple[str, str]]:
        out = [(k, _fmt(getattr(self, k))) for k in TOP_LEVEL]
        for section in SECTIONS:
            for f in fields(getattr(self, section)):
                out.append((f"{section}.{f.name}", _fmt(getattr(getattr(self, section), f.name))))
        for axis in MATRIX_AXES:
            if axis in self.matrix:
                out.append((f"matrix.{axis}", ",".join(self.matrix[axis])))
        return out

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.items())

    def copy(self) -> "ExperimentConfig":
        out = ExperimentConfig()
        for key, value in self.items():
            out.set(key, value)
        return out

    def run_id(self) -> str:
        return self.name or f"{self.train.strategy}-s{self.seed}"


def subseed(seed: int, name: str) -> int:
    """Named, independent integer seed derived from the top-level seed."""
    return int(np.random.SeedSequence([seed, zlib.crc32(name.encode())]).generate_state(1)[0])


def output_root(flag: str | None = None, cfg: ExperimentConfig | None = None) -> Path:
    if flag:
        return Path(flag)
    if cfg is not None and cfg.out:
        return Path(cfg.out)
    return Path(os.environ.get(OUT_ENV) or DEFAULT_ROOT)


# ---------------------------------------------------------------- data and pretraining


def instruct_data(cfg: ExperimentConfig) -> list[Sample]:
    return build_dataset(cfg.kinds, cfg.data.n, cfg.data.fraction, subseed(cfg.seed, "data"))


def eval_data(cfg: ExperimentConfig) -> list[Sample]:
    """Held-out samples over the full registry, whatever the training kinds."""
    return build_dataset(TASK_KINDS, cfg.data.eval_per_kind * len(TASK_KINDS), 1.0, subseed(cfg.seed, "eval"))


def analysis_data(cfg: ExperimentConfig) -> list[Sample]:
    return build_dataset(TASK_KINDS, cfg.analysis.samples, 1.0, subseed(cfg.seed, "analysis"))


def _pretrain_key(cfg: ExperimentConfig) -> str:
    t = cfg.train
    parts = [
        __version__, cfg.seed, repr(cfg.model_config(plain=True)), t.pretrain_steps, t.batch_size,
        t.lr_pretrain, t.weight_decay, t.warmup_frac, t.log_every, cfg.data.pretrain_n,
    ]
    return hashlib.sha256(repr(parts).encode()).hexdigest()[:16]


_PRETRAIN_MEMO: dict[str, tuple[dict[str, np.ndarray], list[dict]]] = {}


def pretrained_base(cfg: ExperimentConfig, root: Path | None = None) -> tuple[Model, list[dict]]:
    """Plain-encoder model after the projector-only stage, shared by every strategy of one seed.

    Results are memoised in-process and, when ``root`` is given, cached under
    ``root/_pretrain`` so parallel workers reuse them.
    """
    base = init_model(cfg.model_config(plain=True), cfg.seed)
    if "pretrain" not in cfg.stages or cfg.train.pretrain_steps == 0:
        return base, []
    key = _pretrain_key(cfg)
    hit = _PRETRAIN_MEMO.get(key)
    cache = root / "_pretrain" if root is not None else None
    if hit is None and cache is not None and (cache / f"{key}.ckpt").exists():
        rows = [json.loads(line) for line in (cache / f"{key}.jsonl").read_text().splitlines()]
        hit = (load_checkpoint(cache / f"{key}.ckpt"), rows)
    if hit is None:
        record = RunRecord("pretrain")
        pre = pretrain_pairs(cfg.data.pretrain_n, subseed(cfg.seed, "pretrain"))
        train(base, Strategy("freeze"), cfg.train_config(), pretrain_data=pre, stages=["pretrain"], record=record)
        hit = ({k: v.data.copy() for k, v in base.params.items()}, record.rows)
        if cache is not None:
            save_checkpoint(cache / f"{key}.ckpt", hit[0])
            (cache / f"{key}.jsonl").write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in hit[1]))
    _PRETRAIN_MEMO[key] = hit
    restore(base.params, hit[0])
    return base, [dict(r) for r in hit[1]]


# ---------------------------------------------------------------- traces


@dataclass
class Traces:
    contexts: np.ndarray  # (layers, n, D)
    routing: np.ndarray  # (layers, n, N)
    visual: np.ndarray  # (n, D) mean encoder output token
    text: np.ndarray  # (n, D) summary-token text embedding
    sample_ids: np.ndarray
    kinds: list[str]

    def save(self, path: Path) -> None:
        path.mkdir(parents=True, exist_ok=True)
        for name in ("contexts", "routing", "visual", "text", "sample_ids"):
            np.save(path / f"{name}.npy", getattr(self, name))
        (path / "kinds.json").write_text(json.dumps(self.kinds))

    @classmethod
    def load(cls, path: Path) -> "Traces":
        need = ["contexts.npy", "routing.npy", "visual.npy", "text.npy", "sample_ids.npy", "kinds.json"]
        for f in need:
            if not (path / f).exists():
                raise ArtifactError(f"missing trace artifact {path / f}")
        arrays = {f[:-4]: np.load(path / f) for f in need if f.endswith(".npy")}
        return cls(kinds=json.loads((path / "kinds.json").read_text()), **arrays)


def collect_traces(model: Model, samples: Sequence[Sample], chunk: int = 200) -> Traces:
    """Per-layer contexts and routing weights plus paired features for each sample."""
    if not model.config.encoder.experts:
        raise ConfigError("traces need a CoMoE encoder")
    ctx, rout, vis, txt = [], [], [], []
    policy = RoutingPolicy.parse(model.config.encoder.routing)
    with ad.no_grad():
        for start in range(0, len(samples), chunk):
            part = samples[start:start + chunk]
            batch = Batch.from_samples(part, ids=[s.scene_id for s in part])
            out = encode_batch(model, batch, policy)
            ctx.append(np.stack([s.c.data for s in out.ctx_trace]))
            rout.append(np.stack([rw.g.data for rw in out.routing_trace]))
            vis.append(out.features.data.mean(axis=1))
            txt.append(text_embed(model.params, batch.instructions).data[:, SUMMARY_INDEX, :])
    return Traces(
        np.concatenate(ctx, axis=1),
        np.concatenate(rout, axis=1),
        np.concatenate(vis),
        np.concatenate(txt),
        np.array([s.scene_id for s in samples]),
        [s.task_kind for s in samples],
    )


# ---------------------------------------------------------------- artifacts


def _write_json(path: Path, obj: Any) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence[Any]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _num(x: float) -> str:
    return f"{x:.6f}"


def write_eval_csv(path: Path, run_id: str, acc: dict[str, float], counts: dict[str, int]) -> None:
    rows = [[run_id, k, _num(v), counts.get(k, sum(counts.values()) if k == "macro" else 0)] for k, v in acc.items()]
    _write_csv(path, ["run_id", "task_kind", "accuracy", "n"], rows)


def read_eval_csv(path: Path) -> dict[str, float]:
    with open(path) as fh:
        return {r["task_kind"]: float(r["accuracy"]) for r in csv.DictReader(fh)}


def file_digest(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------- train


@dataclass
class RunResult:
    run_dir: Path
    accuracy: dict[str, float]
    record: RunRecord
    model: Model


class RunAborted(LabError):
    def __init__(self, message: str, run_dir: Path):
        super().__init__(message)
        self.run_dir = run_dir


def run_train(cfg: ExperimentConfig, run_dir: Path, cache_root: Path | None = None) -> RunResult:
    """Two-stage training plus evaluation; every artifact lands in ``run_dir``."""
    cfg.validate()
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    for stale in ("run.jsonl", "eval.csv"):
        (run_dir / stale).unlink(missing_ok=True)
    (run_dir / "config.cfg").write_text(cfg.to_text())
    strategy = cfg.strategy
    base, pre_rows = pretrained_base(cfg, cache_root)
    model = prepare(base, strategy, cfg.model.experts, **_structure_overrides(cfg))
    record = RunRecord(strategy.kind, path=run_dir / "run.jsonl", snapshot_dir=run_dir / "snapshots")
    for row in pre_rows:
        row["strategy"] = strategy.kind
        record.log(row)
    meta = {
        "tool": "covft-lab",
        "version": __version__,
        "run_id": cfg.run_id(),
        "seed": cfg.seed,
        "strategy": strategy.kind,
        "encoder": asdict(model.config.encoder),
        "n_params": model.n_params(),
        "dominant_direction": analysis.DOMINANT_DIRECTION_METHOD,
        "gradient_scope": "encoder-trainable parameters",
        "aborted": None,
    }
    ckpt_dir = run_dir / "checkpoints"
    hooks = TrainHooks(on_checkpoint=lambda step, m: save_checkpoint(ckpt_dir / f"step{step:06d}.ckpt", m.params))
    ev = eval_data(cfg)
    stages = [s for s in cfg.stages if s != "pretrain"]
    try:
        if stages:
            train(
                model, strategy, cfg.train_config(), instruct_data=instruct_data(cfg),
                eval_data=ev, stages=stages, record=record, hooks=hooks,
            )
    except NumericError as exc:
        meta["aborted"] = str(exc)
        _write_json(run_dir / "meta.json", meta)
        raise RunAborted(str(exc), run_dir) from exc
    from .vft import trainable_mask

    trainable = trainable_mask(model, strategy, "instruct")
    enc_trainable = [k for k in trainable if k.startswith("encoder.")]
    meta["trainable_params"] = model.n_params(sorted(trainable))
    meta["encoder_params"] = model.n_params(model.names("encoder."))
    meta["encoder_trainable_params"] = model.n_params(sorted(enc_trainable))
    save_checkpoint(ckpt_dir / "final.ckpt", model.params)
    acc = evaluate(model, ev)
    write_eval_csv(run_dir / "eval.csv", cfg.run_id(), acc, evaluation_counts(ev))
    if cfg.analysis.traces and model.config.encoder.experts:
        collect_traces(model, analysis_data(cfg)).save(run_dir / "traces")
    _write_json(run_dir / "meta.json", meta)
    return RunResult(run_dir, acc, record, model)


def _structure_overrides(cfg: ExperimentConfig) -> dict:
    enc = cfg.encoder_config()
    return {"context": enc.context, "routing": enc.routing, "comoe_start": enc.comoe_start, "comoe_end": enc.comoe_end,
            "router_init_std": enc.router_init_std}


# ---------------------------------------------------------------- bench


@dataclass
class Cell:
    variant: str
    seed: int
    config: ExperimentConfig


def expand_matrix(cfg: ExperimentConfig) -> list[Cell]:
    """Cartesian product of the ``matrix.*`` axes; the variant label omits the seed."""
    axes = {a: cfg.matrix[a] for a in MATRIX_AXES if a in cfg.matrix}
    seeds = [int(s) for s in axes.pop("seed", [str(cfg.seed)])]
    names = list(axes)
    cells = []
    for combo in itertools.product(*(axes[a] for a in names)) if names else [()]:
        label = ",".join(f"{a}={v}" for a, v in zip(names, combo)) or cfg.train.strategy
        for seed in seeds:
            c = cfg.copy()
            c.matrix = {}
            c.seed = seed
            for axis, value in zip(names, combo):
                _apply_axis(c, axis, value)
            c.name = f"{_slug(label)}-s{seed}"
            c.validate()
            cells.append(Cell(label, seed, c))
    return cells


def _apply_axis(c: ExperimentConfig, axis: str, value: str) -> None:
    if axis == "placement":
        start, sep, end = value.partition("-")
        if not sep:
            raise ConfigError(f"matrix.placement: expected 'start-end', got {value!r}")
        c.set("model.comoe_start", start)
        c.set("model.comoe_end", end)
    elif axis in ("routing", "context", "experts"):
        c.set(f"model.{axis}", value)
    elif axis in ("diversity", "fraction"):
        c.set(f"data.{axis}", value)
    elif axis == "strategy":
        c.set("train.strategy", value)


def _slug(label: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_" else "_" for ch in label.replace("=", "-"))


def _run_cell(cell: Cell, root: str) -> tuple[str, int, dict | None, str | None]:
    try:
        res = run_train(cell.config, Path(root) / cell.config.name, Path(root))
        return cell.variant, cell.seed, res.accuracy, None
    except (LabError, ArithmeticError, ValueError) as exc:
        return cell.variant, cell.seed, None, f"{type(exc).__name__}: {exc}"


@dataclass
class BenchResult:
    cells: list[tuple[str, int, dict | None, str | None]]
    table: Path
    summary: Path

    @property
    def failed(self) -> list[tuple[str, int, str]]:
        return [(v, s, err) for v, s, _, err in self.cells if err is not None]


def run_bench(cfg: ExperimentConfig, root: Path, jobs: int = 1) -> BenchResult:
    cfg.validate()
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    (root / "matrix.cfg").write_text(cfg.to_text())
    cells = expand_matrix(cfg)
    # pretrain each distinct base once, before fanning out
    seen = set()
    for cell in cells:
        key = _pretrain_key(cell.config)
        if key not in seen:
            seen.add(key)
            pretrained_base(cell.config, root)
    if jobs > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_cell, cells, [str(root)] * len(cells)))
    else:
        results = [_run_cell(c, str(root)) for c in cells]
    return BenchResult(results, *_write_bench_tables(root, results))


def _write_bench_tables(root: Path, results) -> tuple[Path, Path]:
    kinds = sorted(TASK_KINDS)
    rows = []
    for variant, seed, acc, err in results:
        if acc is None:
            rows.append([variant, seed, "failed"] + [""] * (len(kinds) + 1) + [err])
        else:
            rows.append([variant, seed, "ok"] + [_num(acc.get(k, 0.0)) for k in kinds] + [_num(acc["macro"]), ""])
    table = root / "bench.csv"
    _write_csv(table, ["variant", "seed", "status", *kinds, "macro", "error"], rows)
    grouped: dict[str, list[dict]] = {}
    order: list[str] = []
    failures: dict[str, int] = {}
    for variant, _, acc, _err in results:
        if variant not in order:
            order.append(variant)
        if acc is None:
            failures[variant] = failures.get(variant, 0) + 1
        else:
            grouped.setdefault(variant, []).append(acc)
    srows = []
    for variant in order:
        accs = grouped.get(variant, [])
        if not accs:
            srows.append([variant, 0, failures.get(variant, 0)] + [""] * (len(kinds) + 4))
            continue
        macro = np.array([a["macro"] for a in accs])
        per_kind = [_num(float(np.mean([a.get(k, 0.0) for a in accs]))) for k in kinds]
        srows.append([variant, len(accs), failures.get(variant, 0), *per_kind,
                      _num(macro.mean()), _num(macro.std()), _num(macro.min()), _num(macro.max())])
    summary = root / "bench_summary.csv"
    _write_csv(summary, ["variant", "seeds", "failed", *kinds, "macro_mean", "macro_std", "macro_min", "macro_max"], srows)
    return table, summary


def read_bench(path: Path) -> list[dict]:
    with open(path) as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------- conflict


def conflict_defaults() -> ExperimentConfig:
    """Short-budget defaults: divergence and alignment trends appear within a few hundred steps."""
    cfg = ExperimentConfig()
    cfg.train.stages = "instruct"
    cfg.train.pretrain_steps = 0
    cfg.train.instruct_steps = 300
    cfg.train.checkpoint_every = 25
    cfg.train.snapshot_every = 5
    cfg.train.log_every = 25
    cfg.analysis.traces = False
    cfg.matrix = {"seed": ["0", "1", "2"]}
    return cfg


@dataclass
class ConflictResult:
    seed: int
    steps: list[int]
    distances: list[analysis.DistanceReport]
    spearman: float
    shallow: float
    deep: float
    alignment: dict[str, analysis.CosineSeries]
    # wall-clock seconds per phase; kept out of the summary so metric files stay reproducible
    timings: dict[str, float] = field(default_factory=dict)

    def summary(self) -> dict:
        return {
            "seed": self.seed,
            "spearman_step_distance": self.spearman,
            "final_total_distance": self.distances[-1].total,
            "final_shallow_half_mean": self.shallow,
            "final_deep_half_mean": self.deep,
            "step0_distance": self.distances[0].total,
            "alignment": {k: {"mean": v.mean, "std": v.std, "n": int(len(v.series))} for k, v in self.alignment.items()},
        }


def run_conflict_seed(cfg: ExperimentConfig, seed: int, out: Path, cache_root: Path | None = None) -> ConflictResult:
    """Twin single-kind runs for divergence, plus full_ft vs covft gradient alignment on mixed data."""
    cfg = cfg.copy()
    cfg.seed = seed
    cfg.matrix = {}
    cfg.validate()
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.cfg").write_text(cfg.to_text())
    tcfg = cfg.train_config()
    twin_kinds = [k.strip() for k in cfg.conflict.kinds.split(",")]
    if len(twin_kinds) != 2:
        raise ConfigError("conflict.kinds must name exactly two task kinds")
    paired = build_paired_datasets(twin_kinds, cfg.conflict.n, subseed(seed, "conflict"))
    base, _ = pretrained_base(replace_strategy(cfg, "full_ft"), cache_root)
    full = Strategy("full_ft")
    t0 = time.perf_counter()
    ckpts: dict[str, dict[int, dict[str, np.ndarray]]] = {}
    for kind in twin_kinds:
        model = prepare(base, full)
        store = ckpts.setdefault(kind, {})

        def keep(step, m, store=store, kind=kind):
            store[step] = {k: v.data.copy() for k, v in m.params.items() if k.startswith("encoder.")}
            save_checkpoint(out / f"twin-{kind}" / f"step{step:06d}.ckpt", store[step])

        rec = RunRecord("full_ft", path=out / f"twin-{kind}.jsonl")
        (out / f"twin-{kind}.jsonl").unlink(missing_ok=True)
        train(model, full, tcfg, instruct_data=paired[kind], stages=["instruct"], record=rec,
              hooks=TrainHooks(on_checkpoint=keep))
    a, b = (ckpts[k] for k in twin_kinds)
    steps = sorted(set(a) & set(b))
    dists = [analysis.encoder_l2_distance(a[s], b[s]) for s in steps]
    depth = len(dists[0].blocks)
    _write_csv(
        out / "divergence.csv",
        ["step", *[f"block{i}" for i in range(depth)], "other", "total"],
        [[s, *[_num(x) for x in d.blocks], _num(d.other), _num(d.total)] for s, d in zip(steps, dists)],
    )
    rho = analysis.spearman(steps, [d.total for d in dists])
    shallow, deep = dists[-1].halves()

    t1 = time.perf_counter()
    mixed = instruct_data(cfg)
    align = {}
    for kind in ("full_ft", "covft"):
        strat = Strategy(kind)
        model = prepare(base, strat, cfg.model.experts, **_structure_overrides(cfg))
        snap_dir = out / f"snapshots-{kind}"
        rec = RunRecord(kind, path=out / f"mixed-{kind}.jsonl", snapshot_dir=snap_dir)
        (out / f"mixed-{kind}.jsonl").unlink(missing_ok=True)
        train(model, strat, tcfg, instruct_data=mixed, stages=["instruct"], record=rec)
        align[kind] = analysis.grad_cosine_series(rec.snapshots)
        _write_csv(out / f"alignment-{kind}.csv", ["step", "cosine"],
                   [[s.step, _num(c)] for s, c in zip(rec.snapshots, align[kind].series)])
    timings = {"twins": t1 - t0, "alignment": time.perf_counter() - t1}
    result = ConflictResult(seed, steps, dists, rho, shallow, deep, align, timings)
    _write_json(out / "conflict.json", result.summary())
    return result


def replace_strategy(cfg: ExperimentConfig, kind: str) -> ExperimentConfig:
    c = cfg.copy()
    c.train.strategy = kind
    return c


def run_conflict(cfg: ExperimentConfig, root: Path) -> list[ConflictResult]:
    cfg.validate()
    root = Path(root)
    seeds = [int(s) for s in cfg.matrix.get("seed", [str(cfg.seed)])]
    results = [run_conflict_seed(cfg, s, root / f"seed{s}", root) for s in seeds]
    summary = {
        "seeds": seeds,
        "dominant_direction": analysis.DOMINANT_DIRECTION_METHOD,
        "per_seed": [r.summary() for r in results],
        "divergence_monotone": all(r.spearman > 0.9 for r in results),
        "deeper_exceeds_shallower": all(r.deep > r.shallow for r in results),
        "covft_mean_above_full_ft": all(r.alignment["covft"].mean > r.alignment["full_ft"].mean for r in results),
        "covft_std_below_full_ft_seeds": sum(r.alignment["covft"].std < r.alignment["full_ft"].std for r in results),
    }
    _write_json(root / "conflict_summary.json", summary)
    return results


# ---------------------------------------------------------------- analyze


def run_analyze(run_dir: Path, k: int | None = None, seed: int | None = None) -> dict:
    """Clustering, PCA, similarity lifts and routing-context correlation for one run."""
    run_dir = Path(run_dir)
    cfg_path = run_dir / "config.cfg"
    if not cfg_path.exists():
        raise ArtifactError(f"missing run config {cfg_path}")
    cfg = ExperimentConfig.load(cfg_path)
    traces = Traces.load(run_dir / "traces")
    k = cfg.analysis.k if k is None else k
    seed = cfg.seed if seed is None else seed
    layer = cfg.analysis.context_layer
    contexts = traces.contexts[layer]
    routing = np.concatenate(list(traces.routing), axis=1)
    seed_a = subseed(seed, "analysis-kmeans")
    clusters = analysis.kmeans(contexts, k, seed_a)
    coords = analysis.pca_2d(contexts)
    lifts = analysis.intra_inter_similarity(clusters.assignments, traces.visual, traces.text)
    try:
        corr = analysis.routing_context_correlation(contexts, routing, cfg.analysis.pairs, subseed(seed, "analysis-pairs"))
        rc = {"pearson_r": corr.r, "shuffle_null_r": corr.null_r, "pairs": corr.n_pairs}
    except DegenerateInputError as exc:  # e.g. an untrained router gives constant routing similarity
        corr, rc = None, {"pearson_r": None, "shuffle_null_r": None, "pairs": cfg.analysis.pairs, "degenerate": str(exc)}
    ex = analysis.exemplars(contexts, clusters, cfg.analysis.exemplars)
    ids = traces.sample_ids
    out = run_dir / "analysis"
    out.mkdir(exist_ok=True)
    kinds_per_cluster = []
    for j in range(k):
        members = [traces.kinds[i] for i in np.flatnonzero(clusters.assignments == j)]
        kinds_per_cluster.append({kk: members.count(kk) for kk in sorted(set(members))})
    report = {
        "run_id": cfg.run_id(),
        "k": k,
        "n": int(len(contexts)),
        "context_layer": layer,
        "kmeans": {
            "inertia": clusters.inertia,
            "iterations": clusters.iterations,
            "sizes": np.bincount(clusters.assignments, minlength=k).tolist(),
            "kinds": kinds_per_cluster,
            "exemplar_sample_ids": [[int(ids[i]) for i in group] for group in ex],
        },
        "pca_variance": coords.variance.tolist(),
        "similarity": lifts,
        "routing_context": rc,
    }
    _write_json(out / "report.json", report)
    _write_csv(out / "pca.csv", ["sample_id", "task_kind", "cluster", "pc1", "pc2"],
               [[int(ids[i]), traces.kinds[i], int(clusters.assignments[i]), _num(coords.coords[i, 0]), _num(coords.coords[i, 1])]
                for i in range(len(ids))])
    _write_csv(out / "inertia.csv", ["iteration", "inertia"], [[i, _num(v)] for i, v in enumerate(clusters.inertia_trace)])
    if corr is not None:
        _write_csv(out / "routing_context_pairs.csv", ["context_cos", "routing_cos"],
                   [[_num(a), _num(b)] for a, b in zip(corr.x, corr.y)])
    return report
