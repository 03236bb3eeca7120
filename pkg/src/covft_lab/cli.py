"""``covft-lab`` command line: train, bench, conflict, analyze, verify.

Exit codes: 0 success, 2 configuration or missing-artifact error,
3 runtime abort (including failed verification), 4 partial matrix failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import __version__
from .errors import ArtifactError, ConfigError, InputError, NumericError
from .experiments import (
    ExperimentConfig,
    RunAborted,
    conflict_defaults,
    output_root,
    run_analyze,
    run_bench,
    run_conflict,
    run_train,
)

EXIT_OK, EXIT_CONFIG, EXIT_ABORT, EXIT_PARTIAL = 0, 2, 3, 4


def _common(p: argparse.ArgumentParser, matrix: bool = False) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--data-fraction", type=float, dest="fraction")
    p.add_argument("--strategy")
    p.add_argument("--routing")
    p.add_argument("--experts", type=int)
    p.add_argument("--comoe-start", type=int, dest="comoe_start")
    p.add_argument("--comoe-end", type=int, dest="comoe_end")
    p.add_argument("--out", help=f"output root (default: ${'{'}COVFT_LAB_OUT{'}'} or ./covft-runs)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    if matrix:
        p.add_argument("--jobs", type=int, default=1, help="parallel matrix cells")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="covft-lab", description="Context-aware visual fine-tuning lab.")
    parser.add_argument("--version", action="version", version=f"covft-lab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    _common(sub.add_parser("train", help="two-stage training of one configuration"))
    _common(sub.add_parser("bench", help="run a strategy/ablation matrix and tabulate accuracy"), matrix=True)
    _common(sub.add_parser("conflict", help="twin-run divergence and gradient alignment"))
    an = sub.add_parser("analyze", help="clustering and routing analyses of a trained run")
    an.add_argument("run_dir")
    an.add_argument("--seed", type=int)
    an.add_argument("--k", type=int)
    ve = sub.add_parser("verify", help="gradient and invariant checks")
    ve.add_argument("--seed", type=int, default=0)
    ve.add_argument("--out", help="write verify.json here")
    return parser


def load_config(args, base: ExperimentConfig | None = None) -> ExperimentConfig:
    base = base or ExperimentConfig()
    cfg = ExperimentConfig.load(args.config, base) if args.config else base.copy()
    overrides = {
        "seed": args.seed,
        "data.fraction": args.fraction,
        "train.strategy": args.strategy,
        "model.routing": args.routing,
        "model.experts": args.experts,
        "model.comoe_start": args.comoe_start,
        "model.comoe_end": args.comoe_end,
    }
    for key, value in overrides.items():
        if value is not None:
            cfg.set(key, str(value))
    if args.seed is not None:
        cfg.matrix.pop("seed", None)
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        cfg.set(key.strip(), value.strip())
    cfg.validate()
    return cfg


def cmd_train(args) -> int:
    cfg = load_config(args)
    root = output_root(args.out, cfg)
    res = run_train(cfg, root / cfg.run_id(), root)
    print(f"run dir: {res.run_dir}")
    print(f"macro accuracy: {res.accuracy['macro']:.4f}")
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = load_config(args)
    root = output_root(args.out, cfg) / (cfg.name or "bench")
    res = run_bench(cfg, root, jobs=max(1, args.jobs))
    print(res.summary.read_text(), end="")
    print(f"table: {res.table}")
    for variant, seed, err in res.failed:
        print(f"failed: {variant} seed {seed}: {err}", file=sys.stderr)
    return EXIT_PARTIAL if res.failed else EXIT_OK


def cmd_conflict(args) -> int:
    cfg = load_config(args, conflict_defaults())
    root = output_root(args.out, cfg) / (cfg.name or "conflict")
    results = run_conflict(cfg, root)
    for r in results:
        a = r.alignment
        print(
            f"seed {r.seed}: spearman={r.spearman:.3f} shallow={r.shallow:.4f} deep={r.deep:.4f} "
            f"cos full_ft={a['full_ft'].mean:.3f}±{a['full_ft'].std:.3f} covft={a['covft'].mean:.3f}±{a['covft'].std:.3f}"
        )
    print(f"bundle: {root}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    report = run_analyze(Path(args.run_dir), k=args.k, seed=args.seed)
    sim, rc = report["similarity"], report["routing_context"]
    if rc["pearson_r"] is None:
        print(f"routing-context r undefined: {rc['degenerate']}")
    else:
        print(f"routing-context r={rc['pearson_r']:.3f} (null {rc['shuffle_null_r']:.3f})")
    print(f"visual lift {sim['visual']['lift_pct']:.2f}%  textual lift {sim['textual']['lift_pct']:.2f}%")
    print(f"report: {Path(args.run_dir) / 'analysis' / 'report.json'}")
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import run_suite

    results = run_suite(args.seed)
    for r in results:
        print(r.line())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        payload = [{"name": r.name, "passed": r.passed, "detail": r.detail} for r in results]
        (out / "verify.json").write_text(json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n")
    return EXIT_OK if all(r.passed for r in results) else EXIT_ABORT


COMMANDS = {"train": cmd_train, "bench": cmd_bench, "conflict": cmd_conflict, "analyze": cmd_analyze, "verify": cmd_verify}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, InputError, ArtifactError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (RunAborted, NumericError) as exc:
        where = f" (partial artifacts in {exc.run_dir})" if isinstance(exc, RunAborted) else ""
        print(f"aborted: {exc}{where}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
