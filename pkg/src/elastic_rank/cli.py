"""Command-line entry point: ``elastic-rank {run,compare,ablate-scheduler,probe-ranks,export}``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from statistics import median

import yaml

from . import report
from .config import RunConfig, load_config
from .errors import ConfigError, ElasticRankError, TrainingAbort
from .harness import (
    MethodKind,
    ProbeVariant,
    build_model,
    evaluate,
    higher_is_better,
    prepare_task,
    rank_distribution_probe,
    run_method,
)

log = logging.getLogger("elastic_rank")

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_ABORT = 0, 1, 2, 3


def _setup_logging() -> None:
    level = os.environ.get("ELASTIC_RANK_LOG", "error").upper()
    if level not in ("ERROR", "INFO", "DEBUG"):
        level = "ERROR"
    logging.basicConfig(level=getattr(logging, level), format="%(levelname)s %(name)s: %(message)s")


def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.output_dir is not None:
        cfg = RunConfig(cfg.task, cfg.method, cfg.allocator, cfg.settings, cfg.seed, Path(args.output_dir))
    return cfg


def _seeds(cfg: RunConfig, n: int) -> list[int]:
    return [cfg.seed + i for i in range(n)]


def _fmt(values) -> str:
    return ";".join(repr(v) for v in values)


def cmd_run(args) -> int:
    cfg = _config(args)
    data = prepare_task(cfg.task, cfg.seed)
    runlog = run_method(data, cfg.method_spec, cfg.settings, cfg.seed)
    report.write_run(runlog, cfg.output_dir, per_event=args.per_event)
    print(f"{runlog.method} seed={runlog.seed} {runlog.metric_name}={runlog.metric:.6g} -> {cfg.output_dir}")
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = _config(args)
    rows = []
    for kind in (MethodKind.FIXED, MethodKind.PRUNE_ONLY, MethodKind.ELASTIC):
        values, name = [], None
        for seed in _seeds(cfg, args.seeds):
            data = prepare_task(cfg.task, seed)
            runlog = run_method(data, cfg.with_method(kind).method_spec, cfg.settings, seed)
            values.append(runlog.metric)
            name = runlog.metric_name
            if args.keep_runs:
                report.write_run(runlog, cfg.output_dir / kind.value / f"seed{seed}")
        rows.append((kind.value, name, repr(median(values)), _fmt(values)))
    path = report.write_table(cfg.output_dir / "compare.csv", ("method", "metric", "median", "per_seed"), rows)
    print(path.read_text(), end="")
    return EXIT_OK


def scheduler_ablation(cfg: RunConfig, seeds: list[int]) -> dict:
    """Elastic with and without the budget scheduler on the same seeds."""
    results = {}
    for on in (True, False):
        spec = cfg.with_method(MethodKind.ELASTIC, use_scheduler=on).method_spec
        results[on] = [run_method(prepare_task(cfg.task, s), spec, cfg.settings, s) for s in seeds]
    name = results[True][0].metric_name
    sign = 1 if higher_is_better(name) else -1
    wins = sum(sign * (a.metric - b.metric) >= 0 for a, b in zip(results[True], results[False]))
    return {
        "metric": name,
        "with": [r.metric for r in results[True]],
        "without": [r.metric for r in results[False]],
        "wins": wins,
        "claim_holds": wins >= (len(seeds) // 2 + 1),
    }


def cmd_ablate(args) -> int:
    cfg = _config(args)
    res = scheduler_ablation(cfg, _seeds(cfg, args.seeds))
    rows = [
        ("on", res["metric"], repr(median(res["with"])), _fmt(res["with"])),
        ("off", res["metric"], repr(median(res["without"])), _fmt(res["without"])),
    ]
    path = report.write_table(cfg.output_dir / "scheduler.csv", ("scheduler", "metric", "median", "per_seed"), rows)
    (cfg.output_dir / "scheduler_summary.json").write_text(
        json.dumps({"wins": res["wins"], "seeds": args.seeds, "claim_holds": res["claim_holds"]}) + "\n"
    )
    print(path.read_text(), end="")
    print(f"scheduler >= no scheduler in {res['wins']}/{args.seeds} seeds")
    return EXIT_OK


def probe_table(cfg: RunConfig, seeds: list[int]) -> list[tuple]:
    spec = cfg.with_method(MethodKind.ELASTIC).method_spec
    per: dict[str, list[float]] = {"untrained": [], "full": [], **{v.value: [] for v in ProbeVariant}}
    name = None
    for seed in seeds:
        data = prepare_task(cfg.task, seed)
        full = run_method(data, spec, cfg.settings, seed)
        name = full.metric_name
        per["full"].append(full.metric)
        untrained = build_model(data, spec.allocator, seed, spec)
        per["untrained"].append(evaluate(untrained, data)[name])
        for variant in ProbeVariant:
            per[variant.value].append(rank_distribution_probe(full, variant, data, spec, cfg.settings).metric)
    return [(variant, name, repr(median(vals)), _fmt(vals)) for variant, vals in per.items()]


def cmd_probe(args) -> int:
    cfg = _config(args)
    rows = probe_table(cfg, _seeds(cfg, args.seeds))
    path = report.write_table(cfg.output_dir / "probe.csv", ("variant", "metric", "median", "per_seed"), rows)
    print(path.read_text(), end="")
    return EXIT_OK


def cmd_export(args) -> int:
    run_dir = Path(args.output_dir)
    runlog = report.read_runlog(run_dir)
    for name, text in report.render_artifacts(runlog, per_event=args.per_event).items():
        (run_dir / name).write_text(text)
    print(f"re-rendered artifacts in {run_dir}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="elastic-rank", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seeds=False):
        p.add_argument("--config", required=True, help="YAML/JSON run configuration")
        p.add_argument("--seed", type=int, help="override the configured seed")
        p.add_argument("--output-dir", help="override the configured output directory")
        if seeds:
            p.add_argument("--seeds", type=int, default=5, help="number of consecutive seeds (default 5)")

    p = sub.add_parser("run", help="train one configuration and write its artifacts")
    common(p)
    p.add_argument("--per-event", action="store_true", help="also write the per-event rank table")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", help="fixed vs prune-only vs elastic on one task")
    common(p, seeds=True)
    p.add_argument("--keep-runs", action="store_true", help="write every run's artifacts too")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("ablate-scheduler", help="elastic with and without the budget scheduler")
    common(p, seeds=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("probe-ranks", help="retrain with adapters removed by final allocation")
    common(p, seeds=True)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("export", help="re-render artifacts from a run directory's runlog.json")
    p.add_argument("--output-dir", required=True, help="run directory holding runlog.json")
    p.add_argument("--per-event", action="store_true")
    p.set_defaults(func=cmd_export)
    return parser


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, yaml.YAMLError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingAbort as exc:
        out = Path(getattr(args, "output_dir", None) or ".")
        try:
            out = _config(args).output_dir
        except Exception:
            pass
        out.mkdir(parents=True, exist_ok=True)
        diag = out / "abort.json"
        diag.write_text(json.dumps(exc.diagnostic, indent=2) + "\n")
        print(f"training aborted: {exc}; diagnostic written to {diag}", file=sys.stderr)
        return EXIT_ABORT
    except (ElasticRankError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
