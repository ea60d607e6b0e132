"""Run configuration: a YAML (or JSON) mapping validated into typed specs.

Recognised keys::

    task:               # kind: planted | csv, plus that task's fields
    method              # fixed | prune_only | elastic
    total_steps, warmup_steps, stabilize_steps, adjust_interval
    init_rank, k, b, use_scheduler
    beta1, beta2, ortho_weight, learning_rate, batch_size
    seed, output_dir

Unknown keys are rejected so that a typo never silently falls back to a default.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

import yaml

from .allocator import AllocatorConfig
from .errors import ConfigError
from .harness import CsvClassificationTask, MethodKind, MethodSpec, PlantedLowRankTask, TaskSpec, TrainSettings

DEFAULTS: dict[str, Any] = {
    "method": "elastic",
    "total_steps": 4000,
    "warmup_steps": 500,
    "stabilize_steps": 1000,
    "adjust_interval": 200,
    "init_rank": 3,
    "k": 2,
    "b": 3,
    "use_scheduler": True,
    "beta1": 0.85,
    "beta2": 0.85,
    "ortho_weight": 0.1,
    "learning_rate": 2.0,
    "batch_size": 32,
    "seed": 0,
    "output_dir": "runs/default",
}

_TASK_KINDS = {"planted": PlantedLowRankTask, "csv": CsvClassificationTask}


@dataclass(frozen=True)
class RunConfig:
    task: TaskSpec
    method: MethodKind
    allocator: AllocatorConfig
    settings: TrainSettings
    seed: int
    output_dir: Path

    @property
    def method_spec(self) -> MethodSpec:
        return MethodSpec(self.method, self.allocator)

    def with_method(self, kind: MethodKind | str, **allocator_changes) -> "RunConfig":
        alloc = dataclasses.replace(self.allocator, **allocator_changes)
        return dataclasses.replace(self, method=MethodKind(kind), allocator=alloc)

    def with_seed(self, seed: int) -> "RunConfig":
        return dataclasses.replace(self, seed=seed)


def _expect(value, kind, key):
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if kind is int and isinstance(value, bool):
        raise ConfigError(f"expected an integer, got {value!r}", key)
    if not isinstance(value, kind):
        raise ConfigError(f"expected {kind.__name__}, got {value!r}", key)
    return value


def _parse_task(raw: Any, base_dir: Path) -> TaskSpec:
    if not isinstance(raw, Mapping):
        raise ConfigError("expected a mapping", "task")
    raw = dict(raw)
    kind = raw.pop("kind", "planted")
    if kind not in _TASK_KINDS:
        raise ConfigError(f"unknown task kind {kind!r} (expected one of {sorted(_TASK_KINDS)})", "task.kind")
    cls = _TASK_KINDS[kind]
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        if key not in fields:
            raise ConfigError(f"unknown key for {kind} task", f"task.{key}")
        if key in ("dims", "planted_ranks"):
            if not isinstance(value, (list, tuple)) or not all(isinstance(v, int) for v in value):
                raise ConfigError("expected a list of integers", f"task.{key}")
            value = tuple(value)
        elif key == "path":
            path = Path(_expect(value, str, "task.path"))
            value = str(path if path.is_absolute() else base_dir / path)
        elif key in ("noise", "signal", "split"):
            value = _expect(value, float, f"task.{key}")
        else:
            value = _expect(value, int, f"task.{key}")
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc), "task") from None


def parse_config(raw: Mapping[str, Any] | None, base_dir: Path | str = ".") -> RunConfig:
    """Validate a configuration mapping; a relative ``task.path`` resolves against ``base_dir``."""
    raw = dict(raw or {})
    base_dir = Path(base_dir)
    unknown = sorted(set(raw) - set(DEFAULTS) - {"task"})
    if unknown:
        raise ConfigError("unknown configuration key", unknown[0])
    task = _parse_task(raw.pop("task", {}), base_dir)
    merged = {**DEFAULTS, **raw}
    ints = ("total_steps", "warmup_steps", "stabilize_steps", "adjust_interval", "init_rank", "k", "b", "batch_size", "seed")
    floats = ("beta1", "beta2", "ortho_weight", "learning_rate")
    for key in ints:
        merged[key] = _expect(merged[key], int, key)
    for key in floats:
        merged[key] = _expect(merged[key], float, key)
    merged["use_scheduler"] = _expect(merged["use_scheduler"], bool, "use_scheduler")
    try:
        method = MethodKind(merged["method"])
    except ValueError:
        raise ConfigError(f"unknown method {merged['method']!r}", "method") from None
    for key in ("beta1", "beta2"):
        if not 0.0 < merged[key] < 1.0:
            raise ConfigError("must lie in (0, 1)", key)
    if merged["ortho_weight"] < 0:
        raise ConfigError("must be >= 0", "ortho_weight")
    if merged["learning_rate"] <= 0:
        raise ConfigError("must be > 0", "learning_rate")
    if merged["batch_size"] < 1:
        raise ConfigError("must be >= 1", "batch_size")
    allocator = AllocatorConfig(
        total_steps=merged["total_steps"],
        t_warmup=merged["warmup_steps"],
        t_stabilize=merged["stabilize_steps"],
        adjust_interval=merged["adjust_interval"],
        k=merged["k"],
        b=merged["b"],
        init_rank=merged["init_rank"],
        use_scheduler=merged["use_scheduler"],
    )
    settings = TrainSettings(
        learning_rate=merged["learning_rate"],
        batch_size=merged["batch_size"],
        ortho_weight=merged["ortho_weight"],
        beta1=merged["beta1"],
        beta2=merged["beta2"],
    )
    out = Path(_expect(merged["output_dir"], str, "output_dir"))
    return RunConfig(task, method, allocator, settings, merged["seed"], out)


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}", str(path))
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"could not parse: {exc}", str(path)) from None
    if raw is not None and not isinstance(raw, Mapping):
        raise ConfigError("top level must be a mapping", str(path))
    return parse_config(raw, base_dir=path.parent)
