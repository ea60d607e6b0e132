"""Desk-scale experiment driver: synthetic and CSV tasks, three methods, run logs."""
from __future__ import annotations

import csv
import enum
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from . import kernels
from .adapter import AdapterLayer, adapter_forward, ortho_penalty
from .allocator import AdjustmentEvent, AllocatorConfig, adjust, is_adjustment_step
from .errors import ConfigError, TrainingAbort
from .importance import ImportanceTracker, RankScore, rank_scores

log = logging.getLogger(__name__)

MATRIX_ID = "W"


# -- task and method specs -----------------------------------------------------


@dataclass(frozen=True)
class PlantedLowRankTask:
    """Teacher = frozen base weights plus a planted low-rank perturbation per layer.

    ``dims`` lists layer widths ``(d0, d1, ..., dL)``; layer ``l`` maps
    ``dims[l] -> dims[l+1]``. Each planted direction has singular value
    ``signal``; targets get Gaussian noise of standard deviation ``noise``.
    """

    dims: tuple[int, ...] = (16, 16, 16, 16)
    planted_ranks: tuple[int, ...] = (1, 2, 6)
    noise: float = 0.1
    signal: float = 1.0
    n_train: int = 1024
    n_eval: int = 512

    def __post_init__(self):
        if len(self.dims) < 2:
            raise ConfigError("need at least one layer", "task.dims")
        if len(self.planted_ranks) != len(self.dims) - 1:
            raise ConfigError(
                f"{len(self.planted_ranks)} planted ranks for {len(self.dims) - 1} layers", "task.planted_ranks"
            )
        for i, r in enumerate(self.planted_ranks):
            if not 0 <= r <= min(self.dims[i], self.dims[i + 1]):
                raise ConfigError(f"rank {r} does not fit layer {i}", "task.planted_ranks")
        if self.noise < 0:
            raise ConfigError("must be >= 0", "task.noise")
        if self.n_train < 1 or self.n_eval < 1:
            raise ConfigError("sample counts must be >= 1", "task.n_train/n_eval")


@dataclass(frozen=True)
class CsvClassificationTask:
    """Rows of real features with an integer class label in the last column."""

    path: str
    n_features: int
    n_classes: int
    split: float = 0.8
    hidden: int = 16
    n_layers: int = 3

    def __post_init__(self):
        if not 0.0 < self.split < 1.0:
            raise ConfigError("must lie in (0, 1)", "task.split")
        if self.n_features < 1 or self.n_classes < 2:
            raise ConfigError("need >= 1 feature and >= 2 classes", "task.n_features/n_classes")
        if self.n_layers < 1 or self.hidden < 1:
            raise ConfigError("need >= 1 adapter layer of width >= 1", "task.n_layers/hidden")


TaskSpec = PlantedLowRankTask | CsvClassificationTask


class MethodKind(str, enum.Enum):
    FIXED = "fixed"
    PRUNE_ONLY = "prune_only"
    ELASTIC = "elastic"


@dataclass(frozen=True)
class MethodSpec:
    kind: MethodKind
    allocator: AllocatorConfig

    @property
    def start_rank(self) -> int:
        # the prune-only comparator starts 1.5x above the target rank
        if self.kind is MethodKind.PRUNE_ONLY:
            return max(1, int(np.floor(1.5 * self.allocator.init_rank + 0.5)))
        return self.allocator.init_rank


@dataclass(frozen=True)
class TrainSettings:
    learning_rate: float = 2.0
    batch_size: int = 32
    ortho_weight: float = 0.1
    beta1: float = 0.85
    beta2: float = 0.85


# -- data ----------------------------------------------------------------------


@dataclass
class TaskData:
    task: TaskSpec
    bases: list[np.ndarray]
    x_train: np.ndarray
    y_train: np.ndarray
    x_eval: np.ndarray
    y_eval: np.ndarray
    teacher: list[np.ndarray] | None = None
    features: np.ndarray | None = None
    mean: np.ndarray | None = None
    std: np.ndarray | None = None

    @property
    def is_classification(self) -> bool:
        return isinstance(self.task, CsvClassificationTask)


def _streams(seed: int) -> dict[str, np.random.Generator]:
    names = ("task", "init", "batch", "expand")
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {n: np.random.default_rng(c) for n, c in zip(names, children)}


def planted_perturbation(d1: int, d2: int, rank: int, signal: float, rng: np.random.Generator) -> np.ndarray:
    if rank == 0:
        return np.zeros((d1, d2))
    u, _ = np.linalg.qr(rng.standard_normal((d1, rank)))
    v, _ = np.linalg.qr(rng.standard_normal((d2, rank)))
    return signal * (u @ v.T)


def teacher_forward(weights: Sequence[np.ndarray], x: np.ndarray) -> np.ndarray:
    h = x
    for i, w in enumerate(weights):
        h = h @ w
        if i < len(weights) - 1:
            h = np.tanh(h)
    return h


def read_csv_dataset(path: str | Path, n_features: int) -> tuple[np.ndarray, np.ndarray]:
    """Header row, ``n_features`` real columns, integer label last. Bad rows raise with the line number."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"no such file: {path}", "task.path")
    xs, ys = [], []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ConfigError(f"{path}: empty file", "task.path")
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != n_features + 1:
                raise ValueError(f"{path}:{line}: expected {n_features + 1} columns, got {len(row)}")
            try:
                feats = [float(v) for v in row[:-1]]
                label = int(row[-1])
            except ValueError as exc:
                raise ValueError(f"{path}:{line}: {exc}") from None
            if not np.all(np.isfinite(feats)):
                raise ValueError(f"{path}:{line}: non-finite feature")
            xs.append(feats)
            ys.append(label)
    return np.array(xs, dtype=np.float64).reshape(-1, n_features), np.array(ys, dtype=np.intp)


def prepare_task(task: TaskSpec, seed: int) -> TaskData:
    rng = _streams(seed)["task"]
    if isinstance(task, PlantedLowRankTask):
        bases, teacher = [], []
        for i, planted in enumerate(task.planted_ranks):
            d1, d2 = task.dims[i], task.dims[i + 1]
            w0 = rng.normal(0.0, 1.0 / np.sqrt(d1), size=(d1, d2))
            bases.append(w0)
            teacher.append(w0 + planted_perturbation(d1, d2, planted, task.signal, rng))
        n = task.n_train + task.n_eval
        x = rng.standard_normal((n, task.dims[0]))
        y = teacher_forward(teacher, x) + task.noise * rng.standard_normal((n, task.dims[-1]))
        return TaskData(
            task, bases, x[: task.n_train], y[: task.n_train], x[task.n_train :], y[task.n_train :], teacher=teacher
        )

    x, y = read_csv_dataset(task.path, task.n_features)
    if y.size and (y.min() < 0 or y.max() >= task.n_classes):
        raise ConfigError(f"labels must lie in [0, {task.n_classes})", "task.n_classes")
    order = rng.permutation(len(y))
    n_train = int(np.floor(task.split * len(y)))
    if n_train < 1 or n_train >= len(y):
        raise ConfigError(f"split {task.split} of {len(y)} rows leaves an empty train or eval set", "task.split")
    tr, ev = order[:n_train], order[n_train:]
    mean = x[tr].mean(axis=0)
    std = x[tr].std(axis=0)
    std[std == 0] = 1.0
    features = rng.normal(0.0, 1.0 / np.sqrt(task.n_features), size=(task.n_features, task.hidden))
    bases = [rng.normal(0.0, 1.0 / np.sqrt(task.hidden), size=(task.hidden, task.hidden)) for _ in range(task.n_layers)]
    return TaskData(task, bases, x[tr], y[tr], x[ev], y[ev], features=features, mean=mean, std=std)


# -- model ---------------------------------------------------------------------


@dataclass
class Model:
    """Stack of frozen linear blocks (some carrying adapters), tanh in between.

    For classification a frozen random feature map precedes the stack and a
    trainable linear head follows it.
    """

    bases: list[ad.Parameter]
    adapters: dict[int, AdapterLayer]
    head: ad.Parameter | None = None
    features: ad.Parameter | None = None
    mean: np.ndarray | None = None
    std: np.ndarray | None = None

    @property
    def adapter_list(self) -> list[AdapterLayer]:
        return [self.adapters[i] for i in sorted(self.adapters)]

    def parameters(self) -> list[ad.Parameter]:
        params = [p for a in self.adapter_list for p in a.parameters()]
        if self.head is not None:
            params.append(self.head)
        return params

    def embed(self, x: np.ndarray) -> np.ndarray:
        if self.features is None:
            return x
        return np.tanh(kernels.matmul((x - self.mean) / self.std, self.features.value))

    def forward(self, x: np.ndarray) -> ad.Parameter:
        h = ad.Parameter(self.embed(x))
        last = len(self.bases) - 1
        for i, base in enumerate(self.bases):
            h = adapter_forward(self.adapters[i], h) if i in self.adapters else ad.matmul(h, base)
            if i < last or self.head is not None:
                h = ad.tanh(h)
        if self.head is not None:
            h = ad.matmul(h, self.head)
        return h

    def total_rank(self) -> int:
        return sum(a.r_active for a in self.adapters.values())

    def rank_table(self) -> list[tuple]:
        return [(a.layer_id, a.matrix_id, a.r_active) for a in self.adapter_list]


def build_model(
    data: TaskData,
    cfg: AllocatorConfig,
    seed: int,
    method: MethodKind | MethodSpec = MethodKind.ELASTIC,
    adapted_layers: Sequence[int] | None = None,
    ranks: Mapping[int, int] | None = None,
) -> Model:
    """Frozen bases from ``data`` with adapters on ``adapted_layers`` (default: all).

    ``ranks`` optionally fixes the starting rank per layer; its keys then
    also select the adapted layers.
    """
    kind = method.kind if isinstance(method, MethodSpec) else MethodKind(method)
    start = MethodSpec(kind, cfg).start_rank
    rng = _streams(seed)["init"]
    n_layers = len(data.bases)
    if ranks is not None:
        chosen = sorted(ranks)
    else:
        chosen = range(n_layers) if adapted_layers is None else sorted(set(adapted_layers))
    adapters = {}
    for i in chosen:
        if not 0 <= i < n_layers:
            raise ConfigError(f"layer {i} does not exist (model has {n_layers})", "adapted_layers")
        d1, d2 = data.bases[i].shape
        r = start if ranks is None else ranks[i]
        if not 1 <= r <= min(d1, d2):
            raise ConfigError(f"initial rank {r} does not fit layer {i} shape {d1}x{d2}", "init_rank")
        if kind is MethodKind.FIXED:
            cap = r
        else:
            cap = max(r, cfg.capacity(d1, d2, expanding=kind is MethodKind.ELASTIC) - start + r)
            cap = min(cap, d1, d2)
        adapters[i] = AdapterLayer(data.bases[i], cap, r, rng, layer_id=i, matrix_id=MATRIX_ID)
    bases = [ad.Parameter(b, name=f"base{i}") for i, b in enumerate(data.bases)]
    head = features = None
    if data.is_classification:
        task = data.task
        features = ad.Parameter(data.features)
        head = ad.Parameter(
            rng.normal(0.0, 1.0 / np.sqrt(task.hidden), size=(task.hidden, task.n_classes)), trainable=True, name="head"
        )
    return Model(bases, adapters, head=head, features=features, mean=data.mean, std=data.std)


# -- run log -------------------------------------------------------------------


@dataclass
class StepRecord:
    step: int
    loss: float
    reg: float
    total_rank: int

    def to_dict(self) -> dict:
        return {"step": self.step, "loss": self.loss, "reg": self.reg, "total_rank": self.total_rank}


@dataclass
class RunLog:
    method: str
    seed: int
    steps: list[StepRecord] = field(default_factory=list)
    events: list[AdjustmentEvent] = field(default_factory=list)
    rank_history: list[tuple[int, list[tuple]]] = field(default_factory=list)
    layer_states: list[tuple[int, list[dict]]] = field(default_factory=list)
    final_ranks: list[tuple] = field(default_factory=list)
    final_metric: dict = field(default_factory=dict)
    importance: dict[str, list[RankScore]] = field(default_factory=dict)

    def append_step(self, rec: StepRecord) -> None:
        if self.steps and rec.step <= self.steps[-1].step:
            raise ValueError(f"step {rec.step} after {self.steps[-1].step}")
        self.steps.append(rec)

    @property
    def metric_name(self) -> str:
        return next(iter(self.final_metric))

    @property
    def metric(self) -> float:
        return self.final_metric[self.metric_name]

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "seed": self.seed,
            "steps": [s.to_dict() for s in self.steps],
            "events": [e.to_dict() for e in self.events],
            "rank_history": [[step, [list(r) for r in table]] for step, table in self.rank_history],
            "layer_states": [[step, records] for step, records in self.layer_states],
            "final_ranks": [list(r) for r in self.final_ranks],
            "final_metric": self.final_metric,
            "importance": {
                stage: [[s.layer_id, s.matrix_id, s.rank_index, s.score] for s in scores]
                for stage, scores in self.importance.items()
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunLog":
        return cls(
            method=d["method"],
            seed=d["seed"],
            steps=[StepRecord(**s) for s in d["steps"]],
            events=[AdjustmentEvent.from_dict(e) for e in d["events"]],
            rank_history=[(step, [tuple(r) for r in table]) for step, table in d["rank_history"]],
            layer_states=[(step, records) for step, records in d.get("layer_states", [])],
            final_ranks=[tuple(r) for r in d["final_ranks"]],
            final_metric=d["final_metric"],
            importance={stage: [RankScore(*row) for row in rows] for stage, rows in d["importance"].items()},
        )


# -- training ------------------------------------------------------------------


def layer_state_records(layers: Sequence[AdapterLayer]) -> list[dict]:
    """Per-adapter snapshot: ids, active rank and the active singular values."""
    return [
        {
            "layer_id": a.layer_id,
            "matrix_id": a.matrix_id,
            "r_active": a.r_active,
            "lambda": [float(v) for v in a.lam.value[0, a.active_indices()]],
        }
        for a in layers
    ]


def _task_loss(model: Model, data: TaskData, x: np.ndarray, y: np.ndarray) -> ad.Parameter:
    out = model.forward(x)
    return ad.loss_softmax_ce(out, y) if data.is_classification else ad.loss_mse(out, y)


def _diagnostic(model: Model, step: int, loss: float) -> dict:
    return {
        "step": step,
        "loss": repr(loss),
        "layer_norms": {
            f"{a.layer_id}.{a.matrix_id}": {
                "P": float(np.linalg.norm(a.P.value)),
                "lam": float(np.linalg.norm(a.lam.value)),
                "Q": float(np.linalg.norm(a.Q.value)),
            }
            for a in model.adapter_list
        },
    }


def train(model: Model, data: TaskData, method: MethodSpec, settings: TrainSettings, seed: int) -> RunLog:
    """SGD on the adapters with importance tracking and scheduled rank adjustment."""
    cfg = method.allocator
    streams = _streams(seed)
    batch_rng, expand_rng = streams["batch"], streams["expand"]
    adapters = model.adapter_list
    tracker = ImportanceTracker(adapters, settings.beta1, settings.beta2)
    params = model.parameters()
    runlog = RunLog(method=method.kind.value, seed=seed)
    runlog.rank_history.append((0, model.rank_table()))
    runlog.layer_states.append((0, layer_state_records(adapters)))
    n = data.x_train.shape[0]
    batch = min(settings.batch_size, n)
    lr = settings.learning_rate
    warmup_snap = max(cfg.t_warmup - 1, 0)
    adjust_snap = cfg.window_end - 1

    for step in range(cfg.total_steps):
        idx = batch_rng.integers(0, n, size=batch)
        task_loss = _task_loss(model, data, data.x_train[idx], data.y_train[idx])
        if adapters:
            reg = ortho_penalty(adapters[0])
            for a in adapters[1:]:
                reg = ad.add(reg, ortho_penalty(a))
            total = ad.add(task_loss, ad.scale(reg, settings.ortho_weight))
            reg_value = reg.item()
        else:
            total, reg_value = task_loss, 0.0
        loss_value = task_loss.item()
        if not (np.isfinite(loss_value) and np.isfinite(reg_value)):
            raise TrainingAbort(f"non-finite loss at step {step}", _diagnostic(model, step, loss_value))

        ad.backward(total)
        tracker.observe(adapters)
        for p in params:
            p.value -= lr * p.grad
        ad.zero_grads(params)

        if method.kind is not MethodKind.FIXED and adapters and is_adjustment_step(step, cfg):
            event = adjust(adapters, tracker, step, cfg, expand_rng, expand=method.kind is MethodKind.ELASTIC)
            runlog.events.append(event)
            runlog.rank_history.append((step, model.rank_table()))
            runlog.layer_states.append((step, layer_state_records(adapters)))

        if adapters and step == warmup_snap:
            runlog.importance["post_warmup"] = rank_scores(adapters, tracker)
        if adapters and step == adjust_snap:
            runlog.importance["post_adjustment"] = rank_scores(adapters, tracker)
        runlog.append_step(StepRecord(step, loss_value, reg_value, model.total_rank()))

    runlog.final_ranks = model.rank_table()
    runlog.layer_states.append((cfg.total_steps, layer_state_records(adapters)))
    runlog.final_metric = evaluate(model, data)
    return runlog


def evaluate(model: Model, data: TaskData) -> dict:
    if data.x_eval.shape[0] == 0:
        raise ConfigError("evaluation split is empty", "task")
    out = model.forward(data.x_eval).value
    if data.is_classification:
        return {"accuracy": float(np.mean(np.argmax(out, axis=1) == data.y_eval))}
    diff = out - data.y_eval
    return {"mse": float(np.mean(diff * diff))}


def higher_is_better(metric_name: str) -> bool:
    return metric_name == "accuracy"


def run_method(
    data: TaskData,
    method: MethodSpec,
    settings: TrainSettings,
    seed: int,
    adapted_layers: Sequence[int] | None = None,
    ranks: Mapping[int, int] | None = None,
) -> RunLog:
    model = build_model(data, method.allocator, seed, method, adapted_layers, ranks)
    return train(model, data, method, settings, seed)


# -- rank-distribution probe ---------------------------------------------------


class ProbeVariant(str, enum.Enum):
    DROP_TOP = "drop_top"
    DROP_BOTTOM = "drop_bottom"
    ONLY_TOP = "only_top"


def layer_groups(runlog: RunLog) -> tuple[int, int, list[int]]:
    """(top layer, bottom layer, all layers) by final allocated rank."""
    totals: dict[int, int] = {}
    for layer_id, _, r in runlog.final_ranks:
        totals[layer_id] = totals.get(layer_id, 0) + r
    if len(totals) < 2:
        raise ConfigError(f"probe needs at least 2 layer groups, run has {len(totals)}", "task")
    ranked = sorted(totals, key=lambda lid: (totals[lid], lid))
    return ranked[-1], ranked[0], sorted(totals)


def rank_distribution_probe(
    runlog: RunLog,
    variant: ProbeVariant | str,
    data: TaskData,
    method: MethodSpec,
    settings: TrainSettings,
    seed: int | None = None,
) -> RunLog:
    """Retrain at the allocation found in ``runlog`` with one group's adapters removed (or kept alone).

    The rerun is fixed-rank: each kept layer starts at, and stays at, the
    rank the finished run gave it.
    """
    variant = ProbeVariant(variant)
    top, bottom, groups = layer_groups(runlog)
    allocated: dict[int, int] = {}
    for layer_id, _, r in runlog.final_ranks:
        allocated[layer_id] = allocated.get(layer_id, 0) + r
    if variant is ProbeVariant.DROP_TOP:
        keep = [g for g in groups if g != top]
    elif variant is ProbeVariant.DROP_BOTTOM:
        keep = [g for g in groups if g != bottom]
    else:
        keep = [top]
    seed = runlog.seed if seed is None else seed
    log.info("probe %s: adapting layers %s", variant.value, keep)
    fixed = MethodSpec(MethodKind.FIXED, method.allocator)
    run = run_method(data, fixed, settings, seed, ranks={g: allocated[g] for g in keep})
    run.method = f"probe:{variant.value}"
    return run
