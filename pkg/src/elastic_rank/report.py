"""Run artifacts: JSON-lines logs and CSV exports behind the heatmap and importance plots.

Every export is a pure function of a :class:`RunLog`, so re-rendering from
``runlog.json`` reproduces the original files byte for byte.
"""
from __future__ import annotations

import csv
import io
import json
from pathlib import Path
from typing import Iterable, Sequence

from .errors import ElasticRankError
from .harness import RunLog

STAGES = ("post_warmup", "post_adjustment")


class SnapshotMissingError(ElasticRankError, KeyError):
    def __str__(self):
        return self.args[0]


def _jsonl(records: Iterable[dict]) -> str:
    return "".join(json.dumps(r, separators=(",", ":")) + "\n" for r in records)


def metrics_jsonl(runlog: RunLog) -> str:
    return _jsonl(s.to_dict() for s in runlog.steps)


def events_jsonl(runlog: RunLog) -> str:
    return _jsonl(e.to_dict() for e in runlog.events)


def _csv(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def export_heatmap(runlog: RunLog, per_event: bool = False) -> str:
    """Final ranks as ``layer,matrix,rank``; ``per_event`` adds a leading ``step`` column per snapshot."""
    if not per_event:
        return _csv(("layer", "matrix", "rank"), runlog.final_ranks)
    rows = [(step, *row) for step, table in runlog.rank_history for row in table]
    return _csv(("step", "layer", "matrix", "rank"), rows)


def heatmap_matrix(runlog: RunLog) -> tuple[list, list, list[list[int | None]]]:
    """Final ranks as a grid: (layer labels, matrix labels, rows of cells)."""
    layers = sorted({r[0] for r in runlog.final_ranks})
    matrices = sorted({r[1] for r in runlog.final_ranks})
    cells = {(l, m): r for l, m, r in runlog.final_ranks}
    return layers, matrices, [[cells.get((l, m)) for m in matrices] for l in layers]


def export_importance(runlog: RunLog, stage: str) -> str:
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r} (expected one of {STAGES})")
    if stage not in runlog.importance:
        raise SnapshotMissingError(f"run has no importance snapshot for stage {stage!r}")
    rows = [(s.layer_id, s.matrix_id, s.rank_index, repr(s.score)) for s in runlog.importance[stage]]
    return _csv(("layer", "matrix", "rank", "score"), rows)


def export_layer_states(runlog: RunLog) -> str:
    """``step,layer,matrix,r_active,lambda`` with the active singular values joined by ``;``."""
    rows = [
        (step, r["layer_id"], r["matrix_id"], r["r_active"], ";".join(repr(v) for v in r["lambda"]))
        for step, records in runlog.layer_states
        for r in records
    ]
    return _csv(("step", "layer", "matrix", "r_active", "lambda"), rows)


def render_artifacts(runlog: RunLog, per_event: bool = False) -> dict[str, str]:
    files = {
        "metrics.jsonl": metrics_jsonl(runlog),
        "events.jsonl": events_jsonl(runlog),
        "ranks.csv": export_heatmap(runlog),
        "layers.csv": export_layer_states(runlog),
        "summary.json": json.dumps(
            {"method": runlog.method, "seed": runlog.seed, "final_metric": runlog.final_metric,
             "final_ranks": [list(r) for r in runlog.final_ranks]},
            indent=2,
        ) + "\n",
    }
    if "post_adjustment" in runlog.importance:
        files["importance.csv"] = export_importance(runlog, "post_adjustment")
    if "post_warmup" in runlog.importance:
        files["importance_post_warmup.csv"] = export_importance(runlog, "post_warmup")
    if per_event:
        files["ranks_per_event.csv"] = export_heatmap(runlog, per_event=True)
    return files


def write_run(runlog: RunLog, output_dir: str | Path, per_event: bool = False) -> list[Path]:
    """Write every artifact plus ``runlog.json`` under ``output_dir``."""
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = render_artifacts(runlog, per_event)
    files["runlog.json"] = json.dumps(runlog.to_dict(), separators=(",", ":")) + "\n"
    written = []
    for name, text in files.items():
        path = out / name
        path.write_text(text)
        written.append(path)
    return written


def read_runlog(run_dir: str | Path) -> RunLog:
    path = Path(run_dir) / "runlog.json"
    if not path.is_file():
        raise FileNotFoundError(f"no runlog.json in {run_dir}")
    return RunLog.from_dict(json.loads(path.read_text()))


def write_table(path: str | Path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(_csv(header, rows))
    return path
