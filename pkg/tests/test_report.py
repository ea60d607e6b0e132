import csv
import dataclasses
import io
import json

import pytest

from elastic_rank import report
from elastic_rank.allocator import AllocatorConfig
from elastic_rank.harness import MethodKind, MethodSpec, PlantedLowRankTask, TrainSettings, prepare_task, run_method

TASK = PlantedLowRankTask(dims=(8, 8, 8, 8), planted_ranks=(1, 2, 4), n_train=256, n_eval=128)
CFG = AllocatorConfig(total_steps=700, t_warmup=100, t_stabilize=200, adjust_interval=30, k=1, b=2, init_rank=2)


def _run(kind, init_rank=2, seed=0):
    cfg = dataclasses.replace(CFG, init_rank=init_rank)
    return run_method(prepare_task(TASK, seed), MethodSpec(MethodKind(kind), cfg), TrainSettings(), seed)


@pytest.fixture(scope="module")
def elastic():
    return _run("elastic")


def rows(text):
    return list(csv.DictReader(io.StringIO(text)))


def test_fixed_heatmap_is_uniform():
    run = _run("fixed", init_rank=4)
    table = rows(report.export_heatmap(run))
    assert [r["layer"] for r in table] == ["0", "1", "2"]
    assert {r["rank"] for r in table} == {"4"}
    assert report.export_heatmap(run).splitlines()[0] == "layer,matrix,rank"


def test_per_event_column_sums_are_conserved(elastic):
    assert len(elastic.events) >= 10
    table = rows(report.export_heatmap(elastic, per_event=True))
    sums = {}
    for r in table:
        sums[r["step"]] = sums.get(r["step"], 0) + int(r["rank"])
    assert len(sums) == len(elastic.events) + 1
    assert set(sums.values()) == {3 * CFG.init_rank}
    assert all(int(r["rank"]) >= 1 for r in table)


def test_heatmap_cells_match_layer_states(elastic):
    final_step, states = elastic.layer_states[-1]
    assert final_step == CFG.total_steps
    table = rows(report.export_heatmap(elastic))
    assert [(int(r["layer"]), r["matrix"], int(r["rank"])) for r in table] == [
        (s["layer_id"], s["matrix_id"], s["r_active"]) for s in states
    ]
    assert all(len(s["lambda"]) == s["r_active"] for s in states)
    layers, matrices, grid = report.heatmap_matrix(elastic)
    assert layers == [0, 1, 2] and matrices == ["W"]
    assert [row[0] for row in grid] == [s["r_active"] for s in states]


def test_importance_row_counts(elastic):
    warm = rows(report.export_importance(elastic, "post_warmup"))
    adj = rows(report.export_importance(elastic, "post_adjustment"))
    assert len(warm) == 3 * CFG.init_rank
    assert len(adj) == len(warm)
    assert list(warm[0]) == ["layer", "matrix", "rank", "score"]


def test_missing_snapshot_names_stage(elastic):
    trimmed = type(elastic).from_dict(elastic.to_dict())
    del trimmed.importance["post_adjustment"]
    with pytest.raises(report.SnapshotMissingError, match="post_adjustment"):
        report.export_importance(trimmed, "post_adjustment")
    with pytest.raises(ValueError, match="unknown stage"):
        report.export_importance(elastic, "midway")


def test_metrics_lines_are_single_json_objects(elastic):
    lines = report.metrics_jsonl(elastic).splitlines()
    assert len(lines) == CFG.total_steps
    for line in lines[:50]:
        assert list(json.loads(line)) == ["step", "loss", "reg", "total_rank"]
    for line in report.events_jsonl(elastic).splitlines():
        assert list(json.loads(line)) == ["step", "b_t", "pruned", "expanded"]


def test_reexport_is_byte_identical(elastic, tmp_path):
    report.write_run(elastic, tmp_path, per_event=True)
    original = {p.name: p.read_bytes() for p in tmp_path.iterdir()}
    again = report.render_artifacts(report.read_runlog(tmp_path), per_event=True)
    assert set(again) | {"runlog.json"} == set(original)
    for name, text in again.items():
        assert text.encode() == original[name], name


def test_write_run_stays_inside_output_dir(elastic, tmp_path):
    out = tmp_path / "nested" / "run"
    written = report.write_run(elastic, out)
    assert all(p.parent == out for p in written)
    assert {p.name for p in tmp_path.rglob("*") if p.is_file()} == {p.name for p in written}
    assert {"metrics.jsonl", "events.jsonl", "ranks.csv", "importance.csv"} <= {p.name for p in written}


def test_read_runlog_missing(tmp_path):
    with pytest.raises(FileNotFoundError, match="runlog.json"):
        report.read_runlog(tmp_path)
