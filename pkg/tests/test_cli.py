import json
import subprocess
import sys
from pathlib import Path
from statistics import median

import numpy as np
import pytest
import yaml

from elastic_rank.cli import main
from elastic_rank.config import DEFAULTS, load_config, parse_config
from elastic_rank.errors import ConfigError

ROOT = Path(__file__).resolve().parents[1]

SMALL = {
    "task": {"kind": "planted", "dims": [8, 8, 8], "planted_ranks": [1, 3], "n_train": 128, "n_eval": 64},
    "method": "elastic",
    "total_steps": 300,
    "warmup_steps": 50,
    "stabilize_steps": 100,
    "adjust_interval": 25,
    "init_rank": 2,
    "k": 1,
    "b": 1,
}


def write_config(tmp_path, name="cfg.yaml", **overrides):
    raw = {**SMALL, "output_dir": str(tmp_path / "out"), **overrides}
    path = tmp_path / name
    path.write_text(yaml.safe_dump(raw))
    return path


def out_files(path):
    return sorted(p.relative_to(path).as_posix() for p in path.rglob("*") if p.is_file())


# -- config ingestion ----------------------------------------------------------


def test_defaults_fill_missing_keys(tmp_path):
    cfg = parse_config({"task": SMALL["task"]}, tmp_path)
    assert cfg.allocator.total_steps == DEFAULTS["total_steps"]
    assert cfg.settings.learning_rate == DEFAULTS["learning_rate"]
    assert cfg.output_dir == Path(DEFAULTS["output_dir"])


def test_unknown_keys_rejected_with_path(tmp_path):
    with pytest.raises(ConfigError, match="warmup_step"):
        parse_config({**SMALL, "warmup_step": 3}, tmp_path)
    with pytest.raises(ConfigError, match=r"task\.nosie"):
        parse_config({**SMALL, "task": {**SMALL["task"], "nosie": 0.1}}, tmp_path)


def test_allocator_invariants_revalidated(tmp_path):
    with pytest.raises(ConfigError):
        parse_config({**SMALL, "warmup_steps": 200, "stabilize_steps": 200}, tmp_path)
    with pytest.raises(ConfigError, match="method"):
        parse_config({**SMALL, "method": "lora"}, tmp_path)


def test_shipped_config_loads():
    cfg = load_config(ROOT / "configs" / "planted.yaml")
    assert cfg.task.planted_ranks == (1, 2, 6)
    assert cfg.allocator.n_events >= 10


def test_csv_path_resolves_next_to_config(tmp_path):
    raw = {"task": {"kind": "csv", "path": "data.csv", "n_features": 2, "n_classes": 2}}
    path = tmp_path / "c.yaml"
    path.write_text(yaml.safe_dump(raw))
    assert Path(load_config(path).task.path) == tmp_path / "data.csv"


# -- exit codes ----------------------------------------------------------------


def test_missing_config_exits_2(tmp_path, capsys):
    missing = tmp_path / "nope.yaml"
    assert main(["run", "--config", str(missing)]) == 2
    assert str(missing) in capsys.readouterr().err


def test_bad_key_exits_2_naming_key(tmp_path, capsys):
    path = write_config(tmp_path, learnin_rate=0.1)
    assert main(["run", "--config", str(path)]) == 2
    assert "learnin_rate" in capsys.readouterr().err


def test_malformed_yaml_exits_2(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("task: [unclosed\n")
    assert main(["run", "--config", str(path)]) == 2


def test_divergence_exits_3_with_diagnostic(tmp_path, capsys):
    path = write_config(tmp_path, learning_rate=1e6)
    with np.errstate(all="ignore"):
        assert main(["run", "--config", str(path)]) == 3
    err = capsys.readouterr().err
    diag = tmp_path / "out" / "abort.json"
    assert str(diag) in err
    assert "layer_norms" in json.loads(diag.read_text())


def test_unknown_subcommand_fails():
    with pytest.raises(SystemExit) as info:
        main(["train"])
    assert info.value.code != 0


# -- subcommands ---------------------------------------------------------------


def test_run_twice_is_byte_identical(tmp_path):
    path = write_config(tmp_path)
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["run", "--config", str(path), "--output-dir", str(a)]) == 0
    assert main(["run", "--config", str(path), "--output-dir", str(b)]) == 0
    for name in ("metrics.jsonl", "events.jsonl", "ranks.csv", "importance.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    assert main(["run", "--config", str(path), "--output-dir", str(b), "--seed", "1"]) == 0
    assert (a / "metrics.jsonl").read_bytes() != (b / "metrics.jsonl").read_bytes()


def test_run_writes_everything_under_output_dir(tmp_path):
    path = write_config(tmp_path)
    assert main(["run", "--config", str(path), "--per-event"]) == 0
    assert out_files(tmp_path / "out") == sorted([
        "events.jsonl", "importance.csv", "importance_post_warmup.csv", "layers.csv",
        "metrics.jsonl", "ranks.csv", "ranks_per_event.csv", "runlog.json", "summary.json",
    ])
    assert out_files(tmp_path) == sorted(["cfg.yaml"] + ["out/" + f for f in out_files(tmp_path / "out")])


def test_export_rerenders_identically(tmp_path):
    path = write_config(tmp_path)
    out = tmp_path / "out"
    main(["run", "--config", str(path), "--per-event"])
    before = {f: (out / f).read_bytes() for f in out_files(out)}
    for f in before:
        if f != "runlog.json":
            (out / f).unlink()
    assert main(["export", "--output-dir", str(out), "--per-event"]) == 0
    assert {f: (out / f).read_bytes() for f in out_files(out)} == before


def test_export_without_runlog_fails(tmp_path):
    assert main(["export", "--output-dir", str(tmp_path)]) == 1


def test_compare_writes_three_rows(tmp_path):
    path = write_config(tmp_path)
    assert main(["compare", "--config", str(path), "--seeds", "2", "--keep-runs"]) == 0
    lines = (tmp_path / "out" / "compare.csv").read_text().splitlines()
    assert lines[0] == "method,metric,median,per_seed"
    assert [l.split(",")[0] for l in lines[1:]] == ["fixed", "prune_only", "elastic"]
    assert all(len(l.split(",")[3].split(";")) == 2 for l in lines[1:])
    assert (tmp_path / "out" / "elastic" / "seed1" / "metrics.jsonl").is_file()


def test_ablate_scheduler_outputs(tmp_path):
    path = write_config(tmp_path)
    assert main(["ablate-scheduler", "--config", str(path), "--seeds", "2"]) == 0
    out = tmp_path / "out"
    assert [l.split(",")[0] for l in (out / "scheduler.csv").read_text().splitlines()] == ["scheduler", "on", "off"]
    summary = json.loads((out / "scheduler_summary.json").read_text())
    assert set(summary) == {"wins", "seeds", "claim_holds"} and summary["seeds"] == 2


def test_probe_ranks_outputs(tmp_path):
    path = write_config(tmp_path)
    assert main(["probe-ranks", "--config", str(path), "--seeds", "1"]) == 0
    variants = [l.split(",")[0] for l in (tmp_path / "out" / "probe.csv").read_text().splitlines()[1:]]
    assert variants == ["untrained", "full", "drop_top", "drop_bottom", "only_top"]


def test_module_entry_point(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "elastic_rank", "run", "--config", str(tmp_path / "missing.yaml")],
        capture_output=True, text=True,
    )
    assert proc.returncode == 2
    assert "missing.yaml" in proc.stderr


@pytest.mark.slow
def test_compare_on_planted_task_favours_elastic(tmp_path):
    assert main([
        "compare", "--config", str(ROOT / "configs" / "planted.yaml"), "--output-dir", str(tmp_path), "--seeds", "5",
    ]) == 0
    lines = (tmp_path / "compare.csv").read_text().splitlines()[1:]
    medians = {l.split(",")[0]: float(l.split(",")[2]) for l in lines}
    assert len(lines) == 3
    assert medians["elastic"] <= medians["fixed"]
    per_seed = {l.split(",")[0]: [float(v) for v in l.split(",")[3].split(";")] for l in lines}
    assert median(per_seed["elastic"]) == medians["elastic"]


def test_shipped_csv_config_runs(tmp_path):
    cfg = ROOT / "configs" / "csv_blobs.yaml"
    assert main(["run", "--config", str(cfg), "--output-dir", str(tmp_path)]) == 0
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["final_metric"]["accuracy"] > 0.6
