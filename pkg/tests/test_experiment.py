import json

import pytest
import yaml

from recsim_profiles.errors import BackendError, ConfigError, DataError
from recsim_profiles.experiment import runner as runner_mod
from recsim_profiles.experiment.cli import main
from recsim_profiles.experiment.config import config_from_dict, load_config
from recsim_profiles.experiment.report import MISSING, build_tables, load_reports, rank_flags, render, write_report
from recsim_profiles.experiment.runner import Experiment, RunAborted
from recsim_profiles.llm import ScriptedBackend


def write_cfg(tmp_path, **sections):
    data = {
        "version": 1,
        "dataset": {"kind": "synthetic"},
        "backend": {"kind": "scripted"},
        "generator": {"generators": ["apg4recsim", "recent_interaction", "empty"]},
        "task": {"max_users": 6},
        "runs": 2,
        "seed": 0,
        "output_dir": "out",
    }
    for key, value in sections.items():
        if isinstance(value, dict) and isinstance(data.get(key), dict):
            data[key] = {**data[key], **value}
        else:
            data[key] = value
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump(data), encoding="utf-8")
    return path


@pytest.fixture
def cfg_path(tmp_path):
    return write_cfg(tmp_path)


# ------------------------------------------------------------------ config

def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.yaml")
    with pytest.raises(ConfigError, match="environment"):
        config_from_dict({"backend": {"api_key": "sk-123"}})
    with pytest.raises(ConfigError):
        config_from_dict({"runs": 0})
    with pytest.raises(ConfigError):
        config_from_dict({"task": {"bogus": 1}})
    with pytest.raises(ConfigError):
        load_config(write_cfg(tmp_path, dataset={"kind": "movielens", "ratings": "nope.dat", "movies": "nope2.dat"}))


def test_digest_ignores_output_and_cache_plumbing():
    base = config_from_dict({})
    moved = config_from_dict({"output_dir": "elsewhere", "backend": {"kind": "replay", "cache_path": "c.jsonl", "mode": "strict"}})
    assert base.digest() == moved.digest()
    assert base.digest() != config_from_dict({"seed": 1}).digest()
    assert base.digest() != config_from_dict({"backend": {"temperature": 0.7}}).digest()
    # the profile digest ignores task settings that only affect evaluation
    assert base.profile_digest() == config_from_dict({"task": {"candidates": 6, "discrimination_p": [1]}}).profile_digest()


# ------------------------------------------------------------------ ingest

def test_ingest_writes_artefacts_and_is_idempotent(cfg_path):
    exp = Experiment(load_config(cfg_path))
    manifest = exp.ingest()
    names = sorted(p.name for p in exp.dataset_dir.iterdir())
    assert {"manifest.json", "split.json", "stats.json", "exclusions.json"} <= set(names)
    before = {p.name: p.read_bytes() for p in exp.dataset_dir.iterdir()}
    assert Experiment(load_config(cfg_path)).ingest() == manifest
    assert {p.name: p.read_bytes() for p in exp.dataset_dir.iterdir()} == before
    assert manifest["n_users"] == 20 and manifest["n_skipped_lines"] == 0


def test_ingest_missing_file_fails_before_writing(tmp_path):
    cfg = config_from_dict(
        {"dataset": {"kind": "synthetic", "ratings": "gone.dat", "movies": "gone2.dat"}, "output_dir": "out"},
        base_dir=tmp_path,
    )
    with pytest.raises(ConfigError):
        Experiment(cfg).ingest()
    assert not (tmp_path / "out").exists()


# ---------------------------------------------------------------- profiles

def test_generate_profiles_and_resume(tmp_path):
    cfg = load_config(write_cfg(tmp_path, generator={"generators": ["apg4recsim"]}, task={"max_users": 4, "families": ["discrimination"]}))
    exp = Experiment(cfg)
    summary = exp.generate_profiles()
    assert summary == {"apg4recsim": {"profiles": 4, "failures": 0, "resumed": 0}}
    store = exp.store_path("apg4recsim")
    full = store.read_bytes()

    # drop the last profile plus a torn half line, then resume
    lines = full.decode().splitlines(keepends=True)
    store.write_text("".join(lines[:-1]) + lines[-1][:20], encoding="utf-8")
    again = Experiment(load_config(write_cfg(tmp_path, generator={"generators": ["apg4recsim"]}, task={"max_users": 4, "families": ["discrimination"]})))
    assert again.generate_profiles()["apg4recsim"]["resumed"] == 3
    assert store.read_bytes() == full


def test_skip_stage3_yields_semantic_merge(tmp_path):
    cfg = load_config(write_cfg(tmp_path, generator={"generators": ["apg4recsim"], "skip_stage3": True}, task={"max_users": 3, "families": ["rating"]}))
    exp = Experiment(cfg)
    assert list(exp.generate_profiles()) == ["semantic_merge"]
    profiles = exp.load_profiles("semantic_merge")
    assert {p.generator for p in profiles.values()} == {"semantic_merge"}


def _failing(request):
    raise BackendError("simulated outage")


def test_failure_ceiling_aborts(tmp_path):
    cfg = load_config(write_cfg(tmp_path, generator={"generators": ["recagent_style"]}))
    with pytest.raises(RunAborted):
        Experiment(cfg, backend=ScriptedBackend(responder=_failing)).generate_profiles()


def test_stale_store_is_rejected(tmp_path):
    exp = Experiment(load_config(write_cfg(tmp_path, generator={"generators": ["recent_interaction"]})))
    exp.generate_profiles()
    other = Experiment(load_config(write_cfg(tmp_path, generator={"generators": ["recent_interaction"], "history_window": 5})))
    with pytest.raises(DataError):
        other.load_profiles("recent_interaction")


# -------------------------------------------------------------- evaluation

@pytest.fixture
def generated(cfg_path):
    exp = Experiment(load_config(cfg_path))
    exp.generate_profiles()
    return exp


def test_eval_cells_and_accounting(generated):
    records = generated.evaluate("discrimination")
    # three P settings for each of three generators
    assert len(records) == 9
    for rec in records:
        acc = rec["accounting"]
        assert acc["attempted"] == acc["scored"] + acc["skipped"] + acc["errors"]
        assert acc["attempted"] == 6 * 2
        assert len(rec["per_run"]) == 2
    ranking = generated.evaluate("ranking")
    assert {r["metric"] for r in ranking} == {"ndcg@5", "ndcg@10", "hr@3"}
    rating = generated.evaluate("rating")
    assert {r["metric"] for r in rating} == {"rmse", "jsd"}
    assert {r.get("jsd_mode") for r in rating if r["metric"] == "jsd"} == {"per_group"}
    # the decision log holds one line per attempt and agrees with the accounting
    log = generated.out / "decisions" / "rating" / "apg4recsim.jsonl"
    statuses = [json.loads(line)["status"] for line in log.read_text().splitlines()]
    (acc,) = [r["accounting"] for r in rating if r["labels"]["generator"] == "apg4recsim" and r["metric"] == "rmse"]
    assert len(statuses) == acc["attempted"] and statuses.count("scored") == acc["scored"]


def test_eval_without_profiles_is_a_data_error(cfg_path):
    with pytest.raises(DataError):
        Experiment(load_config(cfg_path)).evaluate("ranking")


def test_position_probe_rows(generated):
    records = generated.probe("position")
    assert len(records) == 10 * 3
    assert {r["labels"]["setting"] for r in records} == {f"pos{p}" for p in range(1, 11)}
    csv_rows = (generated.out / "plots" / "position.csv").read_text().splitlines()
    assert len(csv_rows) == 1 + 30 * 2


def test_history_sweep_cells(tmp_path):
    exp = Experiment(load_config(write_cfg(tmp_path, task={"max_users": 3}, runs=1)))
    records = exp.probe("history-sweep")
    by_gen = {}
    for r in records:
        by_gen.setdefault(r["labels"]["generator"], set()).add(r["labels"]["variant"])
    assert by_gen == {g: {f"h={w}" for w in (5, 10, 15, 20, 25)} for g in ("recent_interaction", "apg4recsim")}
    assert (exp.out / "profiles" / "sweep" / "h5" / "apg4recsim.jsonl").exists()


# ------------------------------------------------------------------ report

def _rec(gen, metric, mean, setting="3:10"):
    return {
        "group": "eval",
        "labels": {"dataset": "d", "task": "discrimination", "generator": gen, "setting": setting,
                   "strategy": "uniform", "mask": "", "variant": ""},
        "metric": metric, "mean": mean, "std": 0.0, "n_runs": 2,
    }


def test_rank_flags_follow_direction():
    assert rank_flags({"a": 0.5, "b": 0.7, "c": 0.6}, "overlap") == {"b": "best", "c": "second"}
    assert rank_flags({"a": 0.5, "b": 0.7, "c": 0.6}, "rmse") == {"a": "best", "c": "second"}


def test_report_table_with_missing_cell():
    records = [_rec("apg4recsim", "overlap", 0.6), _rec("empty", "overlap", 0.4), _rec("apg4recsim", "overlap", 0.5, "1:10")]
    tables = build_tables(records)
    assert list(tables) == [("d", "eval")]
    assert len(tables[("d", "eval")]["rows"]) == 2
    text, _ = render(records)
    assert MISSING in text and "**0.6000" in text


def test_report_is_pure_function_of_reports(generated):
    generated.evaluate("discrimination")
    txt, csv_path = write_report(generated.out)
    first = (txt.read_bytes(), csv_path.read_bytes())
    write_report(generated.out)
    assert (txt.read_bytes(), csv_path.read_bytes()) == first
    assert len(load_reports(generated.out)) == 9


# --------------------------------------------------------------------- cli

def test_cli_exit_codes(tmp_path, monkeypatch):
    cfg = write_cfg(tmp_path, generator={"generators": ["recent_interaction"]})
    assert main(["ingest", "--config", str(tmp_path / "nope.yaml")]) == 1
    assert main(["eval", "ranking", "--config", str(cfg)]) == 2
    assert main(["profiles", "generate", "--config", str(cfg)]) == 0
    assert main(["eval", "ranking", "--config", str(cfg)]) == 0
    assert main(["report", "--config", str(cfg)]) == 0

    broken = write_cfg(tmp_path, generator={"generators": ["agent4rec_style"]})
    monkeypatch.setattr(runner_mod, "build_backend", lambda config, transport=None: ScriptedBackend(responder=_failing))
    assert main(["profiles", "generate", "--config", str(broken)]) == 3


def test_cli_synth(tmp_path, capsys):
    assert main(["synth", str(tmp_path / "syn"), "--users", "5", "--items", "30"]) == 0
    assert (tmp_path / "syn" / "ratings.dat").exists()
