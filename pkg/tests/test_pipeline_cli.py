import json
from pathlib import Path

import pytest

from labelhunt.cli import EXIT_CONFIG, EXIT_OK, EXIT_STAGE, main
from labelhunt.pipeline import STAGES, PipelineConfig
from labelhunt.scenario import GroundTruth

SMALL = {
    "version": 1,
    "workdir": "work",
    "ruleset": "default",
    "clusters": "default",
    "seed": 2,
    "scenario": {"duration": 2400, "random_injections": {"per_kind": 2}},
    "gme": {"epochs": 4, "expert_epochs": 4, "neg_per_epoch": 4000},
    "ppmtl": {"max_rows": 400, "ga": {"population": 6, "generations": 2},
              "sentences": {"rounds": 2, "epochs": 3}},
}


def write_config(tmp_path, **changes):
    doc = {**SMALL, **changes}
    doc = {k: v for k, v in doc.items() if v is not None}
    path = tmp_path / "config.json"
    path.write_text(json.dumps(doc))
    return path


def statuses(workdir):
    doc = json.loads((workdir / "stage_report.json").read_text())
    return {s["name"]: s for s in doc["stages"]}, doc


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("pipe")
    cfg = write_config(tmp)
    code = main(["run", "--config", str(cfg)])
    return tmp, cfg, code


def test_full_run_produces_alerts_for_clusters(small_run):
    tmp, cfg, code = small_run
    assert code == EXIT_OK
    work = tmp / "work"
    st, _ = statuses(work)
    assert all(st[s]["status"] == "ran" for s in STAGES)
    alerts = json.loads((work / "alerts.json").read_text())["alerts"]
    truth = GroundTruth.load(work / "scenario" / "truth.json")
    assert sorted(a["cluster_id"] for a in alerts) == sorted(c.cluster_id for c in truth.clusters)
    assert len(list((work / "outbox").glob("*.json"))) == len(alerts)


def test_rerun_is_unchanged(small_run):
    tmp, cfg, _ = small_run
    assert main(["run", "--config", str(cfg)]) == EXIT_OK
    st, _ = statuses(tmp / "work")
    assert all(st[s]["status"] == "unchanged" for s in STAGES)


def test_single_stage_command_and_force(small_run):
    tmp, cfg, _ = small_run
    assert main(["hunt", "--config", str(cfg), "--force"]) == EXIT_OK
    st, _ = statuses(tmp / "work")
    assert st["hunt"]["status"] == "ran" and st["label"]["status"] == "disabled"


def test_missing_ruleset_is_config_error(tmp_path, capsys):
    cfg = write_config(tmp_path, ruleset=None)
    assert main(["run", "--config", str(cfg)]) == EXIT_CONFIG
    assert "ruleset" in capsys.readouterr().err


def test_bad_config_values(tmp_path, capsys):
    assert main(["run", "--config", str(tmp_path / "nope.json")]) == EXIT_CONFIG
    cfg = write_config(tmp_path, hunt={"source": "magic"})
    assert main(["run", "--config", str(cfg)]) == EXIT_CONFIG
    assert main(["run", "--config", str(write_config(tmp_path)), "--stages", "gen,fly"]) == EXIT_CONFIG


def test_stage_failure_names_stage_and_skips_downstream(tmp_path, capsys):
    # no injections: the expert stage has no positive examples to learn from
    cfg = write_config(tmp_path, scenario={"duration": 1200})
    assert main(["run", "--config", str(cfg)]) == EXIT_STAGE
    assert "train-expert" in capsys.readouterr().err
    st, doc = statuses(tmp_path / "work")
    assert doc["failed_stage"] == "train-expert" and doc["exit_code"] == 1
    after = STAGES[STAGES.index("train-expert") + 1:]
    assert all(st[s]["status"] == "skipped" for s in after)
    assert all(st[s]["status"] == "ran" for s in ("gen", "ingest", "label"))


def test_bundled_configs_load():
    for name in ("demo", "control"):
        cfg = PipelineConfig.load(name, workdir="x")
        assert cfg.ruleset.exists() and cfg.clusters.exists()


def test_bench_command(tmp_path, capsys):
    out = tmp_path / "bench.json"
    assert main(["bench", "--duration", "1500", "--per-kind", "1", "--out", str(out)]) == EXIT_OK
    doc = json.loads(out.read_text())
    assert doc["rows"] > 0 and doc["rows_per_second"] > 0


def test_shipped_sample_logs(tmp_path):
    cfg = str(Path(__file__).parent.parent / "samples" / "sample_config.json")
    assert main(["run", "--config", cfg, "--workdir", str(tmp_path / "w")]) == EXIT_OK
    st, _ = statuses(tmp_path / "w")
    assert [s for s in STAGES if st[s]["status"] == "ran"] == ["ingest", "label", "hunt", "report"]
