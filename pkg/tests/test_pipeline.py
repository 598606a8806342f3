import io
import json

import pytest

from topicflow import pipeline
from topicflow.cli import ChatSession, chat_loop, main

TINY = {
    "seed": 1,
    "corpus": {"synthetic": {"k_topics": 3, "conversations": 40, "seed": 1}, "test_fraction": 0.2,
               "max_eval_examples": 20},
    "encoder": {"n": 8},
    "contrastive": {"epochs": 1, "batch_size": 64},
    "clustering": {"k": 3, "n_init": 2},
    "policy": {"hidden": 16, "epochs": 3},
    "generation": {"epochs": 1, "n_layers": 1, "max_response_len": 8, "max_context_tokens": 32},
}


@pytest.fixture(scope="module")
def tiny_config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.json"
    path.write_text(json.dumps(TINY))
    return path


@pytest.fixture(scope="module")
def finished_run(tmp_path_factory, tiny_config):
    run_dir = tmp_path_factory.mktemp("run") / "r"
    assert main(["run", "--config", str(tiny_config), "--run-dir", str(run_dir)]) == 0
    return run_dir


def test_defaults_are_documented_values():
    cfg = pipeline.load_config()
    assert cfg["contrastive"]["tau"] == 0.05
    assert cfg["contrastive"]["lambda1"] == 0.2
    assert cfg["contrastive"]["epochs"] == 20
    assert cfg["generation"]["lambda2"] == 1.2
    assert cfg["clustering"]["k"] == 60


def test_unknown_key_reports_path(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"generation": {"lamda2": 1.0}}))
    with pytest.raises(pipeline.ConfigError, match="generation.lamda2"):
        pipeline.load_config(p)


def test_type_errors_report_path(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"clustering": {"k": "sixty"}}))
    with pytest.raises(pipeline.ConfigError, match="clustering.k"):
        pipeline.load_config(p)
    p.write_text(json.dumps({"contrastive": {"tau": -1}}))
    with pytest.raises(pipeline.ConfigError):
        pipeline.load_config(p)


def test_overrides_merge():
    cfg = pipeline.load_config(None, {"seed": 9, "eval.phis": [0.9]})
    assert cfg["seed"] == 9 and cfg["eval"]["phis"] == [0.9]


def test_stage_seeds_differ_and_repeat():
    seeds = {pipeline.stage_seed(0, s) for s in pipeline.STAGES}
    assert len(seeds) == len(pipeline.STAGES)
    assert pipeline.stage_seed(3, "cluster") == pipeline.stage_seed(3, "cluster")
    assert pipeline.stage_seed(3, "cluster") != pipeline.stage_seed(4, "cluster")


def test_missing_prerequisite_names_stage(tmp_path, tiny_config, capsys):
    with pytest.raises(pipeline.MissingPrerequisite) as err:
        pipeline.run_pipeline(pipeline.load_config(tiny_config), tmp_path / "r", "cluster")
    assert err.value.stage == "embed"
    assert main(["run", "--config", str(tiny_config), "--run-dir", str(tmp_path / "r"), "--stage", "cluster"]) == 3
    assert "'embed'" in capsys.readouterr().err


def test_cli_config_error_exit_code(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{")
    assert main(["run", "--config", str(p), "--run-dir", str(tmp_path / "r")]) == 2
    assert main(["run", "--config", str(tmp_path / "missing.json")]) == 2
    assert main(["run", "--phi", "x,y", "--run-dir", str(tmp_path / "r")]) == 2


def test_lock_blocks_second_writer(tmp_path, tiny_config):
    run_dir = tmp_path / "r"
    run_dir.mkdir()
    (run_dir / ".lock").write_text("123")
    with pytest.raises(pipeline.RunLocked):
        pipeline.run_pipeline(pipeline.load_config(tiny_config), run_dir, "ingest")
    assert main(["run", "--config", str(tiny_config), "--run-dir", str(run_dir), "--stage", "ingest"]) == 1


def test_default_run_dir_uses_env(tmp_path, tiny_config, monkeypatch):
    from topicflow.cli import resolve_run_dir
    monkeypatch.setenv("TOPICFLOW_RUN_ROOT", str(tmp_path))
    cfg = pipeline.load_config(tiny_config)
    assert resolve_run_dir(cfg, None).parent == tmp_path


def test_all_writes_nine_entries_in_order(finished_run):
    entries = [json.loads(line) for line in (finished_run / "manifest.jsonl").read_text().splitlines()]
    assert [e["stage"] for e in entries] == list(pipeline.ALL_STAGES)
    assert len(entries) == 9
    for e in entries:
        assert {"stage", "config_hash", "input_hashes", "seed", "wall_time"} <= set(e)
    enc = next(e for e in entries if e["stage"] == "train-encoder")
    assert enc["info"]["contrastive"]["tau"] == 0.05 and enc["info"]["contrastive"]["lambda1"] == 0.2
    gen = next(e for e in entries if e["stage"] == "train-generator")
    assert gen["info"]["generation"]["lambda2"] == 1.2
    for sub in ("corpus", "encoder", "embeddings", "clusters", "policy", "graph", "generator", "generations",
                "reports"):
        assert (finished_run / sub).is_dir()
    effective = json.loads((finished_run / "config.json").read_text())
    assert effective["contrastive"]["tau"] == 0.05 and effective["encoder"]["n"] == 8


def test_generation_rows_schema(finished_run):
    row = json.loads((finished_run / "generations" / "generations.jsonl").read_text().splitlines()[0])
    assert set(row) == {"conv_id", "turn_index", "context", "reference", "hypothesis", "decode_config",
                        "predicted_cluster", "reference_cluster"}


def test_report_identities(finished_run):
    rep = json.loads((finished_run / "reports" / "report.json").read_text())
    assert rep["stha"]["1.00"] == rep["htha"]
    vals = [rep["stha"][k] for k in sorted(rep["stha"], reverse=True)]
    assert all(a <= b for a, b in zip(vals, vals[1:]))


def test_rerun_stage_is_identical(finished_run, tiny_config):
    before = pipeline.artifact_hashes(finished_run)
    pipeline.run_pipeline(pipeline.load_config(tiny_config), finished_run, "cluster")
    assert pipeline.artifact_hashes(finished_run) == before


def test_export_graph(finished_run, tiny_config):
    assert main(["run", "--config", str(tiny_config), "--run-dir", str(finished_run), "--stage", "export-graph"]) == 0
    dot = (finished_run / "graph" / "graph.dot").read_text()
    assert dot.startswith("digraph topics") and dot.count("->") == 3 * 3


def _chat(run_dir, script):
    session = ChatSession(run_dir, {}, seed=0)
    out = io.StringIO()
    path = chat_loop(session, io.StringIO(script), out)
    return session, out.getvalue(), path.read_text()


def test_chat_empty_line_reprompts(finished_run, monkeypatch):
    calls = []
    orig = ChatSession.turn
    monkeypatch.setattr(ChatSession, "turn", lambda self, text: calls.append(text) or orig(self, text))
    session, out, _ = _chat(finished_run, "\n\n   \n")
    assert calls == [] and out.count("you> ") == 4


def test_chat_topics_command(finished_run):
    _, out, _ = _chat(finished_run, "/topics\n/quit\n")
    for j in range(3):
        assert f"topic {j:>3}" in out


def test_chat_turn_reports_topic_and_alternatives(finished_run):
    session, out, transcript = _chat(finished_run, "hello there\nand you ?\n")
    recs = [json.loads(line) for line in transcript.splitlines()]
    assert len(recs) == 2
    assert len(recs[0]["alternatives"]) == 3 and recs[0]["alternatives"][0]["topic"] == recs[0]["topic"]
    assert "next topic" in out and "top-3" in out


def test_chat_replay_identical(finished_run):
    script = "hello there\nwhat now\n/topics\nok bye\n"
    a = _chat(finished_run, script)[2]
    b = _chat(finished_run, script)[2]
    assert a == b


def test_chat_missing_artifacts(tmp_path):
    assert main(["chat", "--run-dir", str(tmp_path)]) == 3
