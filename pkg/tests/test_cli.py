import json

import pytest
from click.testing import CliRunner

from eventmem.cli import main
from eventmem.store import Workspace

import builders as b


@pytest.fixture()
def fx(tmp_path):
    return b.write_multihop_fixture(tmp_path / "fixture")


def run(*args):
    result = CliRunner().invoke(main, [str(a) for a in args])
    return result


def index_cmd(fx, ws, *extra):
    return run("index", fx / "conversation.json", "-o", ws, "--mock", fx, "--config", fx / "config.yaml", *extra)


def test_index_summary(fx, tmp_path):
    res = index_cmd(fx, tmp_path / "ws")
    assert res.exit_code == 0, res.output
    assert res.output.strip() == "multihop: sessions=5 edus=5 args=14 sess-edu=5 edu-arg=18 syn=0 warnings=0"
    stats = Workspace(tmp_path / "ws").load("multihop").stats()
    assert (stats["sessions"], stats["edus"], stats["args"], stats["sess-edu"], stats["edu-arg"]) == (5, 5, 14, 5, 18)


def test_index_missing_input(fx, tmp_path):
    res = run("index", tmp_path / "nope.json", "-o", tmp_path / "ws", "--mock", fx)
    assert res.exit_code == 2 and "nope.json" in res.output


def test_index_malformed_input(fx, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{"sessions": [{"session_id": "s", "turns": []}]}')
    res = run("index", bad, "-o", tmp_path / "ws", "--mock", fx)
    assert res.exit_code == 2 and "no turns" in res.output


def test_index_provider_failure(fx, tmp_path):
    (fx / "chat.json").write_text(json.dumps({"edu": {"*": {"error": "transport"}}}))
    res = index_cmd(fx, tmp_path / "ws")
    assert res.exit_code == 3 and "provider failure" in res.output


def test_resume_makes_no_calls(fx, tmp_path):
    assert index_cmd(fx, tmp_path / "ws").exit_code == 0
    # any provider call would now miss the script and exit 3
    (fx / "chat.json").write_text("{}")
    res = index_cmd(fx, tmp_path / "ws", "--resume")
    assert res.exit_code == 0 and "already indexed, skipped" in res.output


def test_query_graph_lite_trace(fx, tmp_path):
    ws = tmp_path / "ws"
    index_cmd(fx, ws)
    graph = run("query", ws, b.Q_MULTIHOP, "--variant", "graph", "--mock", fx)
    assert graph.exit_code == 0 and graph.output.strip() == b.MULTIHOP_ANSWER
    lite = run("query", ws, b.Q_MULTIHOP, "--variant", "lite", "--mock", fx)
    assert lite.exit_code == 0 and lite.output.strip() == "I don't know."
    traced = run("query", ws / "multihop", b.Q_MULTIHOP, "--trace", "--mock", fx)
    first, rest = traced.output.split("\n", 1)
    assert first == b.MULTIHOP_ANSWER
    doc = json.loads(rest)
    assert doc["trace"]["seeds"] and doc["trace"]["ppr"]["top"] and doc["trace"]["ppr"]["iterations"] >= 1
    assert doc["variant"] == "graph" and doc["answer"] == b.MULTIHOP_ANSWER


def test_query_load_failure(fx, tmp_path):
    res = run("query", tmp_path / "empty", "q?", "--mock", fx)
    assert res.exit_code == 2


def test_query_dimension_mismatch(fx, tmp_path):
    ws = tmp_path / "ws"
    index_cmd(fx, ws)
    emb = json.loads((fx / "embeddings.json").read_text())
    (fx / "embeddings.json").write_text(json.dumps({**emb, "dim": 8}))
    res = run("query", ws, b.Q_MULTIHOP, "--mock", fx)
    assert res.exit_code == 2 and "dimension" in res.output


def test_query_provider_failure(fx, tmp_path):
    ws = tmp_path / "ws"
    index_cmd(fx, ws)
    script = json.loads((fx / "chat.json").read_text())
    script["qa"] = {"*": {"error": "transport"}}
    (fx / "chat.json").write_text(json.dumps(script))
    assert run("query", ws, b.Q_MULTIHOP, "--mock", fx).exit_code == 3


def test_eval(fx, tmp_path):
    ws = tmp_path / "ws"
    index_cmd(fx, ws)
    res = run("eval", ws, fx / "qa.json", "--mock", fx, "--judge-runs", "1")
    assert res.exit_code == 0, res.output
    assert "Overall" in res.output and "Multi-Hop" in res.output and "Single-Hop" in res.output
    report = json.loads((ws / "eval_graph.json").read_text())
    assert report["overall"]["llm_score"] == 1.0 and report["overall"]["n"] == 3
    assert all(r["llm_std"] == 0.0 for r in report["rows"])
    lite = run("eval", ws, fx / "qa.json", "--mock", fx, "--variant", "lite", "--out", tmp_path / "lite.json")
    assert lite.exit_code == 0
    assert json.loads((tmp_path / "lite.json").read_text())["overall"]["llm_score"] == pytest.approx(2 / 3)


def test_eval_unknown_category_and_errors(fx, tmp_path):
    ws = tmp_path / "ws"
    index_cmd(fx, ws)
    qa = [{**b.multihop_qa()[1], "category": "Pets & Animals"}]
    (tmp_path / "qa.json").write_text(json.dumps(qa))
    res = run("eval", ws, tmp_path / "qa.json", "--mock", fx)
    assert res.exit_code == 0 and "Pets & Animals" in res.output
    (tmp_path / "bad.json").write_text("{ nope")
    assert run("eval", ws, tmp_path / "bad.json", "--mock", fx).exit_code == 2
    (tmp_path / "other.json").write_text(json.dumps([{**b.multihop_qa()[1], "conversation_id": "ghost"}]))
    res = run("eval", ws, tmp_path / "other.json", "--mock", fx)
    assert res.exit_code == 2 and "ghost" in res.output


def test_stats(fx, tmp_path):
    ws = tmp_path / "ws"
    index_cmd(fx, ws)
    chat, emb = b.chunky_providers()
    (tmp_path / "fx2").mkdir()
    b.write_mock_dir(tmp_path / "fx2", b.chunky_script(), {b.Q_CHUNK: "trip", b.CHUNK_SUMMARY: "trip"}, seed=3)
    (tmp_path / "fx2" / "conv.json").write_text(json.dumps(b.chunky_conversation().to_dict()))
    res = run("index", tmp_path / "fx2" / "conv.json", "-o", ws, "--mock", tmp_path / "fx2", "--mode",
              "assistant-chunking")
    assert res.exit_code == 0, res.output

    res = run("stats", ws, "--json")
    assert res.exit_code == 0
    doc = json.loads(res.output)
    workspace = Workspace(ws)
    one, two = (workspace.load(c).stats() for c in ("chunky", "multihop"))
    assert doc["conversations"]["multihop"] == json.loads(json.dumps(two))
    for key in ("sessions", "edus", "args", "edges", "avg_edu_degree", "chunks", "avg_chunk_summary_words"):
        assert doc["average"][key] == pytest.approx((one[key] + two[key]) / 2)
    table = run("stats", ws)
    assert table.exit_code == 0 and "Avg EDU Node Degree" in table.output and "Average" in table.output


def test_stats_empty_workspace(tmp_path):
    assert run("stats", tmp_path).exit_code == 2


def test_deterministic_runs(fx, tmp_path):
    outputs = []
    for name in ("w1", "w2"):
        ws = tmp_path / name
        idx = index_cmd(fx, ws, "--deterministic")
        q = run("query", ws, b.Q_MULTIHOP, "--trace", "--mock", fx, "--deterministic")
        files = {p.relative_to(ws).as_posix(): p.read_bytes() for p in sorted(ws.rglob("*")) if p.is_file()}
        outputs.append((idx.output, q.output, files))
    assert outputs[0] == outputs[1]
