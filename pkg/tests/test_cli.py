import json
import subprocess
import sys
from pathlib import Path

import pytest

PY = [sys.executable, "-m", "topiclora"]


def run(*args, expect=0):
    proc = subprocess.run(
        PY + [str(a) for a in args], capture_output=True, text=True, timeout=300
    )
    assert proc.returncode == expect, f"{args}\nstdout:{proc.stdout}\nstderr:{proc.stderr}"
    return proc


@pytest.fixture(scope="module")
def pipeline_dir(tmp_path_factory):
    """Run the full CLI chain once at tiny scale; tests inspect the artifacts."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    run("make-synthetic", "--out-dir", data, "--topics", 2, "--docs-per-topic", 24,
        "--val-docs-per-topic", 6, "--vocab-per-topic", 30, "--words-per-doc", 40,
        "--mc-items-per-topic", 3, "--seed", 0)
    outs = {
        "root": root,
        "data": data,
        "corpus": root / "corpus.jsonl",
        "topics": root / "topics.tpc",
        "experts": root / "experts",
        "decisions": root / "decisions.jsonl",
        "eval": root / "eval.json",
        "serving": root / "serving.json",
    }
    outs["ingest"] = run("ingest", "--input", data / "train.jsonl", "--out", outs["corpus"])
    outs["cluster"] = run(
        "cluster", "--corpus", outs["corpus"], "--out", outs["topics"],
        "--k", 2, "--seed", 0, "--min-docs", 1,
    )
    outs["train"] = run(
        "train", "--corpus", outs["corpus"], "--topic-model", outs["topics"],
        "--assignments", Path(str(outs["topics"]) + ".assignments.jsonl"),
        "--out-dir", outs["experts"], "--pretrain-steps", 40, "--rank", 2, "--seed", 0,
    )
    outs["route"] = run(
        "route", "--topic-model", outs["topics"], "--mode", "fallback",
        "--queries", data / "val.jsonl", "--out", outs["decisions"], "--inspect", 3,
    )
    outs["evalproc"] = run(
        "eval", "--base", outs["experts"] / "base.model", "--adapters", outs["experts"],
        "--topic-model", outs["topics"], "--val", data / "val.jsonl",
        "--mc", data / "mc.jsonl", "--shards", outs["experts"] / "shards",
        "--out", outs["eval"],
    )
    outs["servesim"] = run(
        "serve-sim", "--nodes", 2, "--cache", 1, "--policy", "balanced",
        "--trace", outs["decisions"], "--out", outs["serving"],
    )
    outs["report"] = run(
        "report", "--eval", outs["eval"], "--serving", outs["serving"],
        "--topic-model", outs["topics"], "--out-dir", root,
    )
    return outs


def test_make_synthetic_writes_dataset(pipeline_dir):
    data = pipeline_dir["data"]
    assert (data / "train.jsonl").exists()
    assert (data / "val.jsonl").exists()
    assert (data / "mc.jsonl").exists()
    assert len((data / "train.jsonl").read_text().splitlines()) == 48


def test_ingest_reports_stats(pipeline_dir):
    out = pipeline_dir["ingest"].stdout
    assert "48" in out and "token" in out
    assert pipeline_dir["corpus"].exists()


def test_cluster_reports_retention_and_keywords(pipeline_dir):
    out = pipeline_dir["cluster"].stdout
    assert "retained 2 of 2 clusters" in out
    assert "topic 0:" in out
    assert pipeline_dir["topics"].exists()
    sidecar = Path(str(pipeline_dir["topics"]) + ".embedder.json")
    assert sidecar.exists()
    assignments = Path(str(pipeline_dir["topics"]) + ".assignments.jsonl")
    assert len(assignments.read_text().splitlines()) == 48


def test_train_writes_registry(pipeline_dir):
    experts = pipeline_dir["experts"]
    assert (experts / "base.model").exists()
    assert (experts / "manifest.jsonl").exists()
    assert (experts / "topic_00000.lora").exists()
    assert (experts / "topic_00001.lora").exists()
    statuses = [
        json.loads(line)["status"]
        for line in (experts / "manifest.jsonl").read_text().splitlines()
    ]
    assert statuses == ["ok", "ok"]
    assert "(0 failed)" in pipeline_dir["train"].stdout


def test_route_emits_decisions_and_inspection(pipeline_dir):
    lines = pipeline_dir["decisions"].read_text().splitlines()
    assert len(lines) == 12
    first = json.loads(lines[0])
    assert set(first) == {"query_id", "topic_id", "similarity", "fallback", "mode"}
    assert first["mode"] == "fallback"
    # --inspect 3 prints three annotated lines
    inspected = [l for l in pipeline_dir["route"].stdout.splitlines() if l.startswith("[")]
    assert len(inspected) == 3


def test_eval_bundle_has_variants(pipeline_dir):
    bundle = json.loads(pipeline_dir["eval"].read_text())
    assert set(bundle["perplexity"]) == {"base", "fallback", "always"}
    assert set(bundle["mc"]) == {"base", "fallback", "always"}
    assert "per_expert_perplexity" in bundle
    for stats in bundle["perplexity"].values():
        assert stats["perplexity"] > 1.0


def test_serve_sim_output(pipeline_dir):
    metrics = json.loads(pipeline_dir["serving"].read_text())
    assert metrics["num_nodes"] == 2
    assert metrics["total_queries"] == 12
    assert "hit rate" in pipeline_dir["servesim"].stdout


def test_report_bundle(pipeline_dir):
    root = pipeline_dir["root"]
    report = json.loads((root / "report.json").read_text())
    assert "perplexity" in report and "mc" in report
    assert "docs_per_topic" in report and "keywords" in report
    text = (root / "report.txt").read_text()
    assert "== corpus perplexity ==" in text
    assert "documents per topic" in text
    assert "== serving ==" in text


def test_cli_no_args_shows_usage():
    proc = subprocess.run(PY, capture_output=True, text=True)
    assert proc.returncode != 0
    assert "usage" in (proc.stderr + proc.stdout).lower()


def test_route_without_sidecar_fails_cleanly(tmp_path):
    queries = tmp_path / "q.jsonl"
    queries.write_text('{"id": 0, "text": "hello"}\n')
    missing = tmp_path / "nope.tpc"
    proc = subprocess.run(
        PY + ["route", "--topic-model", str(missing), "--mode", "always",
              "--queries", str(queries), "--out", str(tmp_path / "d.jsonl")],
        capture_output=True, text=True,
    )
    assert proc.returncode != 0


def test_console_script_installed():
    proc = subprocess.run(["topiclora", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert "cluster" in proc.stdout and "serve-sim" in proc.stdout
