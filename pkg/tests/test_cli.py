from __future__ import annotations

import io
import json
import shutil

import pytest

from semscore.cli import EXIT_COMPUTATION, EXIT_ENDPOINT, EXIT_OK, EXIT_VALIDATION, main
from semscore.pipeline import read_scores
from semscore.report import parse_markdown, parse_text

from .conftest import SYNTHETIC, write_jsonl


def run(*argv):
    buf = io.StringIO()
    code = main(list(argv), out=buf)
    return code, buf.getvalue()


def _io(tmp_path, src=SYNTHETIC):
    return [
        "--records", str(src / "records.jsonl"),
        "--responses", str(src / "responses.jsonl"),
        "--ratings", str(src / "ratings.jsonl"),
        "--out", str(tmp_path / "out"),
    ]


def _tiny(tmp_path):
    d = tmp_path / "tiny"
    d.mkdir()
    write_jsonl(d / "records.jsonl", [{"id": f"r{i}", "group": "g", "instruction": f"q{i}", "target": f"the answer is {i}"} for i in range(3)])
    write_jsonl(
        d / "responses.jsonl",
        [{"model": m, "id": f"r{i}", "response": f"{m} says answer {i}"} for m in ("m1", "m2") for i in range(3)],
    )
    write_jsonl(d / "ratings.jsonl", [])
    return d


def test_validate_ok(tmp_path):
    code, text = run("validate", *_io(tmp_path))
    assert code == EXIT_OK
    assert text.startswith("20 records, 80 responses, 120 ratings")


def test_validate_reports_gap(tmp_path):
    d = _tiny(tmp_path)
    lines = (d / "responses.jsonl").read_text().splitlines()
    (d / "responses.jsonl").write_text("\n".join(lines[:-1]) + "\n")
    code, text = run("validate", *_io(tmp_path, d))
    assert code == EXIT_VALIDATION
    assert "m2\tr2\tmissing_response" in text


def test_score_tiny_two_metrics(tmp_path):
    d = _tiny(tmp_path)
    code, _ = run("score", *_io(tmp_path, d), "--metrics", "rouge_l,bleu")
    assert code == EXIT_OK
    total = 0
    for metric in ("rouge_l", "bleu"):
        meta, scores = read_scores(tmp_path / "out" / "scores", metric)
        assert meta.direction.value == "higher_better"
        total += len(scores)
    assert total == 12


def test_score_rerun_is_byte_identical(tmp_path):
    args = ["score", *_io(tmp_path), "--metrics", "rouge_l,bleu,semscore,bertscore", "--provider", "hash", "--jobs", "4"]
    assert run(*args)[0] == EXIT_OK
    score_dir = tmp_path / "out" / "scores"
    first = {p.name: p.read_bytes() for p in sorted(score_dir.iterdir())}
    code, text = run(*args)
    assert code == EXIT_OK
    assert "semscore: 0 new entries" in text
    assert {p.name: p.read_bytes() for p in sorted(score_dir.iterdir())} == first

    other = tmp_path / "other"
    args2 = ["score", *_io(other), "--metrics", "rouge_l,bleu,semscore,bertscore", "--provider", "hash", "--jobs", "1"]
    assert run(*args2)[0] == EXIT_OK
    assert {p.name: p.read_bytes() for p in sorted((other / "out" / "scores").iterdir())} == first


def test_empty_candidates_flagged(tmp_path):
    run("score", *_io(tmp_path), "--metrics", "semscore", "--provider", "hash")
    meta, scores = read_scores(tmp_path / "out" / "scores", "semscore")
    flagged = meta.flags["empty_candidate"]
    assert flagged
    for model, rid in flagged:
        assert scores[(model, rid)] == -1.0


def test_unknown_metric_fails_before_compute(tmp_path):
    code, _ = run("score", *_io(tmp_path), "--metrics", "rouge_l,bogus", "--provider", "hash")
    assert code == EXIT_VALIDATION
    assert not (tmp_path / "out").exists()


def test_provider_change_needs_force(tmp_path):
    run("score", *_io(tmp_path), "--metrics", "semscore", "--provider", "hash")
    code, _ = run("score", *_io(tmp_path), "--metrics", "semscore", "--provider", "hash:32")
    assert code == EXIT_VALIDATION
    code, _ = run("score", *_io(tmp_path), "--metrics", "semscore", "--provider", "hash:32", "--force")
    assert code == EXIT_OK


def test_http_provider_unreachable_exit_code(tmp_path):
    code, _ = run(
        "score", *_io(tmp_path), "--metrics", "semscore", "--provider", "http", "--embed-endpoint", "http://127.0.0.1:9"
    )
    assert code == EXIT_ENDPOINT


def test_http_provider_needs_endpoint(tmp_path, monkeypatch):
    monkeypatch.delenv("EMBED_ENDPOINT", raising=False)
    code, _ = run("score", *_io(tmp_path), "--metrics", "semscore", "--provider", "http")
    assert code == EXIT_VALIDATION


def test_missing_input_file(tmp_path):
    code, _ = run("score", "--records", str(tmp_path / "none.jsonl"), "--responses", str(tmp_path / "x.jsonl"))
    assert code == EXIT_VALIDATION


def test_config_file_with_overrides(tmp_path):
    cfg = tmp_path / "run.yaml"
    shutil.copytree(SYNTHETIC, tmp_path / "data")
    cfg.write_text(
        "records: data/records.jsonl\nresponses: data/responses.jsonl\nratings: data/ratings.jsonl\n"
        "out: out\nmetrics: [rouge_l]\nprovider: hash\n"
    )
    code, _ = run("score", "--config", str(cfg), "--metrics", "bleu")
    assert code == EXIT_OK
    assert (tmp_path / "out" / "scores" / "bleu.jsonl").exists()
    assert not (tmp_path / "out" / "scores" / "rouge_l.jsonl").exists()


def test_bad_direction_in_import(tmp_path):
    tsv = tmp_path / "x.tsv"
    tsv.write_text("bleurt\tgpt-4\t*\t0.5\n")
    code, _ = run("score", *_io(tmp_path), "--metrics", "rouge_l", "--external", str(tsv), "--direction", "bleurt=upward")
    assert code == EXIT_VALIDATION


def _judge(tmp_path, server, *extra):
    url = f"http://127.0.0.1:{server.server_address[1]}/v1"
    return run("judge", *_io(tmp_path), "--endpoint", url, "--jobs", "4", *extra)


def test_judge_and_full_report(tmp_path, judge_server):
    assert run("score", *_io(tmp_path), "--metrics", "rouge_l,bleu,semscore", "--provider", "hash")[0] == EXIT_OK
    code, text = _judge(tmp_path, judge_server, "--exclude-self")
    assert code == EXIT_OK
    assert "excluding gpt-4" in text
    meta, scores = read_scores(tmp_path / "out" / "scores", "g_eval")
    assert meta.excluded_models == ["gpt-4"]
    assert meta.direction.value == "lower_better"
    assert not any(m == "gpt-4" for m, _ in scores)
    n_requests = len(judge_server.requests)
    assert n_requests == 60

    code, _ = _judge(tmp_path, judge_server, "--exclude-self")
    assert code == EXIT_OK
    assert len(judge_server.requests) == n_requests

    code, text = run("report", *_io(tmp_path), "--format", "md")
    assert code == EXIT_OK
    assert "| g_eval* |" in text
    assert "g_eval* excludes gpt-4 (judge self-evaluation)" in text
    assert (tmp_path / "out" / "report.md").read_text() == text
    assert (tmp_path / "out" / "grade_distribution.tsv").exists()
    headers, rows = parse_markdown(text)
    assert headers[:2] == ["model", "human"]
    assert [r[0] for r in rows] == ["gpt-4", "davinci", "alpaca", "llama"]

    code, plain = run("report", *_io(tmp_path), "--format", "text")
    assert parse_text(plain) == (headers, rows)


def test_judge_endpoint_down_exit_code(tmp_path):
    code, _ = run("judge", *_io(tmp_path), "--endpoint", "http://127.0.0.1:9", "--max-retries", "0")
    assert code == EXIT_ENDPOINT


def test_correlate_needs_human(tmp_path):
    run("score", *_io(tmp_path), "--metrics", "rouge_l")
    code, _ = run("correlate", "--out", str(tmp_path / "out"))
    assert code == EXIT_VALIDATION


def test_correlate_with_external_human_aggregates(tmp_path):
    d = tmp_path / "d"
    d.mkdir()
    models = [f"m{i}" for i in range(12)]
    write_jsonl(d / "records.jsonl", [{"id": "r1", "group": "g", "instruction": "q", "target": "t"}])
    write_jsonl(d / "responses.jsonl", [{"model": m, "id": "r1", "response": "x"} for m in models])
    ext = tmp_path / "external.tsv"
    ext.write_text(
        "metric\tmodel\tid\tscore\n"
        + "".join(f"bartscore\t{m}\t*\t{-3 + i / 10}\n" for i, m in enumerate(models))
        + "".join(f"human\t{m}\t*\t{1 + i / 5}\n" for i, m in enumerate(models))
    )
    io_args = ["--records", str(d / "records.jsonl"), "--responses", str(d / "responses.jsonl"), "--out", str(tmp_path / "out")]
    code, text = run("score", *io_args, "--metrics", "rouge_l", "--external", str(ext))
    assert code == EXIT_OK, text
    code, text = run("correlate", *io_args, "--format", "tsv")
    assert code == EXIT_OK
    rows = dict((ln.split("\t")[0], ln.split("\t")[1:]) for ln in text.splitlines()[1:] if not ln.startswith("#"))
    assert rows["bartscore"] == ["1.000", "1.000"]
    assert rows["rouge_l"] == ["n/a", "n/a"]

    code, text = run("rank", *io_args, "--format", "tsv")
    assert code == EXIT_OK
    assert text.splitlines()[0] == "model\thuman\tbartscore\trouge_l"


def test_kappa(tmp_path):
    code, text = run("kappa", *_io(tmp_path))
    assert code == EXIT_OK
    assert text.startswith("Cohen's kappa (a1 vs a2):")
    assert "over 40 shared annotations" in text


def test_kappa_constant_grades_reported_undefined(tmp_path):
    r = [{"model": "m", "id": f"r{i}", "annotator": a, "grade": "B"} for i in range(3) for a in ("x", "y")]
    path = write_jsonl(tmp_path / "g.jsonl", r)
    code, text = run("kappa", "--ratings", str(path))
    assert code == EXIT_OK
    assert "undefined" in text


def test_module_entry_point():
    import subprocess
    import sys

    res = subprocess.run([sys.executable, "-m", "semscore", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    assert "validate" in res.stdout


def test_meta_json_is_deterministic(tmp_path):
    run("score", *_io(tmp_path), "--metrics", "rouge_l")
    meta = json.loads((tmp_path / "out" / "scores" / "rouge_l.meta.json").read_text())
    assert meta["provider"] == "native"
    assert list(meta) == sorted(meta)
