import json
import shutil

import httpx
import pytest

from lmmiqa import cli
from lmmiqa.dataset import load_manifest, write_manifest
from lmmiqa.gateway import Gateway, TokenBucket
from lmmiqa.orchestrator import ConfigError, read_predictions

from conftest import FIXTURES, load_json, make_png_dataset


def run_cli(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture
def data(tmp_path):
    make_png_dataset(tmp_path / "data", n_train=12, n_test=10)
    return tmp_path / "data" / "manifest.csv"


# estimate-noise

def test_estimate_noise_fills_column(tmp_path, capsys):
    make_png_dataset(tmp_path / "d", n_train=2, n_test=1, metadata=False)
    out = tmp_path / "out" / "noised.csv"
    assert run_cli("estimate-noise", tmp_path / "d" / "manifest.csv", out) == 0
    ds = load_manifest(out)
    assert len(ds.records) == 3 and all(r.noise is not None and r.noise > 0 for r in ds.records)
    # paths were rebased so the new manifest still resolves
    assert all(ds.resolve(r).exists() for r in ds.records)
    assert "warning" not in capsys.readouterr().err


def test_estimate_noise_overwrites_with_warning(tmp_path, capsys):
    make_png_dataset(tmp_path / "d", n_train=2, n_test=1)
    src = tmp_path / "d" / "manifest.csv"
    before = {r.id: r.noise for r in load_manifest(src).records}
    assert run_cli("estimate-noise", src, src) == 0
    assert "overwriting 3 existing noise value(s)" in capsys.readouterr().err
    after = {r.id: r.noise for r in load_manifest(src).records}
    assert after.keys() == before.keys() and after != before


def test_estimate_noise_missing_image(tmp_path, capsys):
    ds = make_png_dataset(tmp_path / "d", n_train=2, n_test=1)
    (tmp_path / "d" / ds.records[1].path).unlink()
    assert run_cli("estimate-noise", tmp_path / "d" / "manifest.csv", tmp_path / "o.csv") == 1
    assert ds.records[1].path.split("/")[-1] in capsys.readouterr().err
    assert not (tmp_path / "o.csv").exists()


# tag-regions

def test_tag_regions_mock_deterministic(tmp_path):
    make_png_dataset(tmp_path / "d", n_train=3, n_test=2, metadata=False)
    src = tmp_path / "d" / "manifest.csv"
    outs = []
    for i in range(2):
        out = tmp_path / f"tagged{i}.csv"
        assert run_cli("tag-regions", src, out, "--cache-dir", tmp_path / f"c{i}") == 0
        outs.append([r.region for r in load_manifest(out).records])
    assert outs[0] == outs[1] and all(outs[0])


def scripted_backend(tmp_path, monkeypatch, replies):
    monkeypatch.setenv("LMMIQA_TEST_KEY", "k")
    backend = tmp_path / "backend.json"
    backend.write_text(json.dumps({"base_url": "http://llm.test/v1", "api_key_env": "LMMIQA_TEST_KEY",
                                   "model_name": "scripted", "max_retries": 0, "concurrency": 1}))
    it = iter(replies)

    def handler(request):
        reply = next(it)
        if isinstance(reply, int):
            return httpx.Response(reply)
        return httpx.Response(200, json={"choices": [{"message": {"content": reply}}]})

    def factory(cfg, cache_dir=None, seed=0):
        return Gateway(cfg, cache_dir, seed, client=httpx.Client(transport=httpx.MockTransport(handler)),
                       sleep=lambda s: None, limiter=TokenBucket(60_000, sleep=lambda s: None))

    monkeypatch.setattr(cli, "Gateway", factory)
    return backend


def test_tag_regions_parses_and_counts_unknown(tmp_path, monkeypatch, capsys):
    make_png_dataset(tmp_path / "d", n_train=2, n_test=1, metadata=False)
    backend = scripted_backend(tmp_path, monkeypatch, ["REGION: abdomen", "It looks like a scan.", "region: Kidney"])
    out = tmp_path / "t.csv"
    assert run_cli("tag-regions", tmp_path / "d" / "manifest.csv", out, "--backend", backend, "--cache-dir", tmp_path / "c") == 0
    assert [r.region for r in load_manifest(out).records] == ["abdomen", "unknown", "kidney"]
    assert "1 unparseable -> unknown" in capsys.readouterr().out


def test_tag_regions_too_many_failures(tmp_path, monkeypatch):
    make_png_dataset(tmp_path / "d", n_train=2, n_test=1, metadata=False)
    backend = scripted_backend(tmp_path, monkeypatch, ["REGION: liver", 500, 500])
    assert run_cli("tag-regions", tmp_path / "d" / "manifest.csv", tmp_path / "t.csv", "--backend", backend,
                   "--cache-dir", tmp_path / "c") == 1


def test_tag_regions_auth_is_fatal(tmp_path, monkeypatch):
    make_png_dataset(tmp_path / "d", n_train=2, n_test=1, metadata=False)
    backend = scripted_backend(tmp_path, monkeypatch, [401])
    assert run_cli("tag-regions", tmp_path / "d" / "manifest.csv", tmp_path / "t.csv", "--backend", backend,
                   "--cache-dir", tmp_path / "c") == 1


# run

def test_run_zero_shot(data, tmp_path, capsys):
    rc = run_cli("run", data, "--strategy", "zero_shot", "--out-dir", tmp_path / "runs", "--cache-dir", tmp_path / "c",
                 "--run-id", "zs")
    assert rc == 0
    run_dir = tmp_path / "runs" / "zs"
    assert len(read_predictions(run_dir / "predictions.jsonl")) == 10
    summary = json.loads((run_dir / "summary.json").read_text())
    assert summary["scored"] == 10 and summary["failures"] == 0 and summary["report"]["n"] == 10
    out = capsys.readouterr().out
    assert "10/10 scored" in out and "Overall" in out


def test_run_metadata_without_regions(tmp_path, capsys):
    make_png_dataset(tmp_path / "d", n_train=6, n_test=3, metadata=False)
    cache = tmp_path / "c"
    rc = run_cli("run", tmp_path / "d" / "manifest.csv", "--strategy", "metadata", "--k", 3,
                 "--out-dir", tmp_path / "runs", "--cache-dir", cache)
    assert rc == 2
    assert "region" in capsys.readouterr().err
    assert not cache.exists() or not any(cache.rglob("*.json"))


def test_rerun_hits_cache(data, tmp_path, capsys):
    argv = ["run", data, "--strategy", "few_shot", "--k", 4, "--out-dir", tmp_path / "runs",
            "--cache-dir", tmp_path / "c", "--run-id", "fs"]
    assert run_cli(*argv) == 0
    first = (tmp_path / "runs" / "fs" / "predictions.jsonl").read_bytes()
    capsys.readouterr()
    assert run_cli(*argv) == 0
    assert "cache hits 100%" in capsys.readouterr().out
    assert (tmp_path / "runs" / "fs" / "predictions.jsonl").read_bytes() == first
    assert json.loads((tmp_path / "runs" / "fs" / "summary.json").read_text())["cache_hit_rate"] == 1.0


def test_run_partial_failures_exit_3(data, tmp_path, monkeypatch):
    ok = "SCORE: 2\nEXPLANATION: fine"
    backend = scripted_backend(tmp_path, monkeypatch, [ok] * 4 + [500] + [ok] * 5)
    rc = run_cli("run", data, "--backend", backend, "--strategy", "zero_shot", "--out-dir", tmp_path / "runs",
                 "--cache-dir", tmp_path / "c", "--run-id", "r")
    assert rc == 3
    summary = json.loads((tmp_path / "runs" / "r" / "summary.json").read_text())
    assert summary["failures"] == 1 and len(summary["failed_ids"]) == 1


def test_run_bad_config(data, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"manifest": str(data), "temperature": 0.7}))
    assert run_cli("run", "--config", cfg) == 2
    assert run_cli("run", data, "--strategy", "feedback", "--warmup-count", 0) == 2
    assert run_cli("run", data, "--backend", tmp_path / "nope.json") == 2
    assert run_cli("run") == 2
    cfg.write_text(json.dumps({"manifest": str(data), "k": "ten"}))
    assert run_cli("run", "--config", cfg) == 2
    cfg.write_text("[1, 2]")
    assert run_cli("run", "--config", cfg) == 2


def test_config_nulls_mean_default(data, tmp_path):
    cfg_file = tmp_path / "cfg.json"
    cfg_file.write_text(json.dumps({"manifest": str(data), "interleave_every": None, "k": None, "strategy": "zero_shot"}))
    cfg = cli.build_run_config(cli.make_parser().parse_args(["run", "--config", str(cfg_file)]))
    assert cfg.k == 10 and cfg.strategy == "zero_shot"


def test_config_precedence(data, tmp_path):
    parser = cli.make_parser()
    cfg_file = tmp_path / "cfg.json"
    cfg_file.write_text(json.dumps({"manifest": str(data), "k": 7, "seed": 3, "strategy": "few_shot"}))
    cfg = cli.build_run_config(parser.parse_args(["run", "--config", str(cfg_file), "--k", "5"]))
    assert (cfg.k, cfg.seed, cfg.strategy) == (5, 3, "few_shot")  # flag > file
    assert cfg.warmup_count == 5 and cfg.buffer_cap == 20  # defaults fill the rest
    cfg = cli.build_run_config(parser.parse_args(["run", str(data)]))
    assert (cfg.k, cfg.seed, cfg.strategy) == (10, 0, "few_shot")
    with pytest.raises(ConfigError):
        cli.resolve_backend(str(tmp_path / "absent.json"))


# evaluate

def test_evaluate_perfect_agreement(data, tmp_path, capsys):
    ds = load_manifest(data)
    preds = tmp_path / "p.jsonl"
    preds.write_text("".join(json.dumps({"id": r.id, "y_hat": r.score}) + "\n" for r in ds.test))
    assert run_cli("evaluate", preds, "--manifest", data) == 0
    assert "Overall  3.0000" in capsys.readouterr().out
    assert json.loads((tmp_path / "metrics.json").read_text())["overall"] == 3.0


def test_evaluate_missing_score(data, tmp_path, capsys):
    ds = load_manifest(data)
    blind = ds.test[2]
    from dataclasses import replace

    write_manifest(ds.with_records([replace(r, score=None) if r is blind else r for r in ds.records]), data)
    preds = tmp_path / "p.jsonl"
    preds.write_text("".join(json.dumps({"id": r.id, "y_hat": 2.0}) + "\n" for r in ds.test))
    assert run_cli("evaluate", preds, "--manifest", data) == 2
    assert blind.id in capsys.readouterr().err


def test_evaluate_unknown_id(data, tmp_path, capsys):
    preds = tmp_path / "p.jsonl"
    preds.write_text(json.dumps({"id": "ghost", "y_hat": 1.0}) + "\n")
    assert run_cli("evaluate", preds, "--manifest", data) == 2
    assert "ghost" in capsys.readouterr().err


def test_evaluate_fixture_matches_oracle(tmp_path, capsys):
    # expected values were computed once by the exact-arithmetic oracles and frozen
    shutil.copy(FIXTURES / "eval_predictions.jsonl", tmp_path)
    out = tmp_path / "m.json"
    assert run_cli("evaluate", tmp_path / "eval_predictions.jsonl", "--manifest", FIXTURES / "eval_manifest.csv",
                   "--out", out) == 0
    expected = load_json("eval_expected.json")
    got = json.loads(out.read_text())
    for key in ("plcc", "srocc", "krocc", "overall"):
        assert round(got[key], 4) == round(expected[key], 4)
        assert got[key] == pytest.approx(expected[key], abs=1e-12)
    printed = capsys.readouterr().out
    assert f"Overall  {expected['overall']:.4f}" in printed


# report and ingest-check

def test_report_and_ingest(data, tmp_path, capsys):
    assert run_cli("ingest-check", data) == 0
    assert "train: 12  test: 10" in capsys.readouterr().out
    dirs = []
    for strategy in ("zero_shot", "few_shot"):
        assert run_cli("run", data, "--strategy", strategy, "--k", 4, "--out-dir", tmp_path / "runs",
                       "--cache-dir", tmp_path / "c", "--run-id", strategy) == 0
        dirs.append(tmp_path / "runs" / strategy)
    assert run_cli("report", *dirs, "--manifest", data, "--out", tmp_path / "tables") == 0
    for d in dirs:
        assert (d / "scatter.svg").exists() and (d / "hist.svg").exists()
    lines = (tmp_path / "tables" / "table.csv").read_text().splitlines()
    assert len(lines) == 3


def test_ingest_check_reports_bad_image(tmp_path):
    ds = make_png_dataset(tmp_path / "d", n_train=2, n_test=1)
    (tmp_path / "d" / ds.records[0].path).write_bytes(b"not a png")
    assert run_cli("ingest-check", tmp_path / "d" / "manifest.csv") == 1
