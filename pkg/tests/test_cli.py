"""End-to-end runs of every subcommand on a tiny synthetic log."""

import csv
import io
import json

import pytest

from grank.cli import main

TINY = """\
generator.d = 8
generator.d_top = 8
generator.L = 6
generator.N = 1
generator.behavior_window = 16
ranker.long_len = 16
serving.k1 = 40
serving.k2 = 20
trainer.batch_size = 8
"""


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY)
    data = root / "log.tsv"
    assert main(["gen-data", "--out", str(data), "--n-items", "60", "--n-users", "40", "--n-topics", "4",
                 "--seq-len", "20", "--seed", "3"]) == 0
    assert main(["train", "--data", str(data), "--out", str(root / "run"), "--config", str(cfg),
                 "--max-steps", "3", "--seed", "1", "--set", "trainer.log_interval=1"]) == 0
    return {"root": root, "cfg": cfg, "data": data, "ckpt": root / "run" / "last.grnk"}


def test_train_outputs(run):
    run_dir = run["root"] / "run"
    lines = (run_dir / "metrics.jsonl").read_text().splitlines()
    assert lines and all("total" in json.loads(line) for line in lines)
    assert run["ckpt"].exists()


def test_gen_data_is_deterministic(run, tmp_path):
    again = tmp_path / "log.tsv"
    main(["gen-data", "--out", str(again), "--n-items", "60", "--n-users", "40", "--n-topics", "4",
          "--seq-len", "20", "--seed", "3"])
    assert again.read_bytes() == run["data"].read_bytes()


def test_eval_writes_json_and_csv(run, tmp_path, capsys):
    out = tmp_path / "eval.json"
    assert main(["eval", "--checkpoint", str(run["ckpt"]), "--data", str(run["data"]), "--ks", "5,20",
                 "--out", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert doc["k1"] == 40 and doc["k2"] == 20 and doc["contained"] == doc["users"]
    stages = {(r["stage"], r["k"]) for r in doc["rows"]}
    assert {("final", 5), ("final", 20)} <= stages
    rows = list(csv.DictReader(out.with_suffix(".csv").open()))
    assert len(rows) == len(doc["rows"])
    assert "recall" in capsys.readouterr().out


def test_flags_override_checkpoint_config(run, tmp_path):
    out = tmp_path / "eval.json"
    main(["eval", "--checkpoint", str(run["ckpt"]), "--data", str(run["data"]), "--ks", "5", "--k1", "30",
          "--k2", "10", "--mode", "gen_sa", "--out", str(out)])
    doc = json.loads(out.read_text())
    assert (doc["k1"], doc["k2"], doc["mode"]) == (30, 10, "gen_sa")


def test_build_index_then_eval_with_it(run, tmp_path):
    index = tmp_path / "items.gidx"
    assert main(["build-index", "--checkpoint", str(run["ckpt"]), "--out", str(index), "--quantize"]) == 0
    assert index.read_bytes()[:4] == b"GIDX"
    out = tmp_path / "eval.json"
    assert main(["eval", "--checkpoint", str(run["ckpt"]), "--data", str(run["data"]), "--index", str(index),
                 "--quantized", "--ks", "5", "--out", str(out)]) == 0


def test_bench_report(run, tmp_path):
    out, hist = tmp_path / "bench.json", tmp_path / "h.csv"
    assert main(["bench", "--checkpoint", str(run["ckpt"]), "--data", str(run["data"]), "--requests", "12",
                 "--warmup", "2", "--concurrency", "2", "--out", str(out), "--histogram", str(hist)]) == 0
    doc = json.loads(out.read_text())
    assert doc["requests"] == 12
    assert 0 < doc["p50_ms"] <= doc["p99_ms"]
    assert hist.read_text().strip()


def _sweep(run, tmp_path, axis, values):
    out = tmp_path / f"sweep_{axis}.csv"
    assert main(["sweep", "--checkpoint", str(run["ckpt"]), "--data", str(run["data"]), "--axis", axis,
                 "--values", values, "--ks", "5", "--requests", "3", "--out", str(out)]) == 0
    return json.loads(out.with_suffix(".json").read_text())


def test_k1_sweep_stage1_recall_is_monotone(run, tmp_path):
    rows = _sweep(run, tmp_path, "k1", "10,20,40,60")
    assert [r["value"] for r in rows] == [10, 20, 40, 60]
    recalls = [r[f"stage1_recall@{r['value']}"] for r in rows]
    assert recalls == sorted(recalls)
    assert recalls[-1] == 1.0  # the whole corpus


def test_single_value_sweep_matches_eval(run, tmp_path):
    rows = _sweep(run, tmp_path, "long_len", "16")
    out = tmp_path / "eval.json"
    main(["eval", "--checkpoint", str(run["ckpt"]), "--data", str(run["data"]), "--ks", "5", "--out", str(out)])
    final = {r["k"]: r for r in json.loads(out.read_text())["rows"] if r["stage"] == "final"}
    assert rows[0]["recall@5"] == pytest.approx(final[5]["recall"], abs=1e-12)
    assert rows[0]["ndcg@5"] == pytest.approx(final[5]["ndcg"], abs=1e-12)


def test_d_top_sweep_retrains(run, tmp_path):
    rows = _sweep(run, tmp_path, "d_top", "4")
    assert rows[0]["value"] == 4 and 0.0 <= rows[0]["recall@5"] <= 1.0


def test_retrieve_by_user_and_stdin(run, capsys, monkeypatch):
    assert main(["retrieve", "--checkpoint", str(run["ckpt"]), "--data", str(run["data"]), "--user", "0",
                 "--top", "5"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert len(doc["ids"]) == 5 and doc["scores"] == sorted(doc["scores"], reverse=True)
    monkeypatch.setattr("sys.stdin", io.StringIO("3\t10\t1.0\t1\n7\t20\t2.0\t0\n"))
    assert main(["retrieve", "--checkpoint", str(run["ckpt"]), "--stdin", "--top", "3"]) == 0
    assert len(json.loads(capsys.readouterr().out)["ids"]) == 3


def test_verify_quick_exit_code(capsys):
    assert main(["verify", "--quick"]) == 0
    out = capsys.readouterr().out
    assert "[FAIL]" not in out and "checks passed" in out


def test_errors_exit_with_code_2(run, tmp_path, capsys):
    assert main(["eval", "--checkpoint", str(tmp_path / "missing.grnk"), "--data", str(run["data"])]) == 2
    assert main(["eval", "--checkpoint", str(run["ckpt"]), "--data", str(run["data"]), "--k1", "500"]) == 2
    bad = tmp_path / "bad.cfg"
    bad.write_text("serving.k1 500\n")
    assert main(["gen-data", "--out", str(tmp_path / "x.tsv"), "--config", str(bad)]) == 2
    assert "error:" in capsys.readouterr().err


def test_unknown_mode_is_rejected_by_argparse():
    with pytest.raises(SystemExit):
        main(["eval", "--checkpoint", "x", "--data", "y", "--mode", "fast"])
