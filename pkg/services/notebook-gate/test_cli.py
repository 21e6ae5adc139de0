import getpass
import json
import os
import re

import polars as pl
import pytest

from notebook_gate.bench import MEDIAN_ROW, read_results_csv
from notebook_gate.cli import main
from notebook_gate.config import CONFIG_ENV_VAR
from notebook_gate.security import PasswordRecord, verify_password


@pytest.fixture
def config_file(tmp_path, fixtures_dir):
    path = tmp_path / "gateway.json"
    path.write_text(json.dumps({
        "listen_address": "127.0.0.1:9000",
        "upstream": "http://127.0.0.1:8888",
        "notebook_path": str(fixtures_dir / "one_cell.ipynb"),
    }))
    return path


@pytest.fixture(autouse=True)
def no_config_env(monkeypatch):
    monkeypatch.delenv(CONFIG_ENV_VAR, raising=False)


# --- check-config ---

def test_check_config_ok(config_file, capsys):
    assert main(["check-config", str(config_file)]) == 0
    assert capsys.readouterr().out == ""


def test_check_config_from_env(config_file, monkeypatch):
    monkeypatch.setenv(CONFIG_ENV_VAR, str(config_file))
    assert main(["check-config"]) == 0


def test_check_config_invalid(tmp_path, capsys):
    path = tmp_path / "gateway.json"
    path.write_text(json.dumps({"listen_address": "127.0.0.1:9000", "whitlist": []}))
    assert main(["check-config", str(path)]) == 2
    assert "[ERROR]" in capsys.readouterr().err


def test_check_config_rejects_unencodable_header(config_file, capsys):
    data = json.loads(config_file.read_text())
    config_file.write_text(json.dumps({**data, "headers": {"X-Note": "caf\u20ac"}}))
    assert main(["check-config", str(config_file)]) == 2
    assert "headers" in capsys.readouterr().err


def test_check_config_not_utf8(tmp_path, capsys):
    path = tmp_path / "gateway.json"
    path.write_bytes(b"\xff\xfe{}")
    assert main(["check-config", str(path)]) == 2
    assert "not UTF-8" in capsys.readouterr().err


def test_check_config_missing(tmp_path):
    assert main(["check-config", str(tmp_path / "nope.json")]) == 2


def test_check_config_without_any_path():
    assert main(["check-config"]) == 2


# --- hash-password ---

def test_hash_password(monkeypatch, capsys):
    monkeypatch.setattr(getpass, "getpass", lambda prompt="": "test")
    assert main(["hash-password"]) == 0
    line = capsys.readouterr().out.strip()
    assert re.fullmatch(r"sha256:[0-9a-f]{12}:[0-9a-f]{64}", line)
    assert verify_password(PasswordRecord.parse(line), "test")


def test_hash_password_sha1(monkeypatch, capsys):
    monkeypatch.setattr(getpass, "getpass", lambda prompt="": "test")
    assert main(["hash-password", "--algorithm", "sha1"]) == 0
    assert re.fullmatch(r"sha1:[0-9a-f]{12}:[0-9a-f]{40}", capsys.readouterr().out.strip())


def test_hash_password_mismatch(monkeypatch, capsys):
    answers = iter(["first", "second"])
    monkeypatch.setattr(getpass, "getpass", lambda prompt="": next(answers))
    assert main(["hash-password"]) == 2
    assert capsys.readouterr().out == ""


# --- Usage errors ---

@pytest.mark.parametrize("argv", [
    [],
    ["no-such-command"],
    ["hash-password", "--algorithm", "md5"],
    ["bench", "--target", "http://127.0.0.1:1/", "--connections", "0", "--requests", "5"],
    ["bench", "--target", "http://127.0.0.1:1/", "--connections", "1", "--requests", "5", "--duration", "1"],
    ["bench", "--target", "http://127.0.0.1:1/", "--connections", "1", "--requests", "0"],
    ["bench", "--target", "http://127.0.0.1:1/", "--connections", "1", "--requests", "5", "--pid", "12"],
])
def test_usage_errors_exit_1(argv):
    with pytest.raises(SystemExit) as exc:
        main(argv)
    assert exc.value.code == 1


# --- bench / report ---

def test_bench_writes_one_median_row_per_level(mock_upstream, tmp_path):
    out = tmp_path / "bench.csv"
    code = main([
        "bench",
        "--target", f"{mock_upstream.url}/api/kernels",
        "--connections", "1,2",
        "--requests", "10",
        "--warmup", "0",
        "--repetitions", "1",
        "--output", str(out),
    ])
    assert code == 0
    df = read_results_csv(out)
    assert df.height == 4
    assert df.filter(pl.col("repetition") == MEDIAN_ROW)["connections"].to_list() == [1, 2]


def test_bench_with_resource_samples(mock_upstream, tmp_path):
    out = tmp_path / "bench.csv"
    samples = tmp_path / "samples.csv"
    code = main([
        "bench",
        "--target", f"{mock_upstream.url}/api/kernels",
        "--connections", "2",
        "--duration", "0.3",
        "--warmup", "0",
        "--repetitions", "1",
        "--pid", f"self={os.getpid()}",
        "--interval", "0.02",
        "--output", str(out),
        "--samples-output", str(samples),
    ])
    assert code == 0
    df = pl.read_csv(samples)
    assert df.columns == ["label", "t", "cpu_percent", "rss_bytes"]
    assert set(df["label"].to_list()) == {"self"}


def test_bench_unreachable_target(free_port, tmp_path):
    code = main([
        "bench", "--target", f"http://127.0.0.1:{free_port}/", "--connections", "1",
        "--requests", "1", "--warmup", "0", "--repetitions", "1", "--output", str(tmp_path / "b.csv"),
    ])
    assert code == 2
    assert not (tmp_path / "b.csv").exists()


def test_report(tmp_path, capsys, make_results):
    a = tmp_path / "direct.csv"
    b = tmp_path / "gated.csv"
    make_results([50, 100]).write_csv(a)
    make_results([50, 100], p50=25.0).write_csv(b)
    out = tmp_path / "comparison.csv"

    assert main(["report", str(a), str(b), "--label-a", "direct", "--label-b", "gated", "--output", str(out)]) == 0
    assert "gated vs direct" in capsys.readouterr().out
    assert pl.read_csv(out)["latency_ratio"].to_list() == [2.5, 2.5]


def test_report_mismatched_levels(tmp_path, capsys, make_results):
    a = tmp_path / "a.csv"
    b = tmp_path / "b.csv"
    make_results([50, 100]).write_csv(a)
    make_results([50]).write_csv(b)
    assert main(["report", str(a), str(b)]) == 2
    assert "different connection levels" in capsys.readouterr().err
