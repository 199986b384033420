import csv
import json
import subprocess
import sys

import pytest

from ldpmarket.cli import main


@pytest.fixture
def session_file(tmp_path):
    path = tmp_path / "session.json"
    assert main(["run-session", "--providers", "5", "--nr", "5", "--seed", "3", "--output", str(path)]) == 0
    return path


def test_run_session_happy_path(tmp_path):
    out = tmp_path / "t.json"
    assert main(["run-session", "--providers", "10", "--nr", "5", "--f", "0.5", "--seed", "1", "--output", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert doc["contract"]["phase"] == "Settled"
    assert sum(doc["filter"]) == 5
    assert len(doc["submissions"]) == 10
    assert doc["status"] == "settled"


def test_run_session_threshold_exit(tmp_path):
    assert main(["run-session", "--providers", "3", "--nr", "5", "--seed", "1", "--output", str(tmp_path / "t.json")]) == 2


def test_run_session_predicate_threshold(tmp_path):
    args = ["run-session", "--providers", "10", "--nr", "5", "--seed", "1", "--regions", "A,B,B",
            "--predicate", "region=A", "--output", str(tmp_path / "t.json")]
    assert main(args) == 2


def test_run_session_wrong_reveal_exit(tmp_path):
    out = tmp_path / "t.json"
    assert main(["run-session", "--seed", "1", "--inject-wrong-reveal", "--output", str(out)]) == 3
    doc = json.loads(out.read_text())
    assert doc["contract"]["deposit_balance"] == doc["terms"]["price"]
    assert doc["s2"] is None and doc["dispute"] == "reveal-mismatch"


def test_run_session_tamper_exit(tmp_path):
    out = tmp_path / "t.json"
    assert main(["run-session", "--seed", "1", "--inject-tamper", "--output", str(out)]) == 3
    assert json.loads(out.read_text())["dispute"].startswith("integrity:")


def test_accuracy_defaults_csv(tmp_path):
    out = tmp_path / "acc.csv"
    assert main(["accuracy", "--seed", "2", "--output", str(out)]) == 0
    rows = list(csv.DictReader(out.open()))
    assert len(rows) == 80
    assert {int(r["N"]) for r in rows} == {500, 1000, 5000, 10000}


def test_accuracy_no_noise_zero_z(tmp_path):
    out = tmp_path / "acc.csv"
    assert main(["accuracy", "--seed", "2", "--f", "1.0", "--output", str(out)]) == 0
    assert all(float(r["z"]) == 0.0 for r in csv.DictReader(out.open()))


def test_accuracy_deterministic(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    main(["accuracy", "--seed", "4", "--output", str(a)])
    main(["accuracy", "--seed", "4", "--output", str(b)])
    assert a.read_bytes() == b.read_bytes()


def test_accuracy_json(tmp_path):
    out = tmp_path / "acc.json"
    assert main(["accuracy", "--seed", "2", "--counts", "100,200", "--format", "json", "--output", str(out)]) == 0
    assert [r["providers"] for r in json.loads(out.read_text())["rows"]] == [100, 200]


def test_advantage_limits(tmp_path):
    out = tmp_path / "adv.csv"
    assert main(["advantage", "--n-values", "2..100", "--f-values", "0.5,0.2", "--output", str(out)]) == 0
    rows = list(csv.DictReader(out.open()))
    last = {r["f"]: float(r["advantage"]) for r in rows if r["n"] == "100"}
    # n = 100 is not yet within 0.05 of the fair-coin limit: 0.75 / 0.255
    assert last["0.5"] == pytest.approx(0.75 / 0.255, rel=1e-12)
    assert abs(last["0.2"] - 1.5) <= 0.05
    main(["advantage", "--n-values", "2..120", "--f-values", "0.5,0.2", "--output", str(out)])
    last = {r["f"]: float(r["advantage"]) for r in csv.DictReader(out.open()) if r["n"] == "120"}
    assert abs(last["0.5"] - 3.0) <= 0.05
    assert abs(last["0.2"] - 1.5) <= 0.05


def test_attacker_outputs(tmp_path):
    out = tmp_path / "att.json"
    assert main(["attacker", "--mode", "no_noise", "--providers", "1000", "--seed", "1", "--output", str(out)]) == 0
    assert json.loads(out.read_text())["exact_guess_rate"] == 1.0
    csv_out = tmp_path / "att.csv"
    assert main(["attacker", "--providers", "50", "--seed", "1", "--format", "csv", "--output", str(csv_out)]) == 0
    assert len(csv_out.read_text().splitlines()) == 51


def test_verify_filter_and_response(session_file, tmp_path):
    out = tmp_path / "v.json"
    assert main(["verify", "--transcript", str(session_file), "--which", "filter", "--output", str(out)]) == 0
    assert json.loads(out.read_text())["valid"] is True
    addr = json.loads(session_file.read_text())["submissions"][0]["address"]
    assert main(["verify", "--transcript", str(session_file), "--which", f"response:0x{addr}", "--output", str(out)]) == 0


def test_verify_detects_tampering(session_file, tmp_path):
    doc = json.loads(session_file.read_text())
    doc["filter"][0] = 1 - doc["filter"][0]
    ct = bytearray.fromhex(doc["submissions"][2]["ciphertext"])
    ct[-1] ^= 1
    doc["submissions"][2]["ciphertext"] = ct.hex()
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(doc))
    assert main(["verify", "--transcript", str(bad), "--which", "filter"]) == 3
    addr = doc["submissions"][2]["address"]
    assert main(["verify", "--transcript", str(bad), "--which", f"response:{addr}"]) == 3


def test_gas_report(session_file, tmp_path, capsys):
    assert main(["gas", "--transcript", str(session_file)]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["total_gas"] == 784_029 + 5 * 74_537 == 1_156_714
    assert report["per_operation"]["deploy"]["fiat"] == "25.40"
    assert main(["gas", "--transcript", str(session_file), "--format", "csv", "--fiat-rate", "0.001"]) == 0
    last = capsys.readouterr().out.splitlines()[-1]
    assert last == "total,,1156714,1156.71"


def test_gas_config_file(session_file, tmp_path, capsys):
    cfg = tmp_path / "gas.json"
    cfg.write_text(json.dumps({"fiat_per_gas": "0.000001", "currency": "EUR"}))
    assert main(["gas", "--transcript", str(session_file), "--gas-config", str(cfg)]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["currency"] == "EUR" and report["fiat_total"] == "1.16"


@pytest.mark.parametrize(
    "argv",
    [
        ["accuracy"],
        ["accuracy", "--seed", "1", "--bogus"],
        ["accuracy", "--seed", "1", "--sd", "0"],
        ["accuracy", "--seed", "-1"],
        ["run-session", "--seed", "1", "--format", "csv"],
        ["run-session", "--seed", "1", "--f", "1.5"],
        ["run-session", "--seed", "1", "--predicate", "colour=red"],
        ["advantage", "--f-values", "0"],
        ["nonsense"],
    ],
)
def test_usage_errors(argv):
    assert main(argv) == 64


def test_missing_and_unparsable_inputs(tmp_path):
    assert main(["gas", "--transcript", str(tmp_path / "none.json")]) == 66
    assert main(["verify", "--transcript", str(tmp_path / "none.json"), "--which", "filter"]) == 66
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["gas", "--transcript", str(bad)]) == 65
    assert main(["verify", "--transcript", str(bad), "--which", "filter"]) == 65


def test_verify_unknown_address(session_file):
    assert main(["verify", "--transcript", str(session_file), "--which", "response:" + "ab" * 20]) == 65


def test_config_file_supplies_flags(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# session defaults\nseed = 9\nproviders = 7\nrequired_responses = 3\n")
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    assert main(["--config", str(cfg), "run-session", "--output", str(a)]) == 0
    assert main(["run-session", "--seed", "9", "--providers", "7", "--nr", "3", "--output", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    # explicit flags win over the file
    assert main(["--config", str(cfg), "run-session", "--providers", "2", "--output", str(a)]) == 2
    cfg.write_text("colour = red\n")
    assert main(["--config", str(cfg), "run-session", "--output", str(a)]) == 64


def test_module_entry_point(tmp_path):
    out = tmp_path / "s.json"
    proc = subprocess.run(
        [sys.executable, "-m", "ldpmarket", "run-session", "--seed", "1", "--output", str(out)],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0, proc.stderr
    assert json.loads(out.read_text())["contract"]["phase"] == "Settled"
