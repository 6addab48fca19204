import csv
import io
import json
import subprocess
import sys

import pytest

from conftest import free_ports
from torus2d.cli import CSV_FIELDS, main


def run_cli(capsys, *argv):
    status = main(list(argv))
    return status, capsys.readouterr().out


def test_verify_default_passes(capsys):
    status, out = run_cli(capsys, "verify")
    report = json.loads(out)
    assert status == 0 and report["failed"] == 0 and report["passed"]
    ns = {c["n"] for c in report["cases"]}
    assert {1, 2, 4, 8, 16} <= ns
    assert any(c["case"] == "grid-2x2-example" for c in report["cases"])


def test_verify_degenerate_cases_present(capsys):
    _, out = run_cli(capsys, "verify")
    cases = json.loads(out)["cases"]
    assert any(c["x"] == 1 and c["n"] > 1 for c in cases)
    assert any(c["y"] == 1 and c["n"] > 1 for c in cases)
    assert any(c["length"] == 1 for c in cases)
    assert any(c["length"] < c["n"] for c in cases)


def test_verify_fault_fails(capsys):
    status, _ = run_cli(capsys, "verify", "--ranks", "4", "--fault")
    assert status == 1


def test_verify_csv(capsys):
    status, out = run_cli(capsys, "verify", "--grid", "2x2", "--format", "csv", "--lengths", "5")
    rows = list(csv.DictReader(io.StringIO(out)))
    assert status == 0
    assert tuple(rows[0]) == CSV_FIELDS["verify"]


def test_cost_preset(capsys):
    status, out = run_cli(capsys, "cost", "--preset", "paper-grids", "--algo", "torus")
    grids = [(r["x"], r["y"]) for r in json.loads(out)["reports"]]
    assert status == 0
    assert sorted(grids) == sorted([(32, 32), (64, 32), (64, 34), (72, 48), (64, 64)])


def test_cost_examples(capsys):
    _, out = run_cli(capsys, "cost", "--ranks", "1024", "--grid", "32x32", "--algo", "ring")
    assert json.loads(out)["reports"][0]["total_steps"] == 2046
    _, out = run_cli(capsys, "cost", "--grid", "48x72", "--algo", "torus")
    assert json.loads(out)["reports"][0]["horizontal_steps"] == 94


def test_cost_csv_columns(capsys):
    _, out = run_cli(capsys, "cost", "--grid", "4x2", "--format", "csv")
    rows = list(csv.DictReader(io.StringIO(out)))
    assert tuple(rows[0]) == CSV_FIELDS["cost"]
    assert {r["algorithm"] for r in rows} == {"ring", "hier", "torus"}


def test_schedule_exp2(capsys):
    status, out = run_cli(capsys, "schedule", "--schedule", "exp2")
    first = json.loads(out)["rows"][0]
    assert status == 0
    assert first["lr"] == 0.2 and first["per_worker_batch"] == 16
    assert first["momentum"] == pytest.approx(0.9407, abs=1e-4)


def test_schedule_reference_csv(capsys):
    _, out = run_cli(capsys, "schedule", "--schedule", "reference", "--format", "csv",
                     "--epoch-step", "0.5")
    rows = list(csv.DictReader(io.StringIO(out)))
    assert len(rows) == 180
    assert {r["total_batch"] for r in rows} == {"32768"}


def test_schedule_custom_file(capsys, tmp_path):
    path = tmp_path / "plan.json"
    path.write_text(json.dumps({"name": "mine", "lr": "A", "phases": [
        {"start_epoch": 0, "end_epoch": 10, "per_worker_batch": 4, "worker_count": 8}]}))
    status, out = run_cli(capsys, "schedule", "--schedule", str(path))
    assert status == 0 and len(json.loads(out)["rows"]) == 10


def test_trainsim(capsys):
    status, out = run_cli(capsys, "trainsim", "--ranks", "4", "--optimizer", "lars",
                          "--smoothing", "0.1")
    report = json.loads(out)
    assert status == 0 and report["max_rel_divergence"] < 1e-8
    status, _ = run_cli(capsys, "trainsim", "--steps", "3", "--tolerance", "0")
    assert status == 1


def test_bench_inproc_csv(capsys):
    status, out = run_cli(capsys, "bench", "--ranks", "4", "--size", "100", "--iters", "2",
                          "--format", "csv", "--algo", "ring", "--algo", "hier", "--algo", "torus")
    rows = list(csv.DictReader(io.StringIO(out)))
    assert status == 0
    for col in ("algo", "n", "x", "y", "bytes", "median_s", "bus_GBps"):
        assert col in rows[0]
    for r in rows:
        assert r["measured_steps"] == r["trace_steps"]


@pytest.mark.parametrize("argv", [
    ["bogus"],
    ["verify", "--grid", "3x3", "--ranks", "8"],
    ["cost", "--grid", "4X4"],
    ["schedule", "--schedule", "exp9"],
    ["trainsim", "--optimizer", "adam"],
    ["bench", "--transport", "tcp"],
    [],
])
def test_usage_errors(capsys, argv):
    assert main(argv) == 2


@pytest.mark.parametrize("argv", [
    ["verify", "--ranks", "6"],
    ["cost", "--preset", "paper-grids"],
    ["schedule", "--schedule", "exp4", "--format", "csv"],
    ["trainsim", "--steps", "10", "--hidden", "4"],
])
def test_output_files_bit_identical(tmp_path, argv):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(argv + ["--out", str(a)]) == 0
    assert main(argv + ["--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_tcp_bench_subprocesses(tmp_path):
    n = 4
    peers = tmp_path / "peers.txt"
    peers.write_text("# test cluster\n" + "".join(
        f"{r} 127.0.0.1:{p}\n" for r, p in enumerate(free_ports(n))))
    out = tmp_path / "bench.json"
    procs = [subprocess.Popen(
        [sys.executable, "-m", "torus2d", "bench", "--transport", "tcp", "--rank", str(r),
         "--peers", str(peers), "--grid", "2x2", "--size", "64", "--iters", "3",
         "--algo", "ring", "--algo", "torus", "--algo", "hier", "--timeout", "20",
         "--out", str(out)], stdout=subprocess.PIPE, stderr=subprocess.PIPE)
        for r in range(n)]
    codes = [p.wait(timeout=60) for p in procs]
    assert codes == [0] * n, [p.stderr.read().decode() for p in procs]
    rows = json.loads(out.read_text())["rows"]
    assert [r["algo"] for r in rows] == ["ring", "torus", "hier"]
    for r in rows[:2]:
        assert r["measured_steps"] == r["trace_steps"]


def test_tcp_unreachable_peer_exits_3(tmp_path):
    ports = free_ports(2)
    peers = tmp_path / "peers.txt"
    peers.write_text(f"0 127.0.0.1:{ports[0]}\n1 127.0.0.1:{ports[1]}\n")
    status = main(["bench", "--transport", "tcp", "--rank", "0", "--peers", str(peers),
                   "--size", "4", "--iters", "1", "--timeout", "1"])
    assert status == 3
