import json
import subprocess
import sys

import pytest

from dialect_auth.cli import Context, build_parser, cost_overrides, load_config, main
from dialect_auth.ddm import read_model
from dialect_auth.dialects import register_ftp_dialects
from dialect_auth.ftp import DialectResponder, FtpServer
from dialect_auth.srv import read_tree


@pytest.fixture(scope="module")
def artifacts(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["gen-datasets", "--size", "400", "--srv-size", "300", "--out", str(d)]) == 0
    assert main(["train-ddm", "--requests", str(d / "ftp_requests.txt"), "--epochs", "2", "--out", str(d / "m.bin")]) == 0
    assert main(["train-srv", "--dataset", str(d / "ftp_srv.csv"), "--out", str(d / "t.bin")]) == 0
    return d


def test_generated_files(artifacts):
    lines = (artifacts / "ftp_requests.txt").read_text().splitlines()
    assert len(lines) == 400 and all(l.startswith("get ") for l in lines)
    assert read_model(artifacts / "m.bin").n_dialects == 15
    assert len(read_tree(artifacts / "t.bin")) > 1


def test_other_protocol_models(tmp_path):
    assert main(["train-ddm", "--protocol", "mqtt", "--size", "300", "--epochs", "1", "--out", str(tmp_path / "q.bin")]) == 0
    assert read_model(tmp_path / "q.bin").n_dialects == 3
    assert main(["train-srv", "--protocol", "mqtt", "--size", "150", "--out", str(tmp_path / "qt.bin")]) == 0


def test_config_file_precedence(tmp_path):
    cfg = tmp_path / "c.conf"
    cfg.write_text("# settings\nftp_port = 3000\nd7_delay = 0\ncost.1 = 5\nmodel = x.bin\n")
    assert load_config(cfg)["ftp_port"] == "3000"
    assert cost_overrides(load_config(cfg)) == {1: 5.0}
    args = build_parser().parse_args(["--config", str(cfg), "ftp-get", "get a.txt"])
    ctx = Context(args)
    assert ctx.get("port", "ftp_port") == "3000"
    assert ctx.registry()[1].cost == 5.0 and ctx.registry()[7].delay == 0.0
    args = build_parser().parse_args(["--config", str(cfg), "ftp-get", "--port", "4000", "get a.txt"])
    assert Context(args).get("port", "ftp_port") == 4000


def test_ftp_get(artifacts, tmp_path, capsys):
    root = tmp_path / "root"
    root.mkdir()
    (root / "hello.txt").write_bytes(b"x" * 20)
    reg = register_ftp_dialects(d7_delay=0.0)
    cfg = tmp_path / "c.conf"
    cfg.write_text("d7_delay = 0\n")
    with FtpServer(DialectResponder(reg, read_model(artifacts / "m.bin")), root, port=0) as srv:
        rc = main([
            "--config", str(cfg), "ftp-get", "--port", str(srv.address[1]),
            "--model", str(artifacts / "m.bin"), "--tree", str(artifacts / "t.bin"),
            "--out", str(tmp_path / "got"), "--transcript", str(tmp_path / "t.jsonl"),
            "get hello.txt", "get nothere.txt",
        ])
    assert rc == 0
    out = capsys.readouterr().out
    assert "-> ok" in out and "-> not_found" in out
    assert (tmp_path / "got" / "hello.txt").read_bytes() == b"x" * 20
    events = [json.loads(l) for l in (tmp_path / "t.jsonl").read_text().splitlines()]
    assert any(e.get("text") == "get hello.txt" or "get hello.txt" in json.dumps(e) for e in events)


def test_attack_command(artifacts, tmp_path, capsys):
    rc = main([
        "attack", "--kind", "reroute", "--trials", "5",
        "--model", str(artifacts / "m.bin"), "--tree", str(artifacts / "t.bin"), "--json", str(tmp_path / "r.json"),
    ])
    assert rc == 0
    assert json.loads((tmp_path / "r.json").read_text())["detection_rate"] == 1.0


def test_sweep_command(tmp_path, capsys):
    rc = main(["sweep-tradeoff", "--a-values", "0,1", "--size", "300", "--heldout", "100", "--out", str(tmp_path)])
    assert rc == 0
    csv_lines = (tmp_path / "distribution.csv").read_text().splitlines()
    assert csv_lines[0] == "a,dialect,count" and len(csv_lines) == 1 + 2 * 15
    assert (tmp_path / "distribution_a1.svg").read_text().startswith("<svg")


def test_sweep_rejects_bad_a(tmp_path):
    with pytest.raises(SystemExit):
        main(["sweep-tradeoff", "--a-values", "1.5", "--out", str(tmp_path)])


def test_bench_command(artifacts, tmp_path, capsys):
    rc = main([
        "bench", "--repetitions", "2", "--model", str(artifacts / "m.bin"),
        "--tree", str(artifacts / "t.bin"), "--json", str(tmp_path / "b.json"),
    ])
    assert rc == 0
    data = json.loads((tmp_path / "b.json").read_text())
    assert {r["label"] for r in data["rows"]} == {"plain", "D8"}


def test_missing_model_is_reported():
    with pytest.raises(SystemExit):
        main(["bench", "--repetitions", "1"])


def test_console_script_help():
    out = subprocess.run([sys.executable, "-m", "dialect_auth.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("gen-datasets", "train-ddm", "serve-ftp", "attack", "sweep-tradeoff", "bench"):
        assert cmd in out.stdout
