"""Loopback timing of dialected sessions against the plain protocol."""

from __future__ import annotations

import json
import subprocess
import sys
import tempfile
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .ddm import MlpModel
from .dialects import register_ftp_dialects
from .ftp import DialectResponder, FtpServer, client_get
from .srv import DecisionTree

BENCH_FILE = "hello.txt"
BENCH_BYTES = b"abcdefghijklmnopqrst"  # 20 bytes


@dataclass
class TimingRow:
    label: str
    sessions: int
    ddm_ms: float
    srv_ms: float
    handshake_ms: float
    total_ms: float
    server_ddm_ms: float = 0.0
    failures: int = 0


@dataclass
class TimingTable:
    protocol: str
    rows: list[TimingRow] = field(default_factory=list)
    baseline: str | None = None

    def row(self, label: str) -> TimingRow:
        return next(r for r in self.rows if r.label == label)

    def overhead(self, label: str) -> float | None:
        """Relative end-to-end overhead of ``label`` over the baseline."""
        if self.baseline is None:
            return None
        base = self.row(self.baseline).total_ms
        return self.row(label).total_ms / base - 1.0

    def to_json(self) -> str:
        d = asdict(self)
        d["overhead"] = {r.label: self.overhead(r.label) for r in self.rows if r.label != self.baseline}
        return json.dumps(d, indent=2, sort_keys=True)

    def to_table(self) -> str:
        head = f"{'session':<12} {'n':>4} {'ddm_ms':>9} {'srv_ms':>9} {'handshake_ms':>13} {'total_ms':>10} {'overhead':>9}"
        lines = [head]
        for r in self.rows:
            ov = self.overhead(r.label) if r.label != self.baseline else None
            ov_s = "-" if ov is None else f"{100 * ov:.2f}%"
            lines.append(
                f"{r.label:<12} {r.sessions:>4} {r.ddm_ms:>9.4f} {r.srv_ms:>9.4f} "
                f"{r.handshake_ms:>13.3f} {r.total_ms:>10.3f} {ov_s:>9}"
            )
        return "\n".join(lines)


def _summarize(label: str, results) -> TimingRow:
    spans = [r.transcript.spans for r in results if r.ok]
    mean = lambda key: 1000 * float(np.mean([s.get(key, 0.0) for s in spans])) if spans else float("nan")
    return TimingRow(
        label,
        len(results),
        ddm_ms=mean("ddm"),
        srv_ms=mean("srv"),
        handshake_ms=mean("handshake"),
        total_ms=mean("total"),
        failures=sum(not r.ok for r in results),
    )


def bench_ftp(
    model: MlpModel,
    tree: DecisionTree,
    dialects: Sequence[int] = (8,),
    repetitions: int = 20,
    d7_delay: float = 4.0,
    warmup: int = 3,
) -> TimingTable:
    """Fetch a 20-byte file ``repetitions`` times per dialect, interleaved with a plain baseline.

    The plain baseline speaks the dialect-8 wire format with no model inference
    and no verification. Dialected sessions run inference on both endpoints and
    verify the reply, with the dialect pinned so every run does the same work.
    """
    registry = register_ftp_dialects(d7_delay=d7_delay)
    with tempfile.TemporaryDirectory(prefix="dialect-bench-") as tmp:
        Path(tmp, BENCH_FILE).write_bytes(BENCH_BYTES)
        servers = {"plain": FtpServer(DialectResponder(registry, None, fixed_dialect=8), tmp, port=0)}
        for d in dialects:
            servers[f"D{d}"] = FtpServer(DialectResponder(registry, model, fixed_dialect=d, time_model=True), tmp, port=0)
        for s in servers.values():
            s.start()
        try:
            request = f"get {BENCH_FILE}"

            def session(label: str):
                addr = servers[label].address
                if label == "plain":
                    return client_get(addr, request, registry, None, None, verify=False, fixed_dialect=8)
                d = int(label[1:])
                return client_get(addr, request, registry, model, tree, fixed_dialect=d, time_model=True)

            for _ in range(warmup):
                for label in servers:
                    if label != "D7":
                        session(label)
            results: dict[str, list] = {label: [] for label in servers}
            for _ in range(repetitions):
                for label in servers:
                    results[label].append(session(label))
            table = TimingTable("ftp", baseline="plain")
            for label, res in results.items():
                row = _summarize(label, res)
                server_spans = [t.spans.get("ddm", 0.0) for t in servers[label].transcripts.snapshot()]
                row.server_ddm_ms = 1000 * float(np.mean(server_spans)) if server_spans else 0.0
                table.rows.append(row)
        finally:
            for s in servers.values():
                s.stop()
    return table


def bench_ftp_process(
    model_path,
    tree_path,
    dialect: int = 8,
    repetitions: int = 20,
    warmup: int = 2,
) -> TimingTable:
    """Wall time of whole ``ftp-get`` client runs, dialected against plain.

    Each run is a fresh interpreter that loads its inputs, connects, fetches
    the 20-byte file and exits, so the figure is whole-program time rather than
    the bare exchange. The plain client uses the dialect-8 template with no
    model and no verification; both arms talk to servers in this process.
    """
    from .ddm import read_model

    model = read_model(model_path)
    registry = register_ftp_dialects()
    with tempfile.TemporaryDirectory(prefix="dialect-bench-") as tmp:
        Path(tmp, BENCH_FILE).write_bytes(BENCH_BYTES)
        servers = {
            "plain": FtpServer(DialectResponder(registry, None, fixed_dialect=8), tmp, port=0),
            f"D{dialect}": FtpServer(DialectResponder(registry, model, fixed_dialect=dialect, time_model=True), tmp, port=0),
        }
        for s in servers.values():
            s.start()
        try:

            def run(label: str) -> float:
                cmd = [sys.executable, "-m", "dialect_auth.cli", "ftp-get", "--port", str(servers[label].address[1])]
                if label == "plain":
                    cmd.append("--plain")
                else:
                    cmd += ["--model", str(model_path), "--tree", str(tree_path), "--pin-dialect", str(dialect)]
                cmd.append(f"get {BENCH_FILE}")
                t0 = time.perf_counter()
                out = subprocess.run(cmd, capture_output=True, text=True)
                elapsed = time.perf_counter() - t0
                if out.returncode != 0 or "-> ok" not in out.stdout:
                    raise RuntimeError(f"{label} client failed: {out.stdout} {out.stderr}")
                return elapsed

            for _ in range(warmup):
                for label in servers:
                    run(label)
            times: dict[str, list[float]] = {label: [] for label in servers}
            for _ in range(repetitions):
                for label in servers:
                    times[label].append(run(label))
        finally:
            for s in servers.values():
                s.stop()
    table = TimingTable("ftp-process", baseline="plain")
    for label, ts in times.items():
        table.rows.append(TimingRow(label, len(ts), 0.0, 0.0, 0.0, 1000 * float(np.mean(ts))))
    return table


def bench_http(model: MlpModel, dialects: Sequence[int] = (1, 2), repetitions: int = 20, warmup: int = 3) -> TimingTable:
    from .adapters.http import HttpServer, dialect_responder, http_get, plain_responder

    body = BENCH_BYTES
    with tempfile.TemporaryDirectory(prefix="dialect-bench-") as tmp:
        Path(tmp, "index.html").write_bytes(body)
        servers = {"plain": HttpServer(plain_responder, tmp, port=0)}
        for d in dialects:
            servers[f"D{d}"] = HttpServer(dialect_responder(model, fixed_dialect=d), tmp, port=0)
        for s in servers.values():
            s.start()
        try:

            def session(label):
                addr = servers[label].address
                if label == "plain":
                    return http_get(addr, "/index.html", None, verify=False)
                return http_get(addr, "/index.html", model, fixed_dialect=int(label[1:]))

            for _ in range(warmup):
                for label in servers:
                    session(label)
            results = {label: [session(label) for _ in range(0)] for label in servers}
            for _ in range(repetitions):
                for label in servers:
                    results[label].append(session(label))
        finally:
            for s in servers.values():
                s.stop()
    table = TimingTable("http", baseline="plain")
    table.rows = [_summarize(label, res) for label, res in results.items()]
    return table


def bench_mqtt(model: MlpModel, tree: DecisionTree, repetitions: int = 20) -> TimingTable:
    """Dialected publishes only; a stock publish is rejected, so there is no baseline."""
    from .adapters.mqtt import MqttBroker, MqttClient

    with MqttBroker(model, tree, port=0) as broker:
        totals = []
        with MqttClient(broker.address, model) as c:
            for i in range(repetitions):
                t0 = time.perf_counter()
                c.publish(f"bench/topic{i}", BENCH_BYTES)
                totals.append(time.perf_counter() - t0)
        spans = [t.spans for t in broker.transcripts.snapshot()]
    row = TimingRow(
        "publish",
        repetitions,
        ddm_ms=0.0,
        srv_ms=1000 * float(np.mean([s.get("srv", 0.0) for s in spans])),
        handshake_ms=1000 * float(np.mean([s.get("handshake", 0.0) for s in spans])),
        total_ms=1000 * float(np.mean(totals)),
    )
    return TimingTable("mqtt", [row])
