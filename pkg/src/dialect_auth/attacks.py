"""Loopback attack topology: Alice (client), Bob (genuine server), Eve (control-channel
proxy that can reroute) and Mallory (a server without the dialect model).

Every scenario builds its own endpoints on ephemeral loopback ports and runs
trials sequentially, so a scenario with a fixed seed gives the same counts.
"""

from __future__ import annotations

import json
import logging
import socket
import tempfile
import threading
import time
from collections import Counter
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .datasets import bundled_words
from .ddm import MlpModel, predict_dialect
from .dialects import (
    FIELD_SEP,
    STATUS_MISSING,
    DialectRegistry,
    RequestContext,
    register_ftp_dialects,
    render_response,
)
from .errors import HarnessSetupFailure
from .ftp import DialectResponder, FtpServer, Reply, client_get
from .srv import DecisionTree, RejectReason
from .transcript import Transcript

log = logging.getLogger(__name__)

DETECTION_REASONS = (RejectReason.DIALECT_MISMATCH.value, RejectReason.CONTENT_MISMATCH.value)


class AttackKind(str, Enum):
    REROUTE = "Reroute"
    REPLAY = "Replay"
    FLOOD_PUBLISH = "FloodPublish"
    PASSIVE_OBSERVE = "PassiveObserve"


class MalloryStrategy(str, Enum):
    PLAIN = "plain"  # a conventional FTP server: 150, data, 226
    FIXED = "fixed"  # a single "File does not exist" line
    RANDOM_SCHEMA = "random_schema"
    RANDOM_DIALECT = "random_dialect"  # holds a stolen registry but no model


@dataclass
class AttackScenario:
    kind: AttackKind
    trials: int = 1000
    seed: int = 0
    target: str = "mallory"  # where Eve sends Alice's traffic: "mallory" or "bob"
    strategy: MalloryStrategy = MalloryStrategy.PLAIN
    response_timeout: float = 0.5
    n_files: int = 64
    missing_fraction: float = 0.1
    exact_replay_trials: int = 0
    genuine_trials: int = 0  # flood: genuine publishes interleaved with the attack

    def __post_init__(self):
        self.kind = AttackKind(self.kind)
        self.strategy = MalloryStrategy(self.strategy)
        if self.trials < 1:
            raise ValueError("trial count must be >= 1")
        if self.target not in ("mallory", "bob"):
            raise ValueError("target must be 'mallory' or 'bob'")


@dataclass
class DetectionReport:
    kind: str
    trials: int
    detected: int
    detection_rate: float
    mean_time_to_detect: float | None = None  # seconds, request start to termination
    reasons: dict = field(default_factory=dict)
    bytes_delivered: int = 0
    residual: int = 0  # accepted attacks the mechanism cannot see (exact replay, lucky guesses)
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def to_table(self) -> str:
        rows = [
            ("kind", self.kind),
            ("trials", self.trials),
            ("detected", self.detected),
            ("detection_rate", f"{self.detection_rate:.4f}"),
            ("mean_time_to_detect_ms", "-" if self.mean_time_to_detect is None else f"{1000 * self.mean_time_to_detect:.3f}"),
            ("bytes_delivered", self.bytes_delivered),
            ("residual", self.residual),
        ]
        rows += [(f"reason:{k}", v) for k, v in sorted(self.reasons.items())]
        rows += [(k, v) for k, v in sorted(self.extra.items())]
        width = max(len(str(k)) for k, _ in rows)
        return "\n".join(f"{k:<{width}}  {v}" for k, v in rows)


# ------------------------------------------------------------------ Eve


class EveProxy:
    """Transparent TCP proxy for the control channel; records server-to-client bytes."""

    def __init__(self, target: tuple[str, int], host: str = "127.0.0.1", record: bool = False):
        self.target = target
        self.record = record
        self.recordings: list[bytes] = []
        self._lock = threading.Lock()
        self._lsock = socket.create_server((host, 0), backlog=128)
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> tuple[str, int]:
        return self._lsock.getsockname()[:2]

    def start(self) -> "EveProxy":
        self._thread = threading.Thread(target=self._accept_loop, name="eve", daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._stop.set()
        try:
            socket.create_connection(self.address, timeout=1).close()
        except OSError:
            pass
        self._lsock.close()
        if self._thread is not None:
            self._thread.join(timeout=5)

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()

    def _accept_loop(self) -> None:
        while not self._stop.is_set():
            try:
                client, _ = self._lsock.accept()
            except OSError:
                return
            if self._stop.is_set():
                client.close()
                return
            threading.Thread(target=self._relay, args=(client,), daemon=True).start()

    def _relay(self, client: socket.socket) -> None:
        try:
            upstream = socket.create_connection(self.target, timeout=10)
        except OSError:
            client.close()
            return
        for s in (client, upstream):
            s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        captured = bytearray()

        def pump(src, dst, sink):
            try:
                while chunk := src.recv(65536):
                    if sink is not None:
                        sink += chunk
                    dst.sendall(chunk)
            except OSError:
                pass
            finally:
                try:
                    dst.shutdown(socket.SHUT_WR)
                except OSError:
                    pass

        t = threading.Thread(target=pump, args=(client, upstream, None), daemon=True)
        t.start()
        pump(upstream, client, captured if self.record else None)
        t.join(timeout=10)
        client.close()
        upstream.close()
        if self.record:
            with self._lock:
                self.recordings.append(bytes(captured))


def _is_control_reply(line: str) -> bool:
    return len(line) >= 4 and line[:3].isdigit() and line[3] == " "


def extract_replies(recording: bytes) -> list[list[str]]:
    """Dialect replies in a recorded server stream: lines between ``200 PORT`` and the next control reply."""
    out, cur = [], None
    for line in recording.decode("utf-8", errors="replace").split("\r\n"):
        if line.startswith("200 PORT"):
            cur = []
            out.append(cur)
        elif cur is not None and line and not _is_control_reply(line):
            cur.append(line)
        else:
            cur = None
    return [r for r in out if r]


# ------------------------------------------------------------------ Mallory


class MalloryResponder:
    """Server behaviour without the dialect model."""

    def __init__(self, strategy: MalloryStrategy, seed: int = 0, registry: DialectRegistry | None = None):
        self.strategy = MalloryStrategy(strategy)
        self.rng = np.random.default_rng(seed)
        self.registry = registry or register_ftp_dialects(d7_delay=0.0)
        self.fake = b"mallory was here\n"

    def _token(self, ctx: RequestContext, integer: bool) -> str:
        if integer:
            return str(int(self.rng.integers(-1, 1000)))
        return str(self.rng.choice(["File exists", STATUS_MISSING, ctx.filename, ctx.command]))

    def __call__(self, ctx: RequestContext, transcript: Transcript) -> Reply:
        s = self.strategy
        if s is MalloryStrategy.PLAIN:
            msg = f"150 Opening BINARY mode data connection for {ctx.filename} ({len(self.fake)} bytes)"
            return Reply([msg], data=self.fake, push=True)
        if s is MalloryStrategy.FIXED:
            return Reply([STATUS_MISSING], data=self.fake)
        if s is MalloryStrategy.RANDOM_SCHEMA:
            packets = []
            for _ in range(int(self.rng.integers(1, 7))):
                n_fields = int(self.rng.integers(1, 5))
                packets.append(FIELD_SEP.join(self._token(ctx, bool(self.rng.integers(2))) for _ in range(n_fields)))
            return Reply(packets, data=self.fake)
        did = int(self.rng.integers(1, len(self.registry) + 1))
        fake_ctx = RequestContext(ctx.command, ctx.filename, len(self.fake), exists=True)
        return Reply(render_response(self.registry[did], fake_ctx), dialect=did, data=self.fake)


class ReplayResponder:
    """Answers every request with a previously recorded reply."""

    def __init__(self):
        self.messages: list[str] = []
        self.data = b""

    def __call__(self, ctx: RequestContext, transcript: Transcript) -> Reply:
        return Reply(list(self.messages), data=self.data)


# ------------------------------------------------------------------ helpers


@dataclass
class _Bench:
    root: Path
    names: list[str]
    missing: list[str]


def _make_files(root: Path, n_files: int, rng: np.random.Generator) -> _Bench:
    words = bundled_words()
    picks = rng.choice(len(words), size=2 * n_files, replace=False)
    exts = (".txt", ".html", ".pdf", ".csv", ".log")
    names = [f"{words[i]}{exts[int(rng.integers(len(exts)))]}" for i in picks]
    present, missing = names[:n_files], names[n_files:]
    for name in present:
        (root / name).write_bytes(rng.integers(0, 256, int(rng.integers(1, 512))).astype(np.uint8).tobytes())
    return _Bench(root, present, missing)


def _pick_request(bench: _Bench, rng: np.random.Generator, missing_fraction: float) -> str:
    pool = bench.missing if rng.random() < missing_fraction else bench.names
    return f"get {pool[int(rng.integers(len(pool)))]}"


def _start(*endpoints):
    started = []
    try:
        for e in endpoints:
            started.append(e.start())
    except OSError as e:
        for s in started:
            s.stop()
        raise HarnessSetupFailure(str(e)) from e
    return started


def _stop(endpoints) -> None:
    for e in reversed(endpoints):
        e.stop()


def _detected(result) -> bool:
    return result.terminated and result.reason in DETECTION_REASONS


# ------------------------------------------------------------------ scenarios


def run_reroute(
    scenario: AttackScenario,
    model: MlpModel,
    tree: DecisionTree,
    registry: DialectRegistry | None = None,
) -> DetectionReport:
    """Eve forwards Alice's control connection to ``scenario.target``.

    Against Mallory, ``detected`` counts sessions Alice terminated on the
    dialect check. Against Bob (control arm) it counts false terminations.
    """
    registry = registry or register_ftp_dialects(d7_delay=0.0)
    rng = np.random.default_rng(scenario.seed)
    with tempfile.TemporaryDirectory(prefix="dialect-harness-") as tmp:
        bench = _make_files(Path(tmp), scenario.n_files, rng)
        try:
            bob = FtpServer(DialectResponder(registry, model), tmp, port=0)
            mallory = FtpServer(MalloryResponder(scenario.strategy, scenario.seed, registry), tmp, port=0)
        except OSError as e:
            raise HarnessSetupFailure(str(e)) from e
        target = mallory if scenario.target == "mallory" else bob
        eve = EveProxy(target.address)
        endpoints = _start(bob, mallory, eve)
        try:
            reasons: Counter = Counter()
            times, detected, delivered, accepted = [], 0, 0, 0
            for _ in range(scenario.trials):
                req = _pick_request(bench, rng, scenario.missing_fraction)
                res = client_get(
                    eve.address, req, registry, model, tree, response_timeout=scenario.response_timeout
                )
                if res.terminated:
                    reasons[res.reason] += 1
                    if scenario.target == "mallory" and _detected(res) or scenario.target == "bob":
                        detected += 1
                        times.append(res.transcript.spans.get("handshake", 0.0))
                else:
                    accepted += 1
                    if scenario.target == "mallory":
                        delivered += len(res.data or b"")
        finally:
            _stop(endpoints)
    return DetectionReport(
        kind=AttackKind.REROUTE.value,
        trials=scenario.trials,
        detected=detected,
        detection_rate=detected / scenario.trials,
        mean_time_to_detect=float(np.mean(times)) if times else None,
        reasons=dict(reasons),
        bytes_delivered=delivered,
        residual=accepted if scenario.target == "mallory" else 0,
        extra={"target": scenario.target, "strategy": scenario.strategy.value},
    )


def run_replay(
    scenario: AttackScenario,
    model: MlpModel,
    tree: DecisionTree,
    registry: DialectRegistry | None = None,
) -> DetectionReport:
    """Eve records genuine sessions, then answers Alice's next request with an old reply.

    ``trials`` cross-request pairs (R_b != R_a) count towards detection.
    ``exact_replay_trials`` replays R_a against R_a itself; those acceptances
    are reported as ``residual`` rather than detections.
    """
    registry = registry or register_ftp_dialects(d7_delay=0.0)
    rng = np.random.default_rng(scenario.seed)
    with tempfile.TemporaryDirectory(prefix="dialect-harness-") as tmp:
        bench = _make_files(Path(tmp), scenario.n_files, rng)
        try:
            bob = FtpServer(DialectResponder(registry, model), tmp, port=0)
            replayer = ReplayResponder()
            mallory = FtpServer(replayer, tmp, port=0)
        except OSError as e:
            raise HarnessSetupFailure(str(e)) from e
        recorder = EveProxy(bob.address, record=True)
        endpoints = _start(bob, mallory, recorder)
        try:
            # passive phase: one genuine session per file, observed on the control path
            requests = [f"get {n}" for n in bench.names + bench.missing]
            recorded: dict[str, list[str]] = {}
            for req in requests:
                recorder.recordings.clear()
                res = client_get(recorder.address, req, registry, model, tree, response_timeout=scenario.response_timeout)
                if res.terminated:
                    raise HarnessSetupFailure(f"genuine session for {req!r} failed: {res.reason}")
                deadline = time.monotonic() + 2
                while not recorder.recordings and time.monotonic() < deadline:
                    time.sleep(0.001)
                replies = extract_replies(b"".join(recorder.recordings))
                if not replies:
                    raise HarnessSetupFailure(f"nothing recorded for {req!r}")
                recorded[req] = replies[0]

            eve = EveProxy(mallory.address).start()
            endpoints.append(eve)
            reasons: Counter = Counter()
            same_dialect: Counter = Counter()
            detected, delivered, residual = 0, 0, 0
            times = []

            def attempt(r_a: str, r_b: str):
                replayer.messages = recorded[r_a]
                # the data channel bypasses Eve, so only the announced length is known
                replayer.data = bytes(_announced_size(recorded[r_a], registry, model, r_a))
                return client_get(eve.address, r_b, registry, model, tree, response_timeout=scenario.response_timeout)

            for _ in range(scenario.trials):
                i, j = rng.choice(len(requests), size=2, replace=False)
                r_a, r_b = requests[i], requests[j]
                res = attempt(r_a, r_b)
                same = predict_dialect(model, r_a) == predict_dialect(model, r_b)
                if _detected(res):
                    detected += 1
                    reasons[res.reason] += 1
                    times.append(res.transcript.spans.get("handshake", 0.0))
                else:
                    reasons["accepted" if not res.terminated else res.reason] += 1
                    delivered += len(res.data or b"")
                    same_dialect[f"undetected_dialect_{predict_dialect(model, r_b)}"] += 1
                if same:
                    same_dialect["same_dialect_pairs"] += 1
            exact_accepted = 0
            for _ in range(scenario.exact_replay_trials):
                r_a = requests[int(rng.integers(len(requests)))]
                res = attempt(r_a, r_a)
                if not res.terminated:
                    exact_accepted += 1
            residual = exact_accepted
        finally:
            _stop(endpoints)
    extra = dict(same_dialect)
    extra["exact_replay_trials"] = scenario.exact_replay_trials
    extra["exact_replay_accepted"] = exact_accepted
    return DetectionReport(
        kind=AttackKind.REPLAY.value,
        trials=scenario.trials,
        detected=detected,
        detection_rate=detected / scenario.trials,
        mean_time_to_detect=float(np.mean(times)) if times else None,
        reasons=dict(reasons),
        bytes_delivered=delivered,
        residual=residual,
        extra=extra,
    )


def _announced_size(messages: list[str], registry: DialectRegistry, model: MlpModel, request: str) -> int:
    """File length a replayer would infer from a recorded reply (0 when none is announced)."""
    d = registry[predict_dialect(model, request)]
    tokens = FIELD_SEP.join(messages).split(FIELD_SEP)
    names = [f.name for p in d.fields for f in p]
    sizes = {n: t for n, t in zip(names, tokens)}
    if "size" in sizes:
        return max(0, int(sizes["size"]))
    if "half" in sizes and "rest" in sizes:
        return max(0, int(sizes["half"]) + int(sizes["rest"]))
    if "negsize" in sizes:
        return max(0, -int(sizes["negsize"]))
    return 0


def run_flood(scenario: AttackScenario, model: MlpModel, tree: DecisionTree) -> DetectionReport:
    """An A-client floods the broker with undialected publishes.

    With ``genuine_trials`` > 0 genuine dialected publishes are interleaved at
    random positions; the report then also counts how many of those were
    accepted and whether the rejected set is exactly the undialected subset.
    """
    from .adapters.mqtt import MqttBroker, MqttClient, encode_plain_publish

    rng = np.random.default_rng(scenario.seed)
    words = bundled_words()
    labels = np.array([0] * scenario.trials + [1] * scenario.genuine_trials)
    rng.shuffle(labels)
    try:
        broker = MqttBroker(model, tree, port=0, continuation_timeout=scenario.response_timeout)
    except OSError as e:
        raise HarnessSetupFailure(str(e)) from e
    endpoints = _start(broker)
    rejected_attack, accepted_genuine, misclassified = 0, 0, 0
    times = []
    try:
        for genuine in labels:
            topic = f"{words[int(rng.integers(len(words)))]}/{words[int(rng.integers(len(words)))]}"
            message = f"{float(rng.normal(20, 5)):.2f}"
            t0 = time.perf_counter()
            with MqttClient(broker.address, model) as c:
                ok = c.publish(topic, message) if genuine else c.publish_raw(encode_plain_publish(topic, message))
            if genuine:
                accepted_genuine += ok
                misclassified += not ok
            else:
                rejected_attack += not ok
                misclassified += ok
                if not ok:
                    times.append(time.perf_counter() - t0)
    finally:
        _stop(endpoints)
    return DetectionReport(
        kind=AttackKind.FLOOD_PUBLISH.value,
        trials=scenario.trials,
        detected=rejected_attack,
        detection_rate=rejected_attack / scenario.trials,
        mean_time_to_detect=float(np.mean(times)) if times else None,
        reasons={"DialectMismatch": rejected_attack},
        bytes_delivered=0,
        residual=scenario.trials - rejected_attack,
        extra={
            "genuine_trials": scenario.genuine_trials,
            "genuine_accepted": accepted_genuine,
            "misclassified": misclassified,
            "broker_stored": len(broker.messages),
        },
    )


def run_attack(scenario: AttackScenario, model, tree, mqtt_model=None, mqtt_tree=None) -> DetectionReport:
    if scenario.kind is AttackKind.REROUTE:
        return run_reroute(scenario, model, tree)
    if scenario.kind is AttackKind.REPLAY:
        return run_replay(scenario, model, tree)
    if scenario.kind is AttackKind.FLOOD_PUBLISH:
        if mqtt_model is None or mqtt_tree is None:
            raise HarnessSetupFailure("flood needs an MQTT model and tree")
        return run_flood(scenario, mqtt_model, mqtt_tree)
    raise HarnessSetupFailure(f"{scenario.kind.value} has no active runner")
