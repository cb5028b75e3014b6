"""MQTT publish dialects. Here the client is the party being authenticated.

Dialect-layer publishes carry every field with a 2-byte big-endian length
prefix and set the fixed-header flags to ``DUP=1, QoS=0``. That flag
combination is illegal for conforming MQTT 3.1.1 clients, so a stock client
(or an attacker without the dialect layer) can never produce it by accident.
The broker feeds the topic to its dialect model and checks the publish
structure against the expected dialect before touching the payload.
"""

from __future__ import annotations

import logging
import socket
import socketserver
import threading
from dataclasses import dataclass
from enum import IntEnum
from typing import Sequence

import numpy as np

from ..ddm import MlpModel, predict_dialect
from ..dialects import FieldType, ResponseStructure
from ..errors import DialectAuthError, MqttDecodeError, OversizedField
from ..srv import DecisionTree, RejectReason, Verdict, extract_features, predict_tree
from ..transcript import Phase, Transcript, TranscriptLog

log = logging.getLogger(__name__)

DEFAULT_PORT = 1884
PUBLISH = 0x3
PLAIN_CONTROL = 0x30  # PUBLISH, QoS 0, no flags
DIALECT_CONTROL = 0x38  # PUBLISH with DUP at QoS 0
CONNECT = 0x10
CONNACK = b"\x20\x02\x00\x00"
PUBACK = b"\x40\x02\x00\x00"
PINGREQ = 0xC0
PINGRESP = b"\xd0\x00"
DISCONNECT = 0xE0
MAX_FIELD = 0xFFFF


class MqttDialect(IntEnum):
    HEADER_SHUFFLE = 1
    TRANSMUTATION_OF_MESSAGES = 2
    MUTATION_OF_PAYLOAD = 3


N_MQTT_DIALECTS = len(MqttDialect)


def encode_remaining_length(n: int) -> bytes:
    if not 0 <= n <= 268_435_455:
        raise OversizedField(f"remaining length {n}")
    out = bytearray()
    while True:
        byte, n = n % 128, n // 128
        out.append(byte | (0x80 if n else 0))
        if not n:
            return bytes(out)


def decode_remaining_length(data: bytes, offset: int = 1) -> tuple[int, int]:
    """(value, offset just past the length bytes)."""
    value, mult = 0, 1
    for k in range(4):
        if offset + k >= len(data):
            raise MqttDecodeError("truncated remaining length")
        b = data[offset + k]
        value += (b & 0x7F) * mult
        if not b & 0x80:
            return value, offset + k + 1
        mult *= 128
    raise MqttDecodeError("remaining length longer than 4 bytes")


@dataclass(frozen=True)
class MqttPublish:
    """One publish packet: a run of length-prefixed fields."""

    fields: tuple[bytes, ...]
    control: int = DIALECT_CONTROL

    def __post_init__(self):
        for f in self.fields:
            if len(f) > MAX_FIELD:
                raise OversizedField(f"field of {len(f)} bytes")

    def body(self) -> bytes:
        return b"".join(len(f).to_bytes(2, "big") + f for f in self.fields)

    def encode(self) -> bytes:
        body = self.body()
        return bytes([self.control]) + encode_remaining_length(len(body)) + body

    @classmethod
    def decode(cls, data: bytes) -> "MqttPublish":
        if not data:
            raise MqttDecodeError("empty packet")
        control = data[0]
        if control >> 4 != PUBLISH:
            raise MqttDecodeError(f"not a publish packet: 0x{control:02x}")
        length, off = decode_remaining_length(data)
        if len(data) - off != length:
            raise MqttDecodeError(f"remaining length {length} but {len(data) - off} bytes follow")
        return cls(decode_fields(data[off:]), control)


def decode_fields(body: bytes) -> tuple[bytes, ...]:
    fields, i = [], 0
    while i < len(body):
        if i + 2 > len(body):
            raise MqttDecodeError("truncated field length")
        n = int.from_bytes(body[i : i + 2], "big")
        if i + 2 + n > len(body):
            raise MqttDecodeError(f"field declares {n} bytes, {len(body) - i - 2} remain")
        fields.append(body[i + 2 : i + 2 + n])
        i += 2 + n
    return tuple(fields)


def encode_plain_publish(topic: str, message: str) -> bytes:
    """A stock MQTT 3.1.1 QoS 0 publish: length-prefixed topic, raw payload."""
    t, m = topic.encode(), message.encode()
    if len(t) > MAX_FIELD:
        raise OversizedField("topic too long")
    body = len(t).to_bytes(2, "big") + t + m
    return bytes([PLAIN_CONTROL]) + encode_remaining_length(len(body)) + body


def dummy_pair(topic: bytes, message: bytes) -> tuple[bytes, bytes]:
    return topic + b"_d", message[::-1]


def mqtt_dialect_encode(dialect, topic: str | bytes, message: str | bytes) -> list[MqttPublish]:
    d = MqttDialect(dialect)
    t = topic.encode() if isinstance(topic, str) else bytes(topic)
    m = message.encode() if isinstance(message, str) else bytes(message)
    if not t or not m:
        raise ValueError("topic and message must be non-empty")
    if len(t) > MAX_FIELD or len(m) > MAX_FIELD:
        raise OversizedField("topic and message must each be < 65536 bytes")
    if d is MqttDialect.HEADER_SHUFFLE:
        return [MqttPublish((m, t))]
    if d is MqttDialect.TRANSMUTATION_OF_MESSAGES:
        if len(t) + 2 > MAX_FIELD:
            raise OversizedField("dummy topic too long")
        return [MqttPublish((t, m) + dummy_pair(t, m))]
    return [MqttPublish((t,)), MqttPublish((m,))]


def mqtt_dialect_decode(dialect, packets: Sequence[MqttPublish]) -> tuple[bytes, bytes]:
    """Inverse of :func:`mqtt_dialect_encode`; raises MqttDecodeError on any shape mismatch."""
    d = MqttDialect(dialect)
    shape = tuple(len(p.fields) for p in packets)
    want = {
        MqttDialect.HEADER_SHUFFLE: (2,),
        MqttDialect.TRANSMUTATION_OF_MESSAGES: (4,),
        MqttDialect.MUTATION_OF_PAYLOAD: (1, 1),
    }[d]
    if shape != want:
        raise MqttDecodeError(f"shape {shape} does not match {d.name}")
    if d is MqttDialect.HEADER_SHUFFLE:
        m, t = packets[0].fields
    elif d is MqttDialect.TRANSMUTATION_OF_MESSAGES:
        t, m = packets[0].fields[:2]
    else:
        t, m = packets[0].fields[0], packets[1].fields[0]
    return t, m


def mqtt_structure(packets: Sequence[MqttPublish]) -> ResponseStructure:
    """Fields are opaque bytes, so every field is typed as a string."""
    return ResponseStructure(
        tuple(tuple((f.decode("utf-8", errors="replace"), FieldType.STRING) for f in p.fields) for p in packets)
    )


def gen_mqtt_srv_dataset(size: int, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Structure features of random dialected publishes, labels round-robin over the dialects."""
    rng = np.random.default_rng(seed)
    alphabet = np.array(list("abcdefghijklmnopqrstuvwxyz0123456789/"))
    x = np.zeros((size, extract_features(mqtt_structure([MqttPublish((b"a",))])).shape[0]), np.float32)
    y = np.zeros(size, np.int64)
    for i in range(size):
        d = MqttDialect(i % N_MQTT_DIALECTS + 1)
        t, m = ("".join(rng.choice(alphabet, int(rng.integers(1, 30)))) for _ in range(2))
        x[i] = extract_features(mqtt_structure(mqtt_dialect_encode(d, t, m)))
        y[i] = int(d)
    return x, y


def mqtt_broker_verify(packets: Sequence[MqttPublish], model: MlpModel, tree: DecisionTree) -> Verdict:
    """Structure -> candidate dialect -> topic -> model must agree, then exact re-encoding."""
    if not packets:
        return Verdict.reject(RejectReason.DIALECT_MISMATCH, "no packets")
    if any(p.control != DIALECT_CONTROL for p in packets):
        return Verdict.reject(RejectReason.DIALECT_MISMATCH, "undialected publish")
    try:
        predicted = predict_tree(tree, extract_features(mqtt_structure(packets)))
        topic, message = mqtt_dialect_decode(predicted, packets)
    except (DialectAuthError, ValueError) as e:
        return Verdict.reject(RejectReason.DIALECT_MISMATCH, f"unusable structure: {e}")
    try:
        expected = predict_dialect(model, topic.decode("utf-8"))
    except (DialectAuthError, UnicodeDecodeError) as e:
        return Verdict.reject(RejectReason.DIALECT_MISMATCH, f"bad topic: {e}", predicted)
    if expected != predicted:
        return Verdict.reject(
            RejectReason.DIALECT_MISMATCH, f"structure says {predicted}, topic maps to {expected}", predicted
        )
    if [p.fields for p in mqtt_dialect_encode(expected, topic, message)] != [p.fields for p in packets]:
        return Verdict.reject(RejectReason.CONTENT_MISMATCH, "companion fields do not match", predicted)
    return Verdict(True, None, predicted)


# ------------------------------------------------------------------ transport


def recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("peer closed")
        buf += chunk
    return bytes(buf)


def read_packet(sock: socket.socket) -> bytes:
    """One complete MQTT control packet from the stream."""
    head = recv_exact(sock, 1)
    lenbytes = bytearray()
    while True:
        b = recv_exact(sock, 1)
        lenbytes += b
        if not b[0] & 0x80:
            break
        if len(lenbytes) == 4:
            raise MqttDecodeError("remaining length longer than 4 bytes")
    n, _ = decode_remaining_length(head + bytes(lenbytes))
    return head + bytes(lenbytes) + recv_exact(sock, n)


def connect_packet(client_id: str = "dialect-client") -> bytes:
    cid = client_id.encode()
    body = b"\x00\x04MQTT\x04\x02\x00\x3c" + len(cid).to_bytes(2, "big") + cid
    return bytes([CONNECT]) + encode_remaining_length(len(body)) + body


class MqttBroker:
    """Accepts dialected publishes, disconnects a client on the first reject."""

    def __init__(
        self,
        model: MlpModel,
        tree: DecisionTree,
        host: str = "127.0.0.1",
        port: int = DEFAULT_PORT,
        timeout: float = 10.0,
        continuation_timeout: float = 1.0,
    ):
        self.model = model
        self.tree = tree
        self.timeout = timeout
        self.continuation_timeout = continuation_timeout
        self.messages: list[tuple[str, bytes]] = []
        self.accepted = 0
        self.rejected = 0
        self.transcripts = TranscriptLog()
        self._lock = threading.Lock()
        app = self

        class Handler(socketserver.BaseRequestHandler):
            def handle(self):
                app._session(self.request)

        class Server(socketserver.ThreadingTCPServer):
            allow_reuse_address = True
            daemon_threads = True
            request_queue_size = 128

        self._server = Server((host, port), Handler)
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> tuple[str, int]:
        return self._server.server_address[:2]

    def serve_forever(self) -> None:
        self._server.serve_forever(poll_interval=0.1)

    def start(self) -> "MqttBroker":
        self._thread = threading.Thread(target=self.serve_forever, name="mqtt-broker", daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()

    def _read_group(self, sock, first: bytes, t: Transcript) -> list[MqttPublish]:
        """A publish group; a single-field packet is continued by the next packet."""
        if first[0] != DIALECT_CONTROL:
            # undialected traffic is rejected on the fixed header alone
            return [MqttPublish((), first[0])]
        packets = [MqttPublish.decode(first)]
        if len(packets[0].fields) == 1:
            sock.settimeout(self.continuation_timeout)
            try:
                nxt = read_packet(sock)
            except socket.timeout:
                return packets
            finally:
                sock.settimeout(self.timeout)
            t.add("received", nxt.hex(), Phase.AWAITING_RESPONSE)
            if nxt[0] >> 4 == PUBLISH:
                packets.append(MqttPublish.decode(nxt) if nxt[0] == DIALECT_CONTROL else MqttPublish((), nxt[0]))
        return packets

    def _session(self, sock: socket.socket) -> None:
        sock.settimeout(self.timeout)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        try:
            while True:
                pkt = read_packet(sock)
                kind = pkt[0] >> 4
                if pkt[0] == CONNECT:
                    sock.sendall(CONNACK)
                elif pkt[0] == PINGREQ:
                    sock.sendall(PINGRESP)
                elif pkt[0] == DISCONNECT:
                    break
                elif kind == PUBLISH:
                    t = Transcript("broker")
                    t.add("received", pkt.hex(), Phase.AWAITING_RESPONSE)
                    try:
                        with t.span("handshake"):
                            group = self._read_group(sock, pkt, t)
                            with t.span("srv"):
                                verdict = mqtt_broker_verify(group, self.model, self.tree)
                    except MqttDecodeError as e:
                        verdict = Verdict.reject(RejectReason.DIALECT_MISMATCH, str(e))
                    t.dialect = verdict.predicted
                    if not verdict:
                        t.verdict = verdict.reason.value
                        t.add("local", f"disconnect: {verdict.detail}", Phase.TERMINATED)
                        with self._lock:
                            self.rejected += 1
                        self.transcripts.append(t)
                        break
                    topic, message = mqtt_dialect_decode(verdict.predicted, group)
                    with self._lock:
                        self.accepted += 1
                        self.messages.append((topic.decode(), message))
                    t.request = topic.decode()
                    t.verdict = "accept"
                    self.transcripts.append(t)
                    sock.sendall(PUBACK)
                else:
                    break
        except (OSError, ConnectionError, DialectAuthError) as e:
            log.debug("mqtt session ended: %s", e)
        finally:
            try:
                sock.close()
            except OSError:
                pass


class MqttClient:
    """Minimal publisher. ``publish`` returns True when the broker acknowledged."""

    def __init__(self, address: tuple[str, int], model: MlpModel | None, timeout: float = 5.0):
        self.address = address
        self.model = model
        self.timeout = timeout
        self.sock: socket.socket | None = None

    def connect(self) -> None:
        self.sock = socket.create_connection(self.address, timeout=self.timeout)
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.sock.sendall(connect_packet())
        if read_packet(self.sock)[:1] != CONNACK[:1]:
            raise ConnectionError("no CONNACK")

    def close(self) -> None:
        if self.sock is not None:
            try:
                self.sock.sendall(bytes([DISCONNECT, 0]))
            except OSError:
                pass
            self.sock.close()
            self.sock = None

    def __enter__(self):
        self.connect()
        return self

    def __exit__(self, *exc):
        self.close()

    def publish_raw(self, data: bytes) -> bool:
        try:
            self.sock.sendall(data)
            return read_packet(self.sock) == PUBACK
        except (OSError, ConnectionError, MqttDecodeError):
            return False

    def publish(self, topic: str, message: str | bytes, dialect: int | None = None) -> bool:
        d = dialect if dialect is not None else predict_dialect(self.model, topic)
        return self.publish_raw(b"".join(p.encode() for p in mqtt_dialect_encode(d, topic, message)))
