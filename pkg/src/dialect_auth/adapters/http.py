"""HTTP response dialects. The client authenticates the server.

A dialected reply is a sequence of complete HTTP/1.1 responses on one
connection, each framed by ``Content-Length``; the server closes the
connection after the last one. The dialect model input is the full request
line, e.g. ``GET /index.html HTTP/1.1``.
"""

from __future__ import annotations

import hashlib
import logging
import math
import socket
import socketserver
import threading
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path
from typing import Callable

from ..ddm import MlpModel, predict_dialect
from ..errors import BadRequest
from ..srv import RejectReason, Verdict
from ..transcript import Phase, Transcript, TranscriptLog

log = logging.getLogger(__name__)

DEFAULT_PORT = 8080
N_SEGMENTS = 5
MAX_HEADER = 16384


class HttpDialect(IntEnum):
    MUTATION_OF_RESPONSE_MESSAGE = 1
    FIELD_SHIFTING = 2


N_HTTP_DIALECTS = len(HttpDialect)


def companion(body: bytes) -> bytes:
    """Deterministic second body carried next to the requested one."""
    return b"<!--" + hashlib.sha256(body).hexdigest().encode() + b"-->"


COMPANION_LEN = len(companion(b""))


def split_segments(body: bytes, n: int = N_SEGMENTS) -> list[bytes]:
    """``n`` segments of ``ceil(len/n)`` bytes; the tail segments take what remains."""
    step = math.ceil(len(body) / n) if body else 0
    return [body[i * step : (i + 1) * step] for i in range(n)]


def http_dialect_respond(dialect, resource: bytes) -> list[bytes]:
    """Body of each response packet."""
    d = HttpDialect(dialect)
    if d is HttpDialect.MUTATION_OF_RESPONSE_MESSAGE:
        return split_segments(resource)
    return [resource + companion(resource), b""]


def render_http_response(body: bytes, status: str = "200 OK", content_type: str = "text/html") -> bytes:
    head = f"HTTP/1.1 {status}\r\nContent-Type: {content_type}\r\nContent-Length: {len(body)}\r\n\r\n"
    return head.encode("ascii") + body


@dataclass(frozen=True)
class HttpMessage:
    status: int
    headers: dict
    body: bytes


def parse_http_responses(data: bytes) -> list[HttpMessage]:
    """Split a byte stream into Content-Length framed responses."""
    out, i = [], 0
    while i < len(data):
        end = data.find(b"\r\n\r\n", i)
        if end < 0:
            raise BadRequest("truncated response head")
        lines = data[i:end].decode("latin-1").split("\r\n")
        parts = lines[0].split(" ", 2)
        if len(parts) < 2 or not parts[0].startswith("HTTP/") or not parts[1].isdigit():
            raise BadRequest(f"bad status line {lines[0]!r}")
        headers = {}
        for line in lines[1:]:
            k, sep, v = line.partition(":")
            if not sep:
                raise BadRequest(f"bad header {line!r}")
            headers[k.strip().lower()] = v.strip()
        try:
            n = int(headers["content-length"])
        except (KeyError, ValueError):
            raise BadRequest("missing content-length") from None
        start = end + 4
        if start + n > len(data):
            raise BadRequest("truncated body")
        out.append(HttpMessage(int(parts[1]), headers, data[start : start + n]))
        i = start + n
    return out


def http_client_verify(messages: list[HttpMessage], expected: int) -> tuple[Verdict, bytes | None]:
    """Check the response packets against the expected dialect; returns the body on accept."""
    d = HttpDialect(expected)
    if not messages or any(m.status != 200 for m in messages):
        return Verdict.reject(RejectReason.DIALECT_MISMATCH, "missing or non-200 packets"), None
    bodies = [m.body for m in messages]
    if d is HttpDialect.MUTATION_OF_RESPONSE_MESSAGE:
        if len(bodies) != N_SEGMENTS:
            return Verdict.reject(RejectReason.DIALECT_MISMATCH, f"{len(bodies)} packets, expected 5"), None
        body = b"".join(bodies)
        if bodies != split_segments(body):
            return Verdict.reject(RejectReason.CONTENT_MISMATCH, "segment sizes do not match"), None
    else:
        if len(bodies) != 2 or bodies[1] != b"":
            return Verdict.reject(RejectReason.DIALECT_MISMATCH, "expected a body packet and an empty packet"), None
        first = bodies[0]
        body, tail = first[:-COMPANION_LEN], first[-COMPANION_LEN:]
        if len(first) < COMPANION_LEN or tail != companion(body):
            return Verdict.reject(RejectReason.CONTENT_MISMATCH, "companion body does not match"), None
    return Verdict(True, None, int(d), exists=True, announced_size=len(body)), body


def _recv_until_close(sock: socket.socket) -> bytes:
    chunks = []
    while chunk := sock.recv(65536):
        chunks.append(chunk)
    return b"".join(chunks)


# ------------------------------------------------------------------ server

Responder = Callable[[str, bytes], list[bytes]]  # (request line, resource) -> raw packets


def dialect_responder(model: MlpModel, fixed_dialect: int | None = None) -> Responder:
    def respond(request_line: str, resource: bytes) -> list[bytes]:
        d = fixed_dialect if fixed_dialect is not None else predict_dialect(model, request_line)
        return [render_http_response(b) for b in http_dialect_respond(d, resource)]

    return respond


def plain_responder(request_line: str, resource: bytes) -> list[bytes]:
    return [render_http_response(resource)]


class HttpServer:
    """One GET per connection, then close."""

    def __init__(self, responder: Responder, file_root, host: str = "127.0.0.1", port: int = DEFAULT_PORT, timeout: float = 10.0):
        self.responder = responder
        self.file_root = Path(file_root).resolve()
        self.timeout = timeout
        self.transcripts = TranscriptLog()
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

    def start(self) -> "HttpServer":
        self._thread = threading.Thread(target=self.serve_forever, name="http-server", daemon=True)
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

    def _session(self, sock: socket.socket) -> None:
        sock.settimeout(self.timeout)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        try:
            buf = b""
            while b"\r\n\r\n" not in buf:
                chunk = sock.recv(4096)
                if not chunk or len(buf) > MAX_HEADER:
                    return
                buf += chunk
            request_line = buf.split(b"\r\n", 1)[0].decode("latin-1")
            t = Transcript("server", request=request_line)
            t.add("received", request_line, Phase.AWAITING_RESPONSE)
            parts = request_line.split(" ")
            if len(parts) != 3 or parts[0] != "GET" or not parts[1].startswith("/"):
                sock.sendall(render_http_response(b"", "400 Bad Request"))
                return
            path = (self.file_root / parts[1].lstrip("/")).resolve()
            if path.parent != self.file_root or not path.is_file():
                sock.sendall(render_http_response(b"", "404 Not Found"))
                t.verdict = "not found"
                self.transcripts.append(t)
                return
            with t.span("handshake"):
                for pkt in self.responder(request_line, path.read_bytes()):
                    sock.sendall(pkt)
                    t.add("sent", pkt, Phase.TRANSFERRING)
            t.verdict = "sent"
            self.transcripts.append(t)
        except OSError as e:
            log.debug("http session ended: %s", e)
        finally:
            try:
                sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            sock.close()


# ------------------------------------------------------------------ client


@dataclass
class HttpResult:
    status: str  # "ok", "not_found" or "terminated"
    body: bytes | None = None
    reason: str | None = None
    dialect: int | None = None
    transcript: Transcript | None = None

    @property
    def ok(self) -> bool:
        return self.status == "ok"


def http_get(
    address: tuple[str, int],
    path: str,
    model: MlpModel | None,
    verify: bool = True,
    timeout: float = 10.0,
    fixed_dialect: int | None = None,
) -> HttpResult:
    request_line = f"GET {path} HTTP/1.1"
    t = Transcript("client", request=request_line)
    with t.span("total"):
        if verify:
            with t.span("ddm"):
                d = fixed_dialect if fixed_dialect is not None else predict_dialect(model, request_line)
            t.dialect = d
        try:
            with socket.create_connection(address, timeout=timeout) as sock:
                host = f"{address[0]}:{address[1]}"
                sock.sendall(f"{request_line}\r\nHost: {host}\r\nConnection: close\r\n\r\n".encode())
                t.add("sent", request_line, Phase.AWAITING_RESPONSE)
                with t.span("handshake"):
                    data = _recv_until_close(sock)
            messages = parse_http_responses(data)
        except (OSError, BadRequest) as e:
            t.verdict = "IoError"
            return HttpResult("terminated", reason="IoError", dialect=t.dialect, transcript=t)
        for m in messages:
            t.add("received", f"{m.status} {len(m.body)} bytes", Phase.AWAITING_RESPONSE)
        if len(messages) == 1 and messages[0].status == 404:
            t.verdict = "not found"
            return HttpResult("not_found", dialect=t.dialect, transcript=t)
        if not verify:
            t.verdict = "accept"
            return HttpResult("ok", body=b"".join(m.body for m in messages), transcript=t)
        with t.span("srv"):
            verdict, body = http_client_verify(messages, d)
    if not verdict:
        t.verdict = verdict.reason.value
        return HttpResult("terminated", reason=verdict.reason.value, dialect=d, transcript=t)
    t.verdict = "accept"
    return HttpResult("ok", body=body, dialect=d, transcript=t)
