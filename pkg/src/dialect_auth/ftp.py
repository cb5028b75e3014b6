"""Dialected FTP ``get`` over TCP.

Control channel: CRLF-terminated text lines. A request is ``get <filename>``
followed by ``PORT h1,h2,h3,h4,p1,p2``; the server answers ``200`` to the
PORT step and then sends the dialect reply, one line per packet. The client
either acknowledges with ``Ready to receive the file.`` (the server then
connects to the announced data port, streams the file and confirms with
``226``) or closes everything.
"""

from __future__ import annotations

import logging
import select
import socket
import socketserver
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol

from .ddm import MlpModel, predict_dialect
from .dialects import (
    DialectRegistry,
    RequestContext,
    ResponseStructure,
    classify_token,
    parse_response,
    render_response,
)
from .errors import BadRequest
from .srv import DecisionTree, RejectReason, Verdict, verify_response
from .transcript import Phase, Transcript, TranscriptLog

log = logging.getLogger(__name__)

DEFAULT_PORT = 2121
GREETING = "220 Service ready"
READY = "Ready to receive the file."
NOFILE_ACK = "File not found, acknowledged."
TRANSFER_DONE = "226 Transfer complete"
MAX_LINE = 8192


class LineChannel:
    """Buffered CRLF line reader/writer on a connected socket."""

    def __init__(self, sock: socket.socket):
        self.sock = sock
        self._buf = bytearray()
        self._eof = False

    def send_line(self, text: str) -> None:
        self.sock.sendall(text.encode("utf-8") + b"\r\n")

    def _take_line(self) -> str | None:
        i = self._buf.find(b"\n")
        if i < 0:
            return None
        raw = bytes(self._buf[:i])
        del self._buf[: i + 1]
        return raw.rstrip(b"\r").decode("utf-8", errors="replace")

    def read_line(self, timeout: float | None = None) -> str | None:
        """Next line, or None on EOF. Raises ``socket.timeout`` after ``timeout`` seconds."""
        deadline = None if timeout is None else time.monotonic() + timeout
        while True:
            line = self._take_line()
            if line is not None:
                return line
            if self._eof:
                return None
            if len(self._buf) > MAX_LINE:
                raise BadRequest("line too long")
            if deadline is not None:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise socket.timeout("line read timed out")
                self.sock.settimeout(remaining)
            else:
                self.sock.settimeout(None)
            chunk = self.sock.recv(65536)
            if not chunk:
                self._eof = True
            self._buf += chunk

    def drain_available(self) -> list[str]:
        """Complete lines that have already arrived, without blocking."""
        while not self._eof:
            ready, _, _ = select.select([self.sock], [], [], 0)
            if not ready:
                break
            chunk = self.sock.recv(65536)
            if not chunk:
                self._eof = True
            self._buf += chunk
        out = []
        while (line := self._take_line()) is not None:
            out.append(line)
        return out

    def close(self) -> None:
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


def parse_request(line: str) -> RequestContext:
    """``get <filename>`` -> RequestContext; any other shape raises BadRequest."""
    parts = line.split(" ")
    if len(parts) != 2 or parts[0].lower() != "get":
        raise BadRequest(f"expected 'get <filename>', got {line!r}")
    return RequestContext(parts[0], parts[1])


def format_port(host: str, port: int) -> str:
    return "PORT " + ",".join(host.split(".") + [str(port >> 8), str(port & 0xFF)])


def parse_port(line: str) -> tuple[str, int]:
    cmd, _, arg = line.partition(" ")
    nums = arg.split(",")
    if cmd.upper() != "PORT" or len(nums) != 6:
        raise BadRequest(f"bad PORT line {line!r}")
    try:
        vals = [int(v) for v in nums]
    except ValueError:
        raise BadRequest(f"bad PORT line {line!r}") from None
    if any(not 0 <= v <= 255 for v in vals):
        raise BadRequest(f"bad PORT line {line!r}")
    return ".".join(map(str, vals[:4])), vals[4] * 256 + vals[5]


# ------------------------------------------------------------------ server


@dataclass
class Reply:
    """What a server sends for one request."""

    messages: list[str]
    dialect: int | None = None
    packet_delay: float = 0.0
    close_after: bool = False
    data: bytes | None = None  # overrides the file contents (attacker servers)
    push: bool = False  # stream the data and send 226 without waiting for an ack


class Responder(Protocol):
    def __call__(self, ctx: RequestContext, transcript: Transcript) -> Reply: ...


class DialectResponder:
    """Genuine server behaviour: predict the dialect, render its reply."""

    def __init__(
        self,
        registry: DialectRegistry,
        model: MlpModel | None,
        fixed_dialect: int | None = None,
        time_model: bool = False,
    ):
        if model is None and (fixed_dialect is None or time_model):
            raise ValueError("need a model or a fixed dialect")
        self.registry = registry
        self.model = model
        self.fixed_dialect = fixed_dialect
        self.time_model = time_model  # run inference even when the dialect is fixed (benchmarks)

    def __call__(self, ctx: RequestContext, transcript: Transcript) -> Reply:
        did = self.fixed_dialect
        if did is None or self.time_model:
            with transcript.span("ddm"):
                predicted = predict_dialect(self.model, ctx.request_line)
            did = predicted if did is None else did
        d = self.registry[did]
        msgs = render_response(d, ctx)
        return Reply(
            msgs,
            dialect=did,
            packet_delay=d.delay / len(msgs),
            close_after=any(name == "closed" for name in d.field_names()),
        )


class FtpServer:
    """Threaded control-channel server; one sequential session per connection."""

    def __init__(
        self,
        responder: Responder,
        file_root,
        host: str = "127.0.0.1",
        port: int = DEFAULT_PORT,
        credentials: tuple[str, str] | None = None,
        timeout: float = 30.0,
    ):
        self.responder = responder
        self.file_root = Path(file_root).resolve()
        self.credentials = credentials
        self.timeout = timeout
        self.transcripts = TranscriptLog()
        app = self

        class Handler(socketserver.BaseRequestHandler):
            def handle(self):
                app._session(self.request, self.client_address)

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

    def start(self) -> "FtpServer":
        self._thread = threading.Thread(target=self.serve_forever, name="ftp-server", daemon=True)
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

    def _resolve(self, filename: str) -> Path | None:
        path = (self.file_root / filename).resolve()
        if path.parent != self.file_root or not path.is_file():
            return None
        return path

    def _session(self, sock: socket.socket, peer) -> None:
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        ch = LineChannel(sock)
        phase = Phase.AWAITING_LOGIN if self.credentials else Phase.IDLE
        user = None
        try:
            ch.send_line(GREETING)
            while True:
                line = ch.read_line(self.timeout)
                if line is None:
                    break
                cmd, _, arg = line.partition(" ")
                verb = cmd.lower()
                if verb == "user":
                    user = arg
                    ch.send_line("331 Password required")
                elif verb == "pass":
                    if self.credentials is None or (user, arg) == self.credentials:
                        phase = Phase.IDLE
                        ch.send_line("230 Login successful")
                    else:
                        ch.send_line("530 Login incorrect")
                elif verb in ("quit", "bye"):
                    ch.send_line("221 Goodbye")
                    break
                elif verb == "get":
                    if phase is Phase.AWAITING_LOGIN:
                        ch.send_line("530 Please login with USER and PASS")
                        continue
                    if not self._handle_get(ch, line):
                        break
                elif verb == "port":
                    ch.send_line("503 PORT must follow a get request")
                else:
                    ch.send_line("500 Syntax error, command unrecognized")
        except (OSError, BadRequest) as e:
            log.debug("session %s ended: %s", peer, e)
        finally:
            ch.close()

    def _handle_get(self, ch: LineChannel, line: str) -> bool:
        """Serve one request. Returns False when the control connection should close."""
        t = Transcript("server", request=line)
        t.add("received", line, Phase.AWAITING_RESPONSE)
        try:
            ctx = parse_request(line)
        except BadRequest:
            ch.send_line("501 Syntax error in parameters")
            return True
        port_line = ch.read_line(self.timeout)
        if port_line is None:
            return False
        t.add("received", port_line, Phase.AWAITING_RESPONSE)
        try:
            data_addr = parse_port(port_line)
        except BadRequest:
            ch.send_line("501 Bad PORT command")
            return True
        ch.send_line("200 PORT command successful")
        t.add("sent", "200 PORT command successful", Phase.AWAITING_RESPONSE)

        path = self._resolve(ctx.filename)
        size = path.stat().st_size if path else None
        ctx = RequestContext(ctx.command, ctx.filename, size, exists=path is not None)
        keep_open = True
        with t.span("handshake"):
            reply = self.responder(ctx, t)
            t.dialect = reply.dialect
            for msg in reply.messages:
                if reply.packet_delay:
                    time.sleep(reply.packet_delay)
                ch.send_line(msg)
                t.add("sent", msg, Phase.AWAITING_RESPONSE)
            if reply.push:
                self._push(ch, reply, path, data_addr, t)
                self.transcripts.append(t)
                return True
            ack = ch.read_line(self.timeout)
            if ack is None:
                t.verdict = "client closed"
                keep_open = False
            else:
                t.add("received", ack, Phase.AWAITING_RESPONSE)
                if ack == READY:
                    data = reply.data if reply.data is not None else (path.read_bytes() if path else b"")
                    with socket.create_connection(data_addr, timeout=self.timeout) as ds:
                        ds.sendall(data)
                    t.add("data", f"{len(data)} bytes", Phase.TRANSFERRING)
                    ch.send_line(TRANSFER_DONE)
                    t.add("sent", TRANSFER_DONE, Phase.IDLE)
                    t.verdict = "transferred"
                elif ack == NOFILE_ACK:
                    t.verdict = "not found"
                else:
                    t.verdict = f"unexpected ack {ack!r}"
                    keep_open = False
        self.transcripts.append(t)
        return keep_open and not reply.close_after


    def _push(self, ch, reply, path, data_addr, t) -> None:
        data = reply.data if reply.data is not None else (path.read_bytes() if path else b"")
        try:
            with socket.create_connection(data_addr, timeout=self.timeout) as ds:
                ds.sendall(data)
            t.add("data", f"{len(data)} bytes", Phase.TRANSFERRING)
        except OSError as e:
            t.add("local", f"data channel failed: {e}", Phase.TRANSFERRING)
        ch.send_line(TRANSFER_DONE)
        t.add("sent", TRANSFER_DONE, Phase.IDLE)
        t.verdict = "pushed"


def server_serve(
    bind_addr: str,
    port: int,
    registry: DialectRegistry,
    model: MlpModel,
    file_root,
    credentials: tuple[str, str] | None = None,
) -> None:
    """Run a genuine dialect server until interrupted."""
    server = FtpServer(DialectResponder(registry, model), file_root, bind_addr, port, credentials)
    log.info("serving %s on %s:%d", file_root, *server.address)
    try:
        server.serve_forever()
    finally:
        server._server.server_close()


# ------------------------------------------------------------------ client


@dataclass
class TransferResult:
    status: str  # "ok", "not_found" or "terminated"
    data: bytes | None = None
    reason: str | None = None
    dialect: int | None = None
    transcript: Transcript | None = None
    verdict: Verdict | None = None

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    @property
    def terminated(self) -> bool:
        return self.status == "terminated"


def _prefix_consistent(messages: list[str], expected) -> bool:
    packets = expected.schema.packets
    if len(messages) > len(packets):
        return False
    for msg, types in zip(messages, packets):
        if tuple(classify_token(tok) for tok in msg.split(",")) != types:
            return False
    return True


class FtpClient:
    """One control session. A rejected reply terminates the whole session."""

    def __init__(
        self,
        address: tuple[str, int],
        registry: DialectRegistry,
        model: MlpModel | None,
        tree: DecisionTree | None,
        user: str | None = None,
        password: str | None = None,
        response_timeout: float = 10.0,
        verify: bool = True,
        fixed_dialect: int | None = None,
        on_dialect: Callable[[str, int], None] | None = None,
        time_model: bool = False,
    ):
        if verify and tree is None:
            raise ValueError("verification needs a decision tree")
        self.address = address
        self.registry = registry
        self.model = model
        self.tree = tree
        self.user = user
        self.password = password
        self.response_timeout = response_timeout
        self.verify = verify
        self.fixed_dialect = fixed_dialect
        self.on_dialect = on_dialect
        self.time_model = time_model
        self.phase = Phase.AWAITING_LOGIN
        self.history: list[Transcript] = []
        self._ch: LineChannel | None = None
        self._reconnect = False

    def __enter__(self):
        self.connect()
        return self

    def __exit__(self, *exc):
        self.close()

    def _expect(self, prefix: str) -> str:
        line = self._ch.read_line(self.response_timeout)
        if line is None or not line.startswith(prefix):
            raise ConnectionError(f"expected {prefix!r}, got {line!r}")
        return line

    def connect(self) -> None:
        sock = socket.create_connection(self.address, timeout=self.response_timeout)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._ch = LineChannel(sock)
        self._expect("220")
        self.phase = Phase.AWAITING_LOGIN
        if self.user is not None:
            self._ch.send_line(f"USER {self.user}")
            self._expect("331")
            self._ch.send_line(f"PASS {self.password or ''}")
            self._expect("230")
        self.phase = Phase.IDLE
        self._reconnect = False

    def close(self) -> None:
        if self._ch is not None:
            if self.phase is not Phase.TERMINATED:
                try:
                    self._ch.send_line("quit")
                except OSError:
                    pass
            self._ch.close()
            self._ch = None

    def _terminate(self, t: Transcript, reason: str, listener, verdict=None) -> TransferResult:
        t.verdict = reason
        t.add("local", f"session terminated: {reason}", Phase.TERMINATED)
        self.phase = Phase.TERMINATED
        listener.close()
        if self._ch is not None:
            self._ch.close()
            self._ch = None
        return TransferResult("terminated", reason=reason, dialect=t.dialect, transcript=t, verdict=verdict)

    def get(self, request: str) -> TransferResult:
        ctx = parse_request(request)
        t = Transcript("client", request=ctx.request_line)
        self.history.append(t)
        if self.phase is Phase.TERMINATED:
            t.verdict = "SessionTerminated"
            return TransferResult("terminated", reason="SessionTerminated", transcript=t)
        if self._ch is None or self._reconnect:
            if self._ch is not None:
                self._ch.close()
            self.connect()
        listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        try:
            with t.span("handshake"):
                return self._get(ctx, t, listener)
        except (OSError, BadRequest, ConnectionError) as e:
            log.debug("io failure during %s: %s", ctx.request_line, e)
            return self._terminate(t, "IoError", listener)
        finally:
            listener.close()

    @staticmethod
    def _closes(dialect) -> bool:
        return any(name == "closed" for name in dialect.field_names())

    def _get(self, ctx: RequestContext, t: Transcript, listener: socket.socket) -> TransferResult:
        ch = self._ch
        n = self.fixed_dialect
        if n is None or self.time_model:
            with t.span("ddm"):
                predicted = predict_dialect(self.model, ctx.request_line)
            n = predicted if n is None else n
        t.dialect = n
        if self.on_dialect:
            self.on_dialect(ctx.request_line, n)
        expected = self.registry[n]

        local_ip = ch.sock.getsockname()[0]
        listener.bind((local_ip, 0))
        listener.listen(1)
        ch.send_line(ctx.request_line)
        t.add("sent", ctx.request_line, Phase.IDLE)
        port_line = format_port(local_ip, listener.getsockname()[1])
        ch.send_line(port_line)
        t.add("sent", port_line, Phase.AWAITING_RESPONSE)
        self.phase = Phase.AWAITING_RESPONSE
        ack = ch.read_line(self.response_timeout)
        if ack is None or not ack.startswith("200"):
            return self._terminate(t, "ProtocolError", listener)
        t.add("received", ack, Phase.AWAITING_RESPONSE)

        messages: list[str] = []
        while len(messages) < expected.packet_count:
            try:
                line = ch.read_line(self.response_timeout)
            except socket.timeout:
                break
            if line is None:
                break
            messages.append(line)
            t.add("received", line, Phase.AWAITING_RESPONSE)
            if self.verify and not _prefix_consistent(messages, expected):
                break
        for extra in ch.drain_available():
            messages.append(extra)
            t.add("received", extra, Phase.AWAITING_RESPONSE)

        if self.verify:
            with t.span("srv"):
                if messages:
                    verdict = verify_response(self.tree, parse_response(messages), n, ctx, self.registry)
                else:
                    verdict = Verdict.reject(RejectReason.DIALECT_MISMATCH, "no reply")
            if not verdict:
                log.info("%s: %s (%s)", ctx.request_line, verdict.reason.value, verdict.detail)
                return self._terminate(t, verdict.reason.value, listener, verdict)
        else:
            verdict = Verdict(True, exists=True)

        if verdict.exists is False:
            ch.send_line(NOFILE_ACK)
            t.add("sent", NOFILE_ACK, Phase.IDLE)
            t.verdict = "accept"
            self.phase = Phase.IDLE
            self._reconnect = self._closes(expected)
            return TransferResult("not_found", dialect=n, transcript=t, verdict=verdict)

        ch.send_line(READY)
        t.add("sent", READY, Phase.TRANSFERRING)
        self.phase = Phase.TRANSFERRING
        listener.settimeout(self.response_timeout)
        conn, _ = listener.accept()
        chunks = []
        with conn:
            conn.settimeout(self.response_timeout)
            while chunk := conn.recv(65536):
                chunks.append(chunk)
        data = b"".join(chunks)
        t.add("data", f"{len(data)} bytes", Phase.TRANSFERRING)
        done = ch.read_line(self.response_timeout)
        if done != TRANSFER_DONE:
            # a trailing reply packet arriving late lands here
            return self._terminate(t, RejectReason.DIALECT_MISMATCH.value, listener)
        t.add("received", done, Phase.IDLE)
        if verdict.announced_size is not None and len(data) != verdict.announced_size:
            return self._terminate(t, RejectReason.CONTENT_MISMATCH.value, listener)
        t.add("local", "Connection closed, file received.", Phase.IDLE)
        t.verdict = "accept"
        self.phase = Phase.IDLE
        self._reconnect = self._closes(expected)
        return TransferResult("ok", data=data, dialect=n, transcript=t, verdict=verdict)


def client_get(
    server_addr: tuple[str, int],
    request: str,
    registry: DialectRegistry,
    model: MlpModel | None,
    tree: DecisionTree | None,
    **kwargs,
) -> TransferResult:
    """Connect, log in, fetch one file, disconnect."""
    t0 = time.perf_counter()
    client = FtpClient(server_addr, registry, model, tree, **kwargs)
    try:
        client.connect()
    except OSError as e:
        t = Transcript("client", request=request)
        t.verdict = "IoError"
        return TransferResult("terminated", reason="IoError", transcript=t)
    try:
        result = client.get(request)
    finally:
        client.close()
    if result.transcript is not None:
        result.transcript.spans["total"] = time.perf_counter() - t0
    return result
