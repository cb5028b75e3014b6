"""FTP dialect registry, response schemas and the comma/line wire format.

Every dialect keeps the request identical (``get <filename>`` followed by a
``PORT`` step) and varies only the server's reply: its packet layout and
which facts about the request its comma-separated fields encode.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from functools import cached_property
from enum import Enum
from typing import Iterable, Iterator, Mapping, Sequence

from .errors import BadRequest, EmptyResponse, UnknownDialect

MAX_PACKETS = 6
MAX_FIELDS = 4
COST_UNIT = 1000.0
DEFAULT_D7_DELAY = 4.0

FIELD_SEP = ","
PACKET_SEP = "/"

STATUS_EXISTS = "File exists"
STATUS_MISSING = "File does not exist"
CONNECTION_CLOSED = "Connection Closed"

_INT_RE = re.compile(r"-?[0-9]+\Z")


class FieldType(str, Enum):
    STRING = "s"
    INTEGER = "i"


class Direction(str, Enum):
    CLIENT_TO_SERVER = "c2s"
    SERVER_TO_CLIENT = "s2c"


def classify_token(token: str) -> FieldType:
    """Integer iff the whole token is a base-10 literal, optionally negative."""
    return FieldType.INTEGER if _INT_RE.match(token) else FieldType.STRING


@dataclass(frozen=True)
class ResponseSchema:
    packets: tuple[tuple[FieldType, ...], ...]

    def __post_init__(self):
        if not 1 <= len(self.packets) <= MAX_PACKETS:
            raise ValueError(f"packet count {len(self.packets)} outside [1, {MAX_PACKETS}]")
        for p in self.packets:
            if not 1 <= len(p) <= MAX_FIELDS:
                raise ValueError(f"field count {len(p)} outside [1, {MAX_FIELDS}]")

    @cached_property
    def signature(self) -> str:
        return PACKET_SEP.join(FIELD_SEP.join(t.value for t in p) for p in self.packets)

    @classmethod
    def from_signature(cls, sig: str) -> "ResponseSchema":
        return cls(tuple(tuple(FieldType(c) for c in p.split(FIELD_SEP)) for p in sig.split(PACKET_SEP)))

    def __str__(self) -> str:
        return self.signature


@dataclass(frozen=True)
class Field:
    """One response field: ``name`` is the fact it carries, ``type`` its wire type."""

    name: str
    type: FieldType


# Facts a response field can carry. The type is fixed per fact so that a
# dialect's schema follows from its field list.
FIELD_TYPES: dict[str, FieldType] = {
    "exists": FieldType.STRING,  # "File exists"
    "absent": FieldType.STRING,  # "File does not exist" with inverse meaning (dialect 14)
    "flag": FieldType.INTEGER,  # 1 when the file exists
    "size": FieldType.INTEGER,
    "half": FieldType.INTEGER,  # size // 2
    "rest": FieldType.INTEGER,  # size - size // 2
    "negsize": FieldType.INTEGER,  # -(size)
    "filename": FieldType.STRING,
    "command": FieldType.STRING,
    "filename_len": FieldType.INTEGER,
    "command_len": FieldType.INTEGER,
    "closed": FieldType.STRING,  # "Connection Closed"
}

SIZE_FIELDS = frozenset({"size", "half", "rest"})


@dataclass(frozen=True)
class HandshakeStep:
    direction: Direction
    template: str


@dataclass(frozen=True)
class RequestContext:
    """What the two endpoints know about one ``get`` request.

    ``file_size`` is ``None`` on the client, which cannot know it before the
    reply arrives. ``exists`` is only consulted when rendering.
    """

    command: str
    filename: str
    file_size: int | None = None
    exists: bool = True

    def __post_init__(self):
        for label, value in (("command", self.command), ("filename", self.filename)):
            if not value:
                raise BadRequest(f"empty {label}")
            if any(c.isspace() for c in value) or FIELD_SEP in value:
                raise BadRequest(f"{label} may not contain whitespace or commas: {value!r}")
            if _INT_RE.match(value):
                raise BadRequest(f"{label} may not be a bare integer: {value!r}")
        if self.file_size is not None and self.file_size < 0:
            raise BadRequest("file_size must be >= 0")

    @property
    def request_line(self) -> str:
        return f"{self.command} {self.filename}"


@dataclass(frozen=True)
class Dialect:
    id: int
    fields: tuple[tuple[Field, ...], ...]
    cost: float
    delay: float = 0.0

    @cached_property
    def schema(self) -> ResponseSchema:
        return ResponseSchema(tuple(tuple(f.type for f in p) for p in self.fields))

    @property
    def packet_count(self) -> int:
        return len(self.fields)

    @property
    def handshake(self) -> tuple[HandshakeStep, ...]:
        steps = [
            HandshakeStep(Direction.CLIENT_TO_SERVER, "{command} {filename}"),
            HandshakeStep(Direction.CLIENT_TO_SERVER, "PORT {port}"),
        ]
        for p in self.fields:
            tpl = FIELD_SEP.join("{%s}" % f.name for f in p)
            steps.append(HandshakeStep(Direction.SERVER_TO_CLIENT, tpl))
        return tuple(steps)

    @property
    def response_steps(self) -> int:
        return sum(s.direction is Direction.SERVER_TO_CLIENT for s in self.handshake)

    def field_names(self) -> Iterator[str]:
        for p in self.fields:
            for f in p:
                yield f.name


def _dialect(did: int, *packets: Sequence[str], delay: float = 0.0) -> Dialect:
    fields = tuple(tuple(Field(n, FIELD_TYPES[n]) for n in p) for p in packets)
    return Dialect(did, fields, cost=COST_UNIT * len(fields), delay=delay)


class DialectRegistry(Mapping[int, Dialect]):
    """Immutable id -> Dialect mapping with ids 1..M."""

    def __init__(self, dialects: Iterable[Dialect]):
        self._by_id = {d.id: d for d in dialects}
        ids = sorted(self._by_id)
        if len(ids) < 2 or ids != list(range(1, len(ids) + 1)):
            raise ValueError(f"dialect ids must be 1..M with M >= 2, got {ids}")
        sigs = [d.schema.signature for d in self._by_id.values()]
        if len(set(sigs)) != len(sigs):
            raise ValueError("dialect schemas must be pairwise distinct")

    def __getitem__(self, did: int) -> Dialect:
        try:
            return self._by_id[did]
        except KeyError:
            raise UnknownDialect(did) from None

    def __iter__(self) -> Iterator[int]:
        return iter(sorted(self._by_id))

    def __len__(self) -> int:
        return len(self._by_id)

    @property
    def costs(self) -> list[float]:
        return [self._by_id[i].cost for i in self]

    def with_costs(self, overrides: Mapping[int, float]) -> "DialectRegistry":
        out = []
        for did in self:
            d = self._by_id[did]
            if did in overrides:
                c = float(overrides[did])
                if c < 0:
                    raise ValueError(f"negative cost for dialect {did}")
                d = Dialect(d.id, d.fields, c, d.delay)
            out.append(d)
        unknown = set(overrides) - set(self._by_id)
        if unknown:
            raise UnknownDialect(sorted(unknown)[0])
        return DialectRegistry(out)

    def by_signature(self, sig: str) -> Dialect | None:
        for d in self._by_id.values():
            if d.schema.signature == sig:
                return d
        return None

    def manifest(self) -> str:
        lines = ["# id\tcost\tschema\tsteps"]
        for did in self:
            d = self._by_id[did]
            lines.append(f"{d.id}\t{d.cost:g}\t{d.schema.signature}\t{len(d.handshake)}")
        return "\n".join(lines) + "\n"


def register_ftp_dialects(
    d7_delay: float = DEFAULT_D7_DELAY, cost_overrides: Mapping[int, float] | None = None
) -> DialectRegistry:
    """The fifteen FTP reply dialects."""
    reg = DialectRegistry([
        _dialect(1, ["exists", "size"]),
        _dialect(2, ["size", "size"], ["closed"]),
        _dialect(3, ["exists", "size", "filename"]),
        _dialect(4, ["half"], ["rest"]),
        _dialect(5, ["flag", "filename_len", "command_len"], ["size"]),
        _dialect(6, ["exists"], ["filename_len", "command_len"], ["size"]),
        _dialect(7, ["exists"], ["filename_len"], ["command_len"], delay=d7_delay),
        _dialect(8, ["exists", "size", "filename", "command"]),
        _dialect(9, ["exists", "size"], ["filename", "command"]),
        _dialect(10, ["exists"], ["size", "filename", "command"]),
        _dialect(11, ["exists"], ["size"], ["filename", "filename_len"], ["command", "command_len"]),
        _dialect(12, ["size"]),
        _dialect(13, ["exists", "filename", "command"], ["filename_len"]),
        _dialect(14, ["absent"], ["negsize"]),
        _dialect(15, ["exists"], ["size"], ["filename"], ["command"], ["command_len"]),
    ])
    if cost_overrides:
        reg = reg.with_costs(cost_overrides)
    return reg


def field_value(name: str, ctx: RequestContext) -> str:
    """Render one field. A missing file flips the status fields and sends -1 sizes."""
    size = ctx.file_size
    if ctx.exists and size is None:
        raise BadRequest("file_size is required to render a reply")
    if name == "exists":
        return STATUS_EXISTS if ctx.exists else STATUS_MISSING
    if name == "absent":
        return STATUS_MISSING if ctx.exists else STATUS_EXISTS
    if name == "flag":
        return "1" if ctx.exists else "0"
    if name in SIZE_FIELDS:
        if not ctx.exists:
            return "-1"
        if name == "size":
            return str(size)
        half = size // 2
        return str(half if name == "half" else size - half)
    if name == "negsize":
        return f"-{size}" if ctx.exists else "-0"
    if name == "filename":
        return ctx.filename
    if name == "command":
        return ctx.command
    if name == "filename_len":
        return str(len(ctx.filename))
    if name == "command_len":
        return str(len(ctx.command))
    if name == "closed":
        return CONNECTION_CLOSED
    raise KeyError(name)


def render_response(dialect: Dialect, ctx: RequestContext) -> list[str]:
    """One wire message per packet, fields joined by commas."""
    return [FIELD_SEP.join(field_value(f.name, ctx) for f in p) for p in dialect.fields]


def render_by_id(registry: DialectRegistry, did: int, ctx: RequestContext) -> list[str]:
    return render_response(registry[did], ctx)


@dataclass(frozen=True)
class ResponseStructure:
    """A parsed reply: packets of (token, type) pairs."""

    packets: tuple[tuple[tuple[str, FieldType], ...], ...] = field(default_factory=tuple)

    @property
    def packet_count(self) -> int:
        return len(self.packets)

    def types(self) -> tuple[tuple[FieldType, ...], ...]:
        return tuple(tuple(t for _, t in p) for p in self.packets)

    def tokens(self) -> tuple[tuple[str, ...], ...]:
        return tuple(tuple(v for v, _ in p) for p in self.packets)

    @property
    def signature(self) -> str:
        return PACKET_SEP.join(FIELD_SEP.join(t.value for t in p) for p in self.types())

    @property
    def canonical(self) -> str:
        """All packets joined with the packet separator."""
        return PACKET_SEP.join(FIELD_SEP.join(p) for p in self.tokens())


def parse_response(messages: Sequence[str | bytes]) -> ResponseStructure:
    if not messages:
        raise EmptyResponse("no response messages")
    packets = []
    for m in messages:
        if isinstance(m, (bytes, bytearray)):
            m = bytes(m).decode("utf-8", errors="replace")
        packets.append(tuple((tok, classify_token(tok)) for tok in m.split(FIELD_SEP)))
    return ResponseStructure(tuple(packets))
