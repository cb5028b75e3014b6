"""Response structure verification with a CART decision tree.

A reply is reduced to 31 structural features (packet count, then per packet
slot its field count and field type codes). A Gini-split binary tree maps
those features to the dialect that produces that structure. The client
accepts a reply only if the tree names the dialect it expected and the field
contents agree with what it already knows about its own request.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from functools import lru_cache
from typing import Sequence

import numpy as np

from .dialects import (
    CONNECTION_CLOSED,
    MAX_FIELDS,
    MAX_PACKETS,
    STATUS_EXISTS,
    STATUS_MISSING,
    Dialect,
    DialectRegistry,
    FieldType,
    RequestContext,
    ResponseStructure,
    register_ftp_dialects,
)
from .errors import (
    BadMagic,
    DialectAuthError,
    EmptyDataset,
    EmptyNode,
    MalformedTree,
    TooManyFields,
    TooManyPackets,
    TruncatedFile,
)

N_FEATURES = 1 + MAX_PACKETS * (1 + MAX_FIELDS)
TYPE_CODES = {FieldType.STRING: 1, FieldType.INTEGER: 2}


def extract_features(resp: ResponseStructure) -> np.ndarray:
    n = resp.packet_count
    if n < 1:
        raise ValueError("response has no packets")
    if n > MAX_PACKETS:
        raise TooManyPackets(n)
    out = np.zeros(N_FEATURES, dtype=np.float32)
    out[0] = n
    for k, types in enumerate(resp.types()):
        if len(types) > MAX_FIELDS:
            raise TooManyFields(len(types))
        base = 1 + k * (1 + MAX_FIELDS)
        out[base] = len(types)
        for j, t in enumerate(types):
            out[base + 1 + j] = TYPE_CODES[t]
    return out


def gini(class_counts: Sequence[float]) -> float:
    c = np.asarray(class_counts, dtype=np.float64)
    total = c.sum()
    if total <= 0 or np.any(c < 0):
        raise EmptyNode("gini of an empty node")
    p = c / total
    return float(1.0 - np.sum(p * p))


# --------------------------------------------------------------------- tree

LEAF, SPLIT = 1, 0


@dataclass(frozen=True)
class Node:
    kind: int
    attribute: int = 0
    threshold: float = 0.0
    left: int = 0
    right: int = 0
    klass: int = 0

    @property
    def is_leaf(self) -> bool:
        return self.kind == LEAF


class DecisionTree:
    """Array of nodes, root at index 0."""

    def __init__(self, nodes: Sequence[Node]):
        self.nodes = tuple(nodes)
        self._validate()

    def _validate(self):
        n = len(self.nodes)
        if n == 0:
            raise MalformedTree("tree has no nodes")
        seen = set()
        stack = [0]
        while stack:
            i = stack.pop()
            if i in seen:
                raise MalformedTree(f"node {i} reachable twice")
            seen.add(i)
            node = self.nodes[i]
            if node.kind == LEAF:
                continue
            if node.kind != SPLIT:
                raise MalformedTree(f"node {i} has unknown kind {node.kind}")
            for child in (node.left, node.right):
                if not 0 <= child < n:
                    raise MalformedTree(f"node {i} child {child} out of range")
                stack.append(child)
            if not 0 <= node.attribute < 2**16:
                raise MalformedTree(f"node {i} attribute {node.attribute}")

    def __len__(self):
        return len(self.nodes)

    def __eq__(self, other):
        return isinstance(other, DecisionTree) and self.nodes == other.nodes

    @property
    def depth(self) -> int:
        def d(i):
            node = self.nodes[i]
            return 0 if node.is_leaf else 1 + max(d(node.left), d(node.right))

        return d(0)


def predict_tree(tree: DecisionTree, features) -> int:
    nodes = tree.nodes
    i = 0
    for _ in range(len(nodes) + 1):
        node = nodes[i]
        if node.kind == LEAF:
            return node.klass
        i = node.left if features[node.attribute] < node.threshold else node.right
        if not 0 <= i < len(nodes):
            raise MalformedTree(f"child index {i} out of range")
    raise MalformedTree("cycle detected")


def _midpoint(lo: float, hi: float) -> float:
    """float32 threshold strictly above ``lo`` and at most ``hi``."""
    lo32, hi32 = np.float32(lo), np.float32(hi)
    thr = np.float32((float(lo32) + float(hi32)) / 2.0)
    if thr <= lo32:
        thr = np.nextafter(lo32, np.float32(np.inf))
    return float(thr)


def _best_split(x: np.ndarray, y: np.ndarray, n_classes: int):
    """Split maximizing sum over children of (sum of squared counts / size).

    That quantity is n * (1 - weighted child Gini), so maximizing it minimizes
    the weighted Gini. Near-ties are settled with exact rational arithmetic;
    exact ties go to the lowest attribute, then the lowest threshold.
    """
    n = len(y)
    onehot = np.zeros((n, n_classes), dtype=np.int64)
    onehot[np.arange(n), y - 1] = 1
    candidates = []  # (score float, attribute, position info)
    best_score = -np.inf
    for f in range(x.shape[1]):
        col = x[:, f]
        order = np.argsort(col, kind="stable")
        v = col[order]
        bounds = np.nonzero(v[1:] != v[:-1])[0]  # split after these sorted positions
        if bounds.size == 0:
            continue
        cum = np.cumsum(onehot[order], axis=0)
        left = cum[bounds]
        right = cum[-1] - left
        n_l = (bounds + 1).astype(np.float64)
        n_r = n - n_l
        s_l = (left * left).sum(axis=1).astype(np.float64)
        s_r = (right * right).sum(axis=1).astype(np.float64)
        score = s_l / n_l + s_r / n_r
        top = score.max()
        if top < best_score - 1e-9 * max(1.0, abs(best_score)):
            continue
        best_score = max(best_score, top)
        near = np.nonzero(score >= top - 1e-9 * max(1.0, abs(top)))[0]
        for j in near:
            b = bounds[j]
            candidates.append((f, int(b), v[b], v[b + 1], left[j], right[j]))
    if not candidates:
        return None
    best = None
    for f, b, lo, hi, lc, rc in candidates:
        nl, nr = b + 1, n - b - 1
        exact = Fraction(int((lc * lc).sum()), nl) + Fraction(int((rc * rc).sum()), nr)
        if best is None or exact > best[0]:
            best = (exact, f, lo, hi)
    _, f, lo, hi = best
    return f, _midpoint(lo, hi)


def _majority(y: np.ndarray, n_classes: int) -> int:
    counts = np.bincount(y, minlength=n_classes + 1)[1:]
    return int(np.argmax(counts)) + 1


def train_tree(
    features,
    labels,
    max_depth: int | None = 16,
    min_samples_split: int = 2,
    n_classes: int | None = None,
) -> DecisionTree:
    """Greedy CART with Gini splits; ``max_depth=None`` means unlimited."""
    x = np.asarray(features, dtype=np.float32)
    y = np.asarray(labels, dtype=np.int64)
    if len(y) == 0:
        raise EmptyDataset("no training samples")
    if x.ndim != 2 or len(x) != len(y):
        raise ValueError("features must be (n, d) with one label per row")
    if y.min() < 1:
        raise ValueError("labels must be >= 1")
    n_classes = n_classes or int(y.max())
    nodes: list[Node | None] = []

    def build(idx: np.ndarray, depth: int) -> int:
        me = len(nodes)
        nodes.append(None)
        ys = y[idx]
        pure = np.all(ys == ys[0])
        stop = pure or (max_depth is not None and depth >= max_depth) or len(idx) < min_samples_split
        split = None if stop else _best_split(x[idx], ys, n_classes)
        if split is None:
            nodes[me] = Node(LEAF, klass=_majority(ys, n_classes))
            return me
        attr, thr = split
        go_left = x[idx, attr] < thr
        left = build(idx[go_left], depth + 1)
        right = build(idx[~go_left], depth + 1)
        nodes[me] = Node(SPLIT, attribute=attr, threshold=thr, left=left, right=right)
        return me

    build(np.arange(len(y)), 0)
    return DecisionTree(nodes)


def tree_accuracy(tree: DecisionTree, features, labels) -> float:
    x = np.asarray(features, dtype=np.float32)
    y = np.asarray(labels)
    hits = sum(predict_tree(tree, row) == lab for row, lab in zip(x, y))
    return hits / len(y)


# ---------------------------------------------------------------- file format

TREE_MAGIC = b"VPDT"
TREE_VERSION = 1
_TREE_HEADER = struct.Struct("<4sHI")
_NODE = struct.Struct("<BHfIIH")


def save_tree(tree: DecisionTree) -> bytes:
    parts = [_TREE_HEADER.pack(TREE_MAGIC, TREE_VERSION, len(tree.nodes))]
    for nd in tree.nodes:
        parts.append(_NODE.pack(nd.kind, nd.attribute, nd.threshold, nd.left, nd.right, nd.klass))
    return b"".join(parts)


def load_tree(data: bytes) -> DecisionTree:
    if len(data) < 4 or data[:4] != TREE_MAGIC:
        raise BadMagic("not a decision tree file")
    if len(data) < _TREE_HEADER.size:
        raise TruncatedFile("header cut short")
    _, version, count = _TREE_HEADER.unpack_from(data)
    if version != TREE_VERSION:
        raise MalformedTree(f"unsupported tree version {version}")
    expected = _TREE_HEADER.size + count * _NODE.size
    if len(data) < expected:
        raise TruncatedFile(f"expected {expected} bytes, got {len(data)}")
    if len(data) > expected:
        raise MalformedTree(f"{len(data) - expected} trailing bytes")
    nodes = []
    for k in range(count):
        kind, attr, thr, left, right, klass = _NODE.unpack_from(data, _TREE_HEADER.size + k * _NODE.size)
        nodes.append(Node(kind, attr, thr, left, right, klass))
    return DecisionTree(nodes)


def write_tree(tree: DecisionTree, path) -> None:
    from .io import atomic_write_bytes

    atomic_write_bytes(path, save_tree(tree))


def read_tree(path) -> DecisionTree:
    with open(path, "rb") as f:
        return load_tree(f.read())


# ---------------------------------------------------------------- verification


class RejectReason(str, Enum):
    DIALECT_MISMATCH = "DialectMismatch"
    CONTENT_MISMATCH = "ContentMismatch"


@dataclass(frozen=True)
class Verdict:
    accepted: bool
    reason: RejectReason | None = None
    predicted: int | None = None
    detail: str = ""
    exists: bool | None = None
    announced_size: int | None = None

    def __bool__(self):
        return self.accepted

    @classmethod
    def reject(cls, reason: RejectReason, detail: str = "", predicted: int | None = None) -> "Verdict":
        return cls(False, reason, predicted, detail)


@lru_cache(maxsize=1)
def _default_registry() -> DialectRegistry:
    return register_ftp_dialects()


def _as_int(token: str) -> int:
    return int(token)


def check_content(dialect: Dialect, resp: ResponseStructure, ctx: RequestContext):
    """Field-level checks against the request; returns (exists, size) or an error string."""
    existence: set[bool] = set()
    sizes: dict[str, int] = {}
    for fields, tokens in zip(dialect.fields, resp.tokens()):
        for f, tok in zip(fields, tokens):
            name = f.name
            if name == "exists":
                if tok not in (STATUS_EXISTS, STATUS_MISSING):
                    return f"unexpected status text {tok!r}"
                existence.add(tok == STATUS_EXISTS)
            elif name == "absent":
                if tok not in (STATUS_EXISTS, STATUS_MISSING):
                    return f"unexpected status text {tok!r}"
                existence.add(tok == STATUS_MISSING)
            elif name == "flag":
                if tok not in ("0", "1"):
                    return f"existence flag {tok!r}"
                existence.add(tok == "1")
            elif name in ("size", "half", "rest"):
                v = _as_int(tok)
                if v < -1:
                    return f"{name} {v} below -1"
                existence.add(v >= 0)
                if name in sizes and sizes[name] != v:
                    return f"repeated {name} fields disagree"
                sizes[name] = v
            elif name == "negsize":
                if not tok.startswith("-"):
                    return f"negated size {tok!r} lacks a sign"
                sizes[name] = -_as_int(tok)
            elif name == "filename":
                if tok != ctx.filename:
                    return f"filename {tok!r} != {ctx.filename!r}"
            elif name == "command":
                if tok != ctx.command:
                    return f"command {tok!r} != {ctx.command!r}"
            elif name == "filename_len":
                if _as_int(tok) != len(ctx.filename):
                    return f"filename length {tok} != {len(ctx.filename)}"
            elif name == "command_len":
                if _as_int(tok) != len(ctx.command):
                    return f"command length {tok} != {len(ctx.command)}"
            elif name == "closed":
                if tok != CONNECTION_CLOSED:
                    return f"closing text {tok!r}"
    if len(existence) > 1:
        return "fields disagree on whether the file exists"
    exists = existence.pop() if existence else True
    size = None
    if exists:
        if "size" in sizes:
            size = sizes["size"]
        elif "half" in sizes:
            half, rest = sizes["half"], sizes["rest"]
            if rest - half not in (0, 1):
                return f"split sizes {half}/{rest} inconsistent"
            size = half + rest
        elif "negsize" in sizes:
            size = sizes["negsize"]
        if size is not None and ctx.file_size is not None and size != ctx.file_size:
            return f"announced size {size} != {ctx.file_size}"
    return exists, size


def verify_response(
    tree: DecisionTree,
    resp: ResponseStructure,
    expected: int,
    ctx: RequestContext,
    registry: DialectRegistry | None = None,
) -> Verdict:
    """Accept only if the tree and the exact schema both match ``expected`` and contents agree."""
    registry = registry or _default_registry()
    dialect = registry[expected]
    try:
        feats = extract_features(resp)
    except (DialectAuthError, ValueError) as e:
        return Verdict.reject(RejectReason.DIALECT_MISMATCH, f"unusable structure: {e}")
    predicted = predict_tree(tree, feats)
    if predicted != expected:
        return Verdict.reject(
            RejectReason.DIALECT_MISMATCH, f"structure classified as {predicted}, expected {expected}", predicted
        )
    if resp.signature != dialect.schema.signature:
        return Verdict.reject(
            RejectReason.DIALECT_MISMATCH,
            f"structure {resp.signature} is not {dialect.schema.signature}",
            predicted,
        )
    result = check_content(dialect, resp, ctx)
    if isinstance(result, str):
        return Verdict.reject(RejectReason.CONTENT_MISMATCH, result, predicted)
    exists, size = result
    return Verdict(True, None, predicted, "", exists, size)
