"""Synthetic corpora: request lines for the dialect model, reply structures for the tree."""

from __future__ import annotations

import csv
import io
import string
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from .dialects import FIELD_SEP, DialectRegistry, FieldType, parse_response
from .errors import MissingWordSource
from .srv import N_FEATURES, extract_features

DEFAULT_EXTENSIONS = (".txt", ".html", ".pdf", ".csv", ".log")
_ALNUM = np.array(list(string.ascii_letters + string.digits))
_LETTERS = np.array(list(string.ascii_letters))


def bundled_words() -> list[str]:
    text = resources.files("dialect_auth").joinpath("data/words.txt").read_text(encoding="utf-8")
    return [w for w in text.split() if w]


def load_words(path) -> list[str]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except FileNotFoundError as e:
        raise MissingWordSource(str(path)) from e
    words = [w.strip() for w in text.splitlines() if w.strip()]
    if not words:
        raise MissingWordSource(f"{path} has no words")
    return words


@dataclass
class CorpusConfig:
    size: int = 150_000
    seed: int = 0
    words_path: str | Path | None = None
    words: Sequence[str] | None = None
    extensions: Sequence[str] = DEFAULT_EXTENSIONS
    command: str = "get"

    def __post_init__(self):
        if self.size < 1:
            raise ValueError("size must be >= 1")
        if not self.extensions:
            raise ValueError("need at least one extension")

    def word_list(self) -> list[str]:
        if self.words is not None:
            if not self.words:
                raise MissingWordSource("empty word list")
            return list(self.words)
        if self.words_path is not None:
            return load_words(self.words_path)
        return bundled_words()


def gen_request_corpus(config: CorpusConfig) -> list[str]:
    """``"<command> <word><extension>"`` lines, duplicates allowed."""
    words = config.word_list()
    rng = np.random.default_rng(config.seed)
    wi = rng.integers(0, len(words), config.size)
    ei = rng.integers(0, len(config.extensions), config.size)
    return [f"{config.command} {words[w]}{config.extensions[e]}" for w, e in zip(wi, ei)]


def split_words(words: Sequence[str], holdout: float = 0.2, seed: int = 0) -> tuple[list[str], list[str]]:
    """Disjoint (train, held-out) word lists."""
    order = np.random.default_rng(seed).permutation(len(words))
    cut = int(round(len(words) * (1 - holdout)))
    return [words[i] for i in order[:cut]], [words[i] for i in order[cut:]]


def _random_string(rng: np.random.Generator) -> str:
    n = int(rng.integers(1, 21))
    chars = _ALNUM[rng.integers(0, len(_ALNUM), n)]
    # at least one letter, or the token would parse as an integer
    chars[rng.integers(0, n)] = _LETTERS[rng.integers(0, len(_LETTERS))]
    return "".join(chars)


def synth_response(registry: DialectRegistry, did: int, rng: np.random.Generator) -> list[str]:
    """Random tokens laid out in the dialect's reply structure."""
    out = []
    for packet in registry[did].schema.packets:
        toks = [
            str(int(rng.integers(0, 1_000_001))) if t is FieldType.INTEGER else _random_string(rng)
            for t in packet
        ]
        out.append(FIELD_SEP.join(toks))
    return out


def gen_srv_dataset(registry: DialectRegistry, size: int, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Labelled structure features, dialects assigned round-robin.

    Returns ``(features, labels)`` with shapes ``(size, 31)`` and ``(size,)``.
    """
    ids = list(registry)
    if size < len(ids):
        raise ValueError(f"size {size} smaller than dialect count {len(ids)}")
    rng = np.random.default_rng(seed)
    x = np.zeros((size, N_FEATURES), dtype=np.float32)
    y = np.zeros(size, dtype=np.int64)
    for i in range(size):
        did = ids[i % len(ids)]
        x[i] = extract_features(parse_response(synth_response(registry, did, rng)))
        y[i] = did
    return x, y


def write_srv_csv(features: np.ndarray, labels: np.ndarray) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([f"f{i}" for i in range(features.shape[1])] + ["label"])
    for row, lab in zip(features, labels):
        w.writerow([f"{v:g}" for v in row] + [int(lab)])
    return buf.getvalue()


def read_srv_csv(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    if rows and not rows[0][0].lstrip("-").replace(".", "").isdigit():
        rows = rows[1:]
    data = np.array([[float(v) for v in r] for r in rows if r], dtype=np.float64)
    if data.size == 0:
        return np.zeros((0, N_FEATURES), np.float32), np.zeros(0, np.int64)
    return data[:, :-1].astype(np.float32), data[:, -1].astype(np.int64)


def gen_topic_corpus(config: CorpusConfig) -> list[str]:
    """MQTT topics ``"<word>/<word>"``; the topic is the dialect model's input for MQTT."""
    words = config.word_list()
    rng = np.random.default_rng(config.seed)
    idx = rng.integers(0, len(words), (config.size, 2))
    return [f"{words[i]}/{words[j]}" for i, j in idx]


def gen_http_corpus(config: CorpusConfig) -> list[str]:
    """HTTP request lines ``"GET /<word><ext> HTTP/1.1"``."""
    words = config.word_list()
    rng = np.random.default_rng(config.seed)
    wi = rng.integers(0, len(words), config.size)
    ei = rng.integers(0, len(config.extensions), config.size)
    return [f"GET /{words[w]}{config.extensions[e]} HTTP/1.1" for w, e in zip(wi, ei)]
