"""Dialect decision model: a small MLP mapping a request line to a dialect id.

The network is trained without labels. The objective mixes the expected
dialect cost with the negative entropy of the batch-marginal dialect
distribution, plus a per-sample entropy penalty that keeps each prediction
confident. Both endpoints load the same serialized weights and run the same
float32 forward pass, so they agree on the dialect for every request.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import (
    BadMagic,
    CostLengthMismatch,
    DimensionMismatch,
    DimMismatch,
    EmptyBatch,
    EmptyDataset,
    EmptyRequest,
    TradeOffOutOfRange,
    TruncatedFile,
)

log = logging.getLogger(__name__)

INPUT_SIZE = 100
HIDDEN_SIZES = (128, 128)

MODEL_MAGIC = b"VPDM"
MODEL_VERSION = 1

_LN2 = np.log(2.0)
_TINY = 1e-30


def vectorize_request(request: str) -> np.ndarray:
    """Byte values / 255, truncated or zero-padded to 100 entries."""
    if not request:
        raise EmptyRequest("empty request")
    raw = request.encode("utf-8")[:INPUT_SIZE]
    x = np.zeros(INPUT_SIZE, dtype=np.float32)
    x[: len(raw)] = np.frombuffer(raw, dtype=np.uint8).astype(np.float32) / np.float32(255.0)
    return x


def vectorize_batch(requests: Sequence[str]) -> np.ndarray:
    out = np.zeros((len(requests), INPUT_SIZE), dtype=np.float32)
    for i, r in enumerate(requests):
        out[i] = vectorize_request(r)
    return out


@dataclass
class MlpModel:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise DimensionMismatch("need one bias per weight matrix")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise DimensionMismatch(f"layer {i}: weight {w.shape} vs bias {b.shape}")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise DimensionMismatch(f"layer {i} input {w.shape[0]} != previous output")

    @property
    def dims(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def n_dialects(self) -> int:
        return self.weights[-1].shape[1]

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def astype(self, dtype) -> "MlpModel":
        return MlpModel(
            [w.astype(dtype) for w in self.weights],
            [b.astype(dtype) for b in self.biases],
            dict(self.metadata),
        )

    @classmethod
    def zeros(cls, n_dialects: int, dims: Sequence[int] | None = None) -> "MlpModel":
        dims = list(dims or (INPUT_SIZE, *HIDDEN_SIZES, n_dialects))
        return cls(
            [np.zeros((i, o), np.float32) for i, o in zip(dims[:-1], dims[1:])],
            [np.zeros(o, np.float32) for o in dims[1:]],
        )

    @classmethod
    def glorot(cls, n_dialects: int, seed: int = 0, dims: Sequence[int] | None = None) -> "MlpModel":
        rng = np.random.default_rng(seed)
        dims = list(dims or (INPUT_SIZE, *HIDDEN_SIZES, n_dialects))
        weights = []
        for i, o in zip(dims[:-1], dims[1:]):
            lim = np.sqrt(6.0 / (i + o))
            weights.append(rng.uniform(-lim, lim, (i, o)).astype(np.float32))
        return cls(weights, [np.zeros(o, np.float32) for o in dims[1:]])


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _forward_cache(model: MlpModel, x: np.ndarray):
    acts = [x]
    h = x
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = h @ w + b
        h = z if i == last else np.maximum(z, 0)
        acts.append(h)
    return acts, _softmax(acts[-1])


def forward(model: MlpModel, x: np.ndarray) -> np.ndarray:
    """Dialect probabilities for one vector (shape (100,)) or a batch (n, 100)."""
    x = np.asarray(x)
    if x.shape[-1] != model.dims[0] or x.ndim not in (1, 2):
        raise DimensionMismatch(f"input shape {x.shape} vs model input {model.dims[0]}")
    x = x.astype(model.weights[0].dtype, copy=False)
    return _forward_cache(model, x)[1]


def _marginal(batch_probs) -> np.ndarray:
    p = np.asarray(batch_probs, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] == 0:
        raise EmptyBatch("batch must be a non-empty (B, M) array")
    return p.mean(axis=0)


def _xlog2x(p: np.ndarray) -> np.ndarray:
    return np.where(p > 0, p * np.log2(np.where(p > 0, p, 1.0)), 0.0)


def uniformity_loss(batch_probs) -> float:
    """Sum over dialects of P log2 P for the batch-marginal P; -log2(M) when uniform."""
    return float(_xlog2x(_marginal(batch_probs)).sum())


def cost_loss(batch_probs, costs: Sequence[float]) -> float:
    """Expected dialect cost under the batch-marginal distribution."""
    pm = _marginal(batch_probs)
    c = np.asarray(costs, dtype=np.float64)
    if c.shape != pm.shape:
        raise CostLengthMismatch(f"{c.size} costs for {pm.size} dialects")
    if np.any(c < 0):
        raise ValueError("costs must be non-negative")
    return float(pm @ c)


def consolidated_loss(l1: float, l2: float, a: float) -> float:
    if not 0.0 <= a <= 1.0:
        raise TradeOffOutOfRange(a)
    return a * l2 + (1.0 - a) * l1


def confidence_penalty(batch_probs) -> float:
    """Mean per-sample entropy in bits."""
    p = np.asarray(batch_probs, dtype=np.float64)
    return float(-_xlog2x(p).sum(axis=1).mean())


def objective(batch_probs, costs, a: float, confidence_weight: float = 0.0) -> float:
    l1 = uniformity_loss(batch_probs)
    l2 = cost_loss(batch_probs, costs)
    return consolidated_loss(l1, l2, a) + confidence_weight * confidence_penalty(batch_probs)


def loss_and_grads(model: MlpModel, x: np.ndarray, costs, a: float, confidence_weight: float):
    """Training objective on one batch and its gradient for every parameter.

    Gradients come back in ``model.params()`` order, in the model's dtype.
    """
    acts, p = _forward_cache(model, x)
    dtype = p.dtype
    n = x.shape[0]
    c = np.asarray(costs, dtype=dtype)
    pm = p.mean(axis=0)
    log_pm = np.log2(np.maximum(pm, _TINY))
    log_p = np.log2(np.maximum(p, _TINY))

    l1 = float(np.sum(pm * log_pm))
    l2 = float(pm @ c)
    ent = float(-np.sum(p * log_p, axis=1).mean())
    loss = a * l2 + (1 - a) * l1 + confidence_weight * ent

    # d loss / d p[j, k]
    g_marg = a * c + (1 - a) * (log_pm + 1 / _LN2)
    g = (g_marg[None, :] - confidence_weight * (log_p + 1 / _LN2)) / n
    g = g.astype(dtype, copy=False)
    delta = p * (g - np.sum(p * g, axis=1, keepdims=True))

    grads_w, grads_b = [], []
    for i in range(len(model.weights) - 1, -1, -1):
        grads_w.append(acts[i].T @ delta)
        grads_b.append(delta.sum(axis=0))
        if i:
            delta = (delta @ model.weights[i].T) * (acts[i] > 0)
    grads = []
    for gw, gb in zip(reversed(grads_w), reversed(grads_b)):
        grads += [gw, gb]
    return loss, grads


@dataclass
class TrainingConfig:
    trade_off_a: float = 0.0
    learning_rate: float = 1e-5
    epochs: int | None = None
    batch_size: int = 128
    costs: Sequence[float] | None = None
    seed: int = 0
    confidence_weight: float = 0.1
    confidence_warmup: float = 0.0  # fraction of epochs over which the weight ramps up from 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not 0.0 <= self.trade_off_a <= 1.0:
            raise TradeOffOutOfRange(self.trade_off_a)
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.confidence_weight < 0:
            raise ValueError("confidence_weight must be >= 0")
        if not 0.0 <= self.confidence_warmup <= 1.0:
            raise ValueError("confidence_warmup must be in [0, 1]")

    @property
    def n_epochs(self) -> int:
        if self.epochs is not None:
            return self.epochs
        if self.trade_off_a == 0.0:
            return 100
        if self.trade_off_a == 1.0:
            return 40
        return 30


class _Adam:
    def __init__(self, params, lr, beta1, beta2, eps):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * (g * g)
            p -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


def train(dataset, config: TrainingConfig, n_dialects: int | None = None) -> MlpModel:
    """Mini-batch Adam over the request corpus. Reproducible for a fixed seed.

    ``dataset`` is a list of request strings or an already vectorized array.
    """
    if len(dataset) == 0:
        raise EmptyDataset("no training requests")
    if config.costs is None:
        from .dialects import register_ftp_dialects

        costs = register_ftp_dialects().costs
    else:
        costs = list(config.costs)
    m = n_dialects or len(costs)
    if len(costs) != m:
        raise CostLengthMismatch(f"{len(costs)} costs for {m} dialects")
    x_all = dataset if isinstance(dataset, np.ndarray) else vectorize_batch(dataset)
    x_all = x_all.astype(np.float32, copy=False)

    rng = np.random.default_rng(config.seed)
    model = MlpModel.glorot(m, seed=int(rng.integers(2**31)))
    params = model.params()
    opt = _Adam(params, config.learning_rate, config.beta1, config.beta2, config.eps)
    history = []
    n = len(x_all)
    for epoch in range(config.n_epochs):
        order = rng.permutation(n)
        ramp = config.confidence_warmup * config.n_epochs
        w = config.confidence_weight * (min(1.0, (epoch + 1) / ramp) if ramp > 0 else 1.0)
        total, batches = 0.0, 0
        for start in range(0, n, config.batch_size):
            xb = x_all[order[start : start + config.batch_size]]
            loss, grads = loss_and_grads(model, xb, costs, config.trade_off_a, w)
            opt.step(params, grads)
            total += loss
            batches += 1
        history.append(total / batches)
        log.debug("epoch %d loss %.6f", epoch + 1, history[-1])
    model.metadata = {
        "trade_off_a": config.trade_off_a,
        "learning_rate": config.learning_rate,
        "epochs": config.n_epochs,
        "batch_size": config.batch_size,
        "confidence_weight": config.confidence_weight,
        "confidence_warmup": config.confidence_warmup,
        "seed": config.seed,
        "costs": [float(c) for c in costs],
        "samples": n,
        "history": history,
    }
    return model


def predict_dialect(model: MlpModel, request: str) -> int:
    """Dialect id (1-based) for one request; ties go to the lowest id."""
    x = vectorize_request(request)
    if model.dims[0] != INPUT_SIZE:
        raise DimensionMismatch(f"model input {model.dims[0]} != {INPUT_SIZE}")
    # same arithmetic as forward(), minus per-call validation; this runs once per request
    h = x
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        h = h @ w + b
        if i != last:
            h = np.maximum(h, 0)
    return int(np.argmax(_softmax(h))) + 1


def predict_many(model: MlpModel, requests: Sequence[str]) -> list[int]:
    """Per-request ``predict_dialect``; same arithmetic path as single calls."""
    return [predict_dialect(model, r) for r in requests]


def dialect_histogram(model: MlpModel, requests: Sequence[str]) -> np.ndarray:
    """Prediction counts per dialect (index 0 is dialect 1), batched for speed."""
    probs = forward(model, vectorize_batch(requests))
    return np.bincount(np.argmax(probs, axis=1), minlength=model.n_dialects)


_HEADER = struct.Struct("<4sHII")


def save_model(model: MlpModel) -> bytes:
    dims = model.dims
    parts = [_HEADER.pack(MODEL_MAGIC, MODEL_VERSION, model.n_dialects, len(dims))]
    parts.append(struct.pack(f"<{len(dims)}I", *dims))
    for w, b in zip(model.weights, model.biases):
        parts.append(np.ascontiguousarray(w, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f4").tobytes())
    return b"".join(parts)


def load_model(data: bytes) -> MlpModel:
    if len(data) < 4 or data[:4] != MODEL_MAGIC:
        raise BadMagic("not a dialect model file")
    if len(data) < _HEADER.size:
        raise TruncatedFile("header cut short")
    _, version, m, n_dims = _HEADER.unpack_from(data)
    if version != MODEL_VERSION:
        raise DimMismatch(f"unsupported model version {version}")
    off = _HEADER.size
    if n_dims < 2 or len(data) < off + 4 * n_dims:
        raise TruncatedFile("layer dims cut short")
    dims = list(struct.unpack_from(f"<{n_dims}I", data, off))
    off += 4 * n_dims
    if dims[-1] != m or any(d == 0 for d in dims):
        raise DimMismatch(f"dims {dims} inconsistent with {m} dialects")
    expected = off + 4 * sum(i * o + o for i, o in zip(dims[:-1], dims[1:]))
    if len(data) < expected:
        raise TruncatedFile(f"expected {expected} bytes, got {len(data)}")
    if len(data) > expected:
        raise DimMismatch(f"{len(data) - expected} trailing bytes")
    weights, biases = [], []
    for i, o in zip(dims[:-1], dims[1:]):
        w = np.frombuffer(data, dtype="<f4", count=i * o, offset=off).reshape(i, o)
        off += 4 * i * o
        b = np.frombuffer(data, dtype="<f4", count=o, offset=off)
        off += 4 * o
        weights.append(w.astype(np.float32))
        biases.append(b.astype(np.float32))
    return MlpModel(weights, biases)


def write_model(model: MlpModel, path) -> None:
    from .io import atomic_write_bytes

    atomic_write_bytes(path, save_model(model))


def read_model(path) -> MlpModel:
    with open(path, "rb") as f:
        return load_model(f.read())
