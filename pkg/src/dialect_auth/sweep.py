"""Trade-off sweeps: how the predicted-dialect distribution moves with ``a``."""

from __future__ import annotations

import io
import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .datasets import CorpusConfig, bundled_words, gen_request_corpus, split_words
from .ddm import MlpModel, TrainingConfig, dialect_histogram, train
from .dialects import COST_UNIT, DialectRegistry, register_ftp_dialects

# Settings that reach the target distributions in about a minute per model on a laptop.
DESK_PROFILE = {
    "learning_rate": 1e-3,
    "confidence_weight": 0.3,
    "confidence_warmup": 0.5,
}
# Pure balancing needs many small steps; with a cost term the batch marginal
# must be estimated well enough to separate dialects whose costs differ by one.
DESK_BATCH_BALANCED = 512
DESK_BATCH_COSTED = 2048


def sweep_costs(registry: DialectRegistry | None = None) -> list[float]:
    """Reply counts in response units, with dialect 1 made free so it is the unique minimum.

    With the raw ``responses * 1000`` costs any ``a`` above about 0.01 already
    collapses onto the cheapest dialect, so sweeps use these smaller units.
    """
    registry = registry or register_ftp_dialects()
    costs = [c / COST_UNIT for c in registry.costs]
    costs[0] = 0.0
    return costs


def desk_config(a: float, seed: int = 0, costs: Sequence[float] | None = None, **overrides) -> TrainingConfig:
    params = dict(
        DESK_PROFILE,
        batch_size=DESK_BATCH_BALANCED if a == 0 else DESK_BATCH_COSTED,
        trade_off_a=a,
        seed=seed,
        costs=list(costs) if costs is not None else sweep_costs(),
    )
    params.update(overrides)
    return TrainingConfig(**params)


@dataclass
class DistributionReport:
    a: float
    counts: np.ndarray  # index 0 is dialect 1

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def fractions(self) -> np.ndarray:
        return self.counts / max(self.total, 1)

    @property
    def top(self) -> int:
        return int(np.argmax(self.counts)) + 1

    @property
    def top_ratio(self) -> float:
        """Top dialect count over the runner-up count."""
        s = np.sort(self.counts)[::-1]
        return float("inf") if s[1] == 0 else float(s[0] / s[1])

    @property
    def nonzero(self) -> int:
        return int((self.counts > 0).sum())


def heldout_corpora(train_size: int, heldout_size: int, seed: int = 0, words: Sequence[str] | None = None):
    """Training and held-out requests drawn from disjoint word lists."""
    train_words, test_words = split_words(list(words or bundled_words()), 0.2, seed=seed + 123)
    return (
        gen_request_corpus(CorpusConfig(size=train_size, seed=seed, words=train_words)),
        gen_request_corpus(CorpusConfig(size=heldout_size, seed=seed + 1000, words=test_words)),
    )


def sweep_tradeoff(
    a_values: Sequence[float],
    train_size: int = 50_000,
    heldout_size: int = 10_000,
    seed: int = 0,
    costs: Sequence[float] | None = None,
    words: Sequence[str] | None = None,
    **overrides,
) -> list[tuple[DistributionReport, MlpModel]]:
    train_set, heldout = heldout_corpora(train_size, heldout_size, seed, words)
    out = []
    for a in a_values:
        model = train(train_set, desk_config(a, seed, costs, **overrides))
        out.append((DistributionReport(float(a), dialect_histogram(model, heldout)), model))
    return out


def distribution_csv(reports: Sequence[DistributionReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["a", "dialect", "count"])
    for r in reports:
        for d, c in enumerate(r.counts, start=1):
            w.writerow([f"{r.a:g}", d, int(c)])
    return buf.getvalue()


def distribution_svg(report: DistributionReport, width: int = 480, height: int = 240) -> str:
    """Bar chart of the predicted-dialect counts."""
    n = len(report.counts)
    pad, top = 30, 20
    bar_w = (width - 2 * pad) / n
    peak = max(int(report.counts.max()), 1)
    bars = []
    for i, c in enumerate(report.counts):
        h = (height - pad - top) * c / peak
        x = pad + i * bar_w
        y = height - pad - h
        bars.append(f'<rect x="{x:.1f}" y="{y:.1f}" width="{bar_w * 0.8:.1f}" height="{h:.1f}" fill="#4a6fa5"/>')
        bars.append(
            f'<text x="{x + bar_w * 0.4:.1f}" y="{height - pad + 14}" font-size="10" text-anchor="middle">{i + 1}</text>'
        )
    title = f'<text x="{width / 2:.0f}" y="14" font-size="12" text-anchor="middle">a = {report.a:g}, {report.total} requests</text>'
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">'
        + title
        + "".join(bars)
        + "</svg>\n"
    )
