import json

import numpy as np
import pytest

from dialect_auth.bench import TimingRow, TimingTable
from dialect_auth.datasets import bundled_words
from dialect_auth.sweep import (
    DESK_PROFILE,
    DistributionReport,
    desk_config,
    distribution_csv,
    distribution_svg,
    heldout_corpora,
    sweep_costs,
)
from dialect_auth.transcript import Phase, Transcript, TranscriptLog, record_timing


def test_sweep_costs_unique_minimum(registry):
    costs = sweep_costs(registry)
    assert costs == [0, 2, 1, 2, 2, 3, 3, 1, 2, 2, 4, 1, 2, 2, 5]
    assert costs.count(min(costs)) == 1 and costs[0] == 0


def test_desk_config():
    cfg = desk_config(0.4, seed=2)
    assert cfg.learning_rate == DESK_PROFILE["learning_rate"] and cfg.trade_off_a == 0.4 and cfg.seed == 2
    assert desk_config(0.4, epochs=3).n_epochs == 3
    assert desk_config(0.0).batch_size == 512 and desk_config(0.4).batch_size == 2048
    assert desk_config(0.4, batch_size=64).batch_size == 64


def test_distribution_report():
    r = DistributionReport(0.8, np.array([30, 20, 0, 10]))
    assert r.total == 60 and r.top == 1 and r.nonzero == 3
    assert r.top_ratio == pytest.approx(1.5)
    assert DistributionReport(1.0, np.array([5, 0])).top_ratio == float("inf")
    csv_text = distribution_csv([r])
    assert csv_text.splitlines()[1] == "0.8,1,30"
    assert distribution_svg(r).count("<rect") == 4


def test_heldout_corpora_are_word_disjoint():
    tr, ho = heldout_corpora(500, 200, seed=1)
    stems = lambda reqs: {r.split()[1].rsplit(".", 1)[0] for r in reqs}
    assert not stems(tr) & stems(ho)
    assert stems(tr) | stems(ho) <= set(bundled_words())


def test_timing_table():
    t = TimingTable("ftp", [TimingRow("plain", 3, 0, 0, 1.0, 10.0), TimingRow("D8", 3, 0.1, 0.05, 1.2, 10.4)], "plain")
    assert t.overhead("D8") == pytest.approx(0.04)
    assert json.loads(t.to_json())["overhead"]["D8"] == pytest.approx(0.04)
    assert "4.00%" in t.to_table()


def test_transcript():
    t = Transcript("client", request="get a.txt")
    t.add("sent", "get a.txt", Phase.IDLE)
    t.add("received", "File exists", Phase.AWAITING_RESPONSE)
    with t.span("ddm"):
        pass
    assert t.wire_messages("received") == ["File exists"]
    lines = [json.loads(l) for l in t.to_jsonl().splitlines()]
    assert lines[0]["request"] == "get a.txt" and len(lines) == 2
    assert "ddm" in t.spans
    log = TranscriptLog(limit=2)
    for _ in range(3):
        log.append(t)
    assert len(log) == 2
    rep = record_timing(t)
    assert rep is not None
