import json

import pytest

from dialect_auth.attacks import (
    AttackKind,
    AttackScenario,
    DetectionReport,
    MalloryStrategy,
    extract_replies,
    run_attack,
    run_flood,
    run_replay,
    run_reroute,
)
from dialect_auth.datasets import CorpusConfig, gen_request_corpus, gen_topic_corpus
from dialect_auth.adapters.mqtt import gen_mqtt_srv_dataset
from dialect_auth.ddm import TrainingConfig, train
from dialect_auth.errors import HarnessSetupFailure
from dialect_auth.srv import train_tree


@pytest.fixture(scope="module")
def balanced_model():
    reqs = gen_request_corpus(CorpusConfig(size=3000, seed=0))
    cfg = TrainingConfig(trade_off_a=0.0, learning_rate=1e-3, batch_size=256, epochs=10, seed=0)
    return train(reqs, cfg)


def test_extract_replies_skips_control_lines():
    rec = b"220 Service ready\r\n200 PORT command successful\r\nFile exists\r\n20,hello.txt,get\r\n226 Transfer complete\r\n"
    assert extract_replies(rec) == [["File exists", "20,hello.txt,get"]]


@pytest.mark.parametrize("strategy", list(MalloryStrategy))
def test_reroute_detected(balanced_model, srv_tree, strategy):
    rep = run_reroute(AttackScenario("Reroute", trials=40, seed=1, strategy=strategy), balanced_model, srv_tree)
    if strategy is MalloryStrategy.RANDOM_DIALECT:
        # a guessed dialect is right about 1 time in 15; accepted guesses show up as residual
        assert rep.detected + rep.residual == rep.trials
        assert rep.detection_rate > 0.7
    else:
        assert rep.detection_rate == 1.0 and rep.bytes_delivered == 0


def test_reroute_control_arm(balanced_model, srv_tree):
    rep = run_reroute(AttackScenario("Reroute", trials=60, seed=2, target="bob"), balanced_model, srv_tree)
    assert rep.detected == 0


def test_replay_report(balanced_model, srv_tree):
    sc = AttackScenario("Replay", trials=60, seed=3, n_files=16, exact_replay_trials=10)
    rep = run_replay(sc, balanced_model, srv_tree)
    assert rep.trials == 60 and 0 <= rep.detected <= 60
    # replaying a reply to its own request is indistinguishable from the original
    assert rep.residual == 10
    undetected = 60 - rep.detected
    assert undetected <= rep.extra.get("same_dialect_pairs", 0)


def test_flood_and_dispatch(tmp_path):
    topics = gen_topic_corpus(CorpusConfig(size=2000, seed=1))
    model = train(topics, TrainingConfig(trade_off_a=0.0, costs=[1, 1, 1], learning_rate=1e-3, epochs=5), n_dialects=3)
    tree = train_tree(*gen_mqtt_srv_dataset(300), n_classes=3)
    rep = run_flood(AttackScenario("FloodPublish", trials=80, genuine_trials=20, seed=4), model, tree)
    assert rep.detection_rate == 1.0
    assert rep.extra["genuine_accepted"] == 20 and rep.extra["broker_stored"] == 20
    with pytest.raises(HarnessSetupFailure):
        run_attack(AttackScenario("FloodPublish", trials=1), None, None)
    with pytest.raises(HarnessSetupFailure):
        run_attack(AttackScenario("PassiveObserve", trials=1), None, None)


def test_report_serialization():
    rep = DetectionReport("Reroute", 10, 10, 1.0, reasons={"DialectMismatch": 10})
    assert json.loads(rep.to_json())["detection_rate"] == 1.0
    assert "reason:DialectMismatch" in rep.to_table()


def test_scenario_validation():
    with pytest.raises(ValueError):
        AttackScenario("Reroute", trials=0)
    with pytest.raises(ValueError):
        AttackScenario("Reroute", target="carol")
    assert AttackScenario("Replay").kind is AttackKind.REPLAY
