import numpy as np
import pytest

from dialect_auth.datasets import (
    CorpusConfig,
    bundled_words,
    gen_http_corpus,
    gen_request_corpus,
    gen_srv_dataset,
    gen_topic_corpus,
    load_words,
    read_srv_csv,
    split_words,
    synth_response,
    write_srv_csv,
)
from dialect_auth.dialects import parse_response
from dialect_auth.errors import MissingWordSource


def test_bundled_words():
    words = bundled_words()
    assert len(words) >= 1000
    assert all(w.isalpha() for w in words)


def test_request_corpus_shape_and_determinism():
    cfg = CorpusConfig(size=500, seed=3)
    reqs = gen_request_corpus(cfg)
    assert len(reqs) == 500 and reqs == gen_request_corpus(cfg)
    assert reqs != gen_request_corpus(CorpusConfig(size=500, seed=4))
    words = set(bundled_words())
    for r in reqs:
        cmd, name = r.split(" ")
        assert cmd == "get"
        stem, ext = name.rsplit(".", 1)
        assert stem in words and "." + ext in cfg.extensions


def test_custom_words_and_errors(tmp_path):
    (tmp_path / "w.txt").write_text("alpha\nbeta\n\n")
    assert load_words(tmp_path / "w.txt") == ["alpha", "beta"]
    reqs = gen_request_corpus(CorpusConfig(size=50, words_path=tmp_path / "w.txt"))
    assert {r.split()[1].split(".")[0] for r in reqs} <= {"alpha", "beta"}
    with pytest.raises(MissingWordSource):
        load_words(tmp_path / "missing.txt")
    with pytest.raises(MissingWordSource):
        gen_request_corpus(CorpusConfig(size=5, words=[]))
    with pytest.raises(ValueError):
        CorpusConfig(size=0)


def test_split_words_disjoint():
    words = bundled_words()
    a, b = split_words(words, 0.2, seed=1)
    assert not set(a) & set(b)
    assert len(a) + len(b) == len(words)
    assert abs(len(b) - 0.2 * len(words)) <= 1


def test_srv_dataset_round_robin_and_valid(registry):
    x, y = gen_srv_dataset(registry, 300, seed=0)
    assert x.shape == (300, 31) and x.dtype == np.float32
    assert list(y[:15]) == list(range(1, 16))
    assert np.bincount(y)[1:].tolist() == [20] * 15
    with pytest.raises(ValueError):
        gen_srv_dataset(registry, 10)


def test_synth_response_matches_schema(registry, rng):
    for did in registry:
        for _ in range(20):
            resp = parse_response(synth_response(registry, did, rng))
            assert resp.signature == registry[did].schema.signature


def test_srv_csv_round_trip(registry, tmp_path):
    x, y = gen_srv_dataset(registry, 45, seed=5)
    path = tmp_path / "srv.csv"
    path.write_text(write_srv_csv(x, y))
    x2, y2 = read_srv_csv(path)
    np.testing.assert_array_equal(x, x2)
    np.testing.assert_array_equal(y, y2)


def test_adapter_corpora():
    topics = gen_topic_corpus(CorpusConfig(size=40, seed=1))
    assert all(t.count("/") == 1 and all(t.split("/")) for t in topics)
    lines = gen_http_corpus(CorpusConfig(size=40, seed=1))
    assert all(l.startswith("GET /") and l.endswith(" HTTP/1.1") for l in lines)
