import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dialect_auth.ddm import (
    INPUT_SIZE,
    MlpModel,
    TrainingConfig,
    confidence_penalty,
    consolidated_loss,
    cost_loss,
    dialect_histogram,
    forward,
    load_model,
    loss_and_grads,
    objective,
    predict_dialect,
    predict_many,
    read_model,
    save_model,
    train,
    uniformity_loss,
    vectorize_batch,
    vectorize_request,
    write_model,
)
from dialect_auth.errors import (
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


def test_vectorize_matches_byte_oracle():
    req = "get hello.txt"
    expected = [ord(c) / 255 for c in req] + [0.0] * (INPUT_SIZE - len(req))
    np.testing.assert_allclose(vectorize_request(req), expected, rtol=0, atol=1e-7)
    assert vectorize_request(req).dtype == np.float32


def test_vectorize_truncates_and_handles_utf8():
    long = "get " + "x" * 200
    assert vectorize_request(long).shape == (INPUT_SIZE,)
    assert vectorize_request(long)[-1] == pytest.approx(ord("x") / 255)
    v = vectorize_request("get é")
    assert v[4] == pytest.approx(0xC3 / 255) and v[5] == pytest.approx(0xA9 / 255)


def test_vectorize_empty():
    with pytest.raises(EmptyRequest):
        vectorize_request("")


def test_forward_outputs_distribution(random_model):
    x = vectorize_batch(["get a.txt", "get b.pdf", "get zebra.log"])
    p = forward(random_model, x)
    assert p.shape == (3, 15) and p.dtype == np.float32
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)
    assert np.all(p > 0)
    # matrix-vector and matrix-matrix products may round differently in float32
    np.testing.assert_allclose(forward(random_model, x[1]), p[1], rtol=0, atol=1e-7)


def test_forward_shape_mismatch(random_model):
    with pytest.raises(DimensionMismatch):
        forward(random_model, np.zeros(99, np.float32))


def test_model_dims(random_model):
    assert random_model.dims == [100, 128, 128, 15]
    assert random_model.n_dialects == 15
    with pytest.raises(DimensionMismatch):
        MlpModel([np.zeros((3, 4), np.float32)], [np.zeros(3, np.float32)])


def test_uniformity_loss_uniform_marginal():
    p = np.full((7, 15), 1 / 15)
    assert abs(uniformity_loss(p) + math.log2(15)) < 1e-6


def test_uniformity_loss_one_hot_rows_balanced():
    p = np.eye(15)
    assert abs(uniformity_loss(p) + math.log2(15)) < 1e-6
    assert uniformity_loss(np.tile(np.eye(15)[0], (4, 1))) == 0.0


def test_cost_loss_hand_expanded():
    p = np.array([[0.5, 0.25, 0.25], [0.1, 0.2, 0.7]])
    c = [1000.0, 2000.0, 3000.0]
    pm = [(0.5 + 0.1) / 2, (0.25 + 0.2) / 2, (0.25 + 0.7) / 2]
    expected = pm[0] * 1000 + pm[1] * 2000 + pm[2] * 3000
    assert abs(cost_loss(p, c) - expected) < 1e-9
    assert abs(cost_loss(np.eye(3)[[0]], c) - 1000.0) < 1e-9


def test_cost_loss_errors():
    with pytest.raises(CostLengthMismatch):
        cost_loss(np.full((2, 3), 1 / 3), [1, 2])
    with pytest.raises(EmptyBatch):
        cost_loss(np.zeros((0, 3)), [1, 2, 3])


@pytest.mark.parametrize("a", [0.0, 0.25, 0.8, 1.0])
def test_consolidated_loss_is_affine_in_a(a):
    l1, l2 = -3.7, 1234.5
    assert abs(consolidated_loss(l1, l2, a) - (a * l2 + (1 - a) * l1)) < 1e-12


def test_consolidated_loss_range():
    with pytest.raises(TradeOffOutOfRange):
        consolidated_loss(0, 0, 1.5)
    with pytest.raises(TradeOffOutOfRange):
        TrainingConfig(trade_off_a=-0.1)


def test_confidence_penalty_is_sample_entropy():
    assert confidence_penalty(np.eye(4)) == 0.0
    assert abs(confidence_penalty(np.full((3, 8), 1 / 8)) - 3.0) < 1e-12


def _numeric_grads(model, x, costs, a, w, h=1e-5, picks=None, rng=None):
    out = []
    for arr in model.params():
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        idx = range(flat.size) if picks is None else rng.choice(flat.size, min(picks, flat.size), replace=False)
        for i in idx:
            old = flat[i]
            flat[i] = old + h
            up = objective(forward(model, x), costs, a, w)
            flat[i] = old - h
            down = objective(forward(model, x), costs, a, w)
            flat[i] = old
            gflat[i] = (up - down) / (2 * h)
        out.append((g, None if picks is None else np.array(list(idx))))
    return out


def _rel_err(num, ana):
    return np.linalg.norm(num - ana) / max(np.linalg.norm(num), np.linalg.norm(ana), 1e-12)


@pytest.mark.parametrize("a, w", [(0.0, 0.0), (0.4, 0.3), (1.0, 0.1), (0.7, 0.0)])
def test_gradients_match_central_differences_toy(a, w):
    rng = np.random.default_rng(7)
    model = MlpModel.glorot(4, seed=3, dims=[6, 5, 5, 4]).astype(np.float64)
    for b in model.biases:
        b += rng.normal(0, 0.1, b.shape)
    x = rng.uniform(0, 1, (9, 6))
    costs = [0.0, 1.0, 2.5, 4.0]
    loss, grads = loss_and_grads(model, x, costs, a, w)
    assert abs(loss - objective(forward(model, x), costs, a, w)) < 1e-12
    for (num, _), ana in zip(_numeric_grads(model, x, costs, a, w), grads):
        assert _rel_err(num, ana) < 1e-4


def test_gradients_match_central_differences_full_size():
    rng = np.random.default_rng(8)
    model = MlpModel.glorot(15, seed=4).astype(np.float64)
    x = vectorize_batch(["get hello.txt", "get zebra.pdf", "get a.log", "get report.csv"]).astype(np.float64)
    costs = list(range(15))
    _, grads = loss_and_grads(model, x, costs, 0.3, 0.2)
    for (num, idx), ana in zip(_numeric_grads(model, x, costs, 0.3, 0.2, picks=40, rng=rng), grads):
        assert _rel_err(num.reshape(-1)[idx], ana.reshape(-1)[idx]) < 1e-4


def test_save_load_round_trip_bit_identical(random_model, tmp_path):
    blob = save_model(random_model)
    loaded = load_model(blob)
    assert save_model(loaded) == blob
    for w0, w1 in zip(random_model.params(), loaded.params()):
        assert w0.tobytes() == w1.tobytes()
    write_model(random_model, tmp_path / "m.bin")
    assert (tmp_path / "m.bin").read_bytes() == blob
    assert save_model(read_model(tmp_path / "m.bin")) == blob


def test_model_header_layout(random_model):
    blob = save_model(random_model)
    assert blob[:4] == b"VPDM"
    assert int.from_bytes(blob[4:6], "little") == 1
    assert int.from_bytes(blob[6:10], "little") == 15
    assert int.from_bytes(blob[10:14], "little") == 4
    size = 14 + 16 + 4 * (100 * 128 + 128 + 128 * 128 + 128 + 128 * 15 + 15)
    assert len(blob) == size


def test_load_errors(random_model):
    blob = save_model(random_model)
    with pytest.raises(BadMagic):
        load_model(b"XXXX" + blob[4:])
    with pytest.raises(TruncatedFile):
        load_model(blob[:-3])
    with pytest.raises(TruncatedFile):
        load_model(blob[:12])
    with pytest.raises(DimMismatch):
        load_model(blob + b"\0")
    bad = bytearray(blob)
    bad[6] = 14  # header says 14 dialects, dims say 15
    with pytest.raises(DimMismatch):
        load_model(bytes(bad))


def test_predict_ties_go_to_lowest_id():
    model = MlpModel.zeros(15)
    assert predict_dialect(model, "get anything.txt") == 1


def test_predict_matches_forward_argmax(random_model):
    reqs = [f"get file{i}.txt" for i in range(300)]
    ids = predict_many(random_model, reqs)
    probs = forward(random_model, vectorize_batch(reqs))
    assert ids == [int(np.argmax(p)) + 1 for p in probs]
    assert all(1 <= i <= 15 for i in ids)


def test_histogram_counts_everything(random_model):
    reqs = [f"get f{i}.pdf" for i in range(500)]
    h = dialect_histogram(random_model, reqs)
    assert h.shape == (15,) and h.sum() == 500


@settings(max_examples=50, deadline=None)
@given(st.text(min_size=1, max_size=150))
def test_prediction_is_a_pure_function(req):
    model = MlpModel.glorot(15, seed=9)
    assert predict_dialect(model, req) == predict_dialect(model, req)
    assert 1 <= predict_dialect(model, req) <= 15


def test_training_is_seed_reproducible():
    reqs = [f"get w{i}.txt" for i in range(600)]
    cfg = TrainingConfig(learning_rate=1e-3, batch_size=64, epochs=2, seed=3)
    m1, m2 = train(reqs, cfg), train(reqs, cfg)
    assert save_model(m1) == save_model(m2)
    m3 = train(reqs, TrainingConfig(learning_rate=1e-3, batch_size=64, epochs=2, seed=4))
    assert save_model(m3) != save_model(m1)


def test_training_lowers_objective():
    reqs = [f"get w{i}.txt" for i in range(2000)]
    m = train(reqs, TrainingConfig(learning_rate=1e-3, batch_size=256, epochs=8, seed=0))
    hist = m.metadata["history"]
    assert hist[-1] < hist[0]


def test_training_errors():
    with pytest.raises(EmptyDataset):
        train([], TrainingConfig())
    with pytest.raises(CostLengthMismatch):
        train(["get a.txt"], TrainingConfig(costs=[1, 2, 3]), n_dialects=4)


def test_default_epochs():
    assert TrainingConfig(trade_off_a=0).n_epochs == 100
    assert TrainingConfig(trade_off_a=1).n_epochs == 40
    assert TrainingConfig(trade_off_a=0.5).n_epochs == 30
    assert TrainingConfig(epochs=3).n_epochs == 3
