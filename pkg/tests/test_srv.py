from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dialect_auth.datasets import gen_srv_dataset
from dialect_auth.dialects import RequestContext, parse_response, render_by_id
from dialect_auth.errors import BadMagic, EmptyDataset, EmptyNode, MalformedTree, TooManyPackets, TruncatedFile
from dialect_auth.srv import (
    LEAF,
    N_FEATURES,
    SPLIT,
    DecisionTree,
    Node,
    RejectReason,
    extract_features,
    gini,
    load_tree,
    predict_tree,
    read_tree,
    save_tree,
    train_tree,
    tree_accuracy,
    verify_response,
    write_tree,
)


def test_gini_units():
    assert gini([5, 0, 0]) == 0.0
    assert gini([1, 1]) == pytest.approx(0.5, abs=1e-12)
    assert gini([1] * 15) == pytest.approx(14 / 15, abs=1e-12)
    assert gini([3, 1]) == pytest.approx(1 - (9 + 1) / 16, abs=1e-12)
    with pytest.raises(EmptyNode):
        gini([0, 0])


def test_feature_layout(registry):
    ctx = RequestContext("get", "hello.txt", 20)
    f = extract_features(parse_response(render_by_id(registry, 10, ctx)))
    assert f.shape == (N_FEATURES,) and N_FEATURES == 31
    # D10: "File exists" / "20,hello.txt,get"
    assert f[0] == 2
    assert list(f[1:3]) == [1, 1]
    # six packet slots of (field count, up to four type codes)
    assert list(f[6:10]) == [3, 2, 1, 1]
    assert not f[3:6].any() and not f[10:].any()


def test_feature_limits():
    with pytest.raises(TooManyPackets):
        extract_features(parse_response(["a"] * 7))


def test_every_dialect_has_a_distinct_feature_vector(registry):
    ctx = RequestContext("get", "hello.txt", 20)
    vecs = {extract_features(parse_response(render_by_id(registry, d, ctx))).tobytes() for d in registry}
    assert len(vecs) == 15


# ---------------------------------------------------------------- oracle tree


def _oracle_midpoint(lo, hi):
    t = np.float32((float(np.float32(lo)) + float(np.float32(hi))) / 2)
    if t <= np.float32(lo):
        t = np.nextafter(np.float32(lo), np.float32(np.inf))
    return float(t)


def _oracle_tree(x, y, max_depth, n_classes):
    """Exhaustive CART: every attribute, every boundary, exact rational scores."""
    nodes = []

    def majority(ys):
        counts = [sum(1 for v in ys if v == k) for k in range(1, n_classes + 1)]
        return counts.index(max(counts)) + 1

    def score(ys_left, ys_right):
        s = Fraction(0)
        for part in (ys_left, ys_right):
            counts = [sum(1 for v in part if v == k) for k in range(1, n_classes + 1)]
            s += Fraction(sum(c * c for c in counts), len(part))
        return s

    def build(rows, depth):
        me = len(nodes)
        nodes.append(None)
        ys = [y[r] for r in rows]
        best = None
        if len(set(ys)) > 1 and (max_depth is None or depth < max_depth) and len(rows) >= 2:
            for f in range(x.shape[1]):
                vals = sorted({float(x[r, f]) for r in rows})
                for lo, hi in zip(vals, vals[1:]):
                    left = [y[r] for r in rows if x[r, f] <= lo]
                    right = [y[r] for r in rows if x[r, f] > lo]
                    s = score(left, right)
                    if best is None or s > best[0]:
                        best = (s, f, _oracle_midpoint(lo, hi))
        if best is None:
            nodes[me] = Node(LEAF, klass=majority(ys))
            return me
        _, f, thr = best
        left = build([r for r in rows if x[r, f] < thr], depth + 1)
        right = build([r for r in rows if not x[r, f] < thr], depth + 1)
        nodes[me] = Node(SPLIT, attribute=f, threshold=thr, left=left, right=right)
        return me

    build(list(range(len(y))), 0)
    return DecisionTree(nodes)


@settings(max_examples=60, deadline=None)
@given(
    st.integers(4, 40).flatmap(
        lambda n: st.tuples(
            st.lists(st.lists(st.integers(0, 4), min_size=3, max_size=3), min_size=n, max_size=n),
            st.lists(st.integers(1, 3), min_size=n, max_size=n),
        )
    ),
    st.sampled_from([None, 1, 3]),
)
def test_tree_matches_exhaustive_oracle(data, max_depth):
    rows, labels = data
    x = np.array(rows, dtype=np.float32) * np.float32(0.1)
    y = np.array(labels)
    got = train_tree(x, y, max_depth=max_depth, n_classes=3)
    want = _oracle_tree(x, y, max_depth, 3)
    assert save_tree(got) == save_tree(want)


def test_oracle_on_structure_dataset(registry):
    x, y = gen_srv_dataset(registry, 60, seed=2)
    assert save_tree(train_tree(x, y, n_classes=15)) == save_tree(_oracle_tree(x, y, 16, 15))


def test_tie_prefers_lowest_attribute():
    # both attributes separate the classes perfectly
    x = np.array([[0, 0], [1, 1]], dtype=np.float32)
    tree = train_tree(x, [1, 2])
    assert tree.nodes[0].attribute == 0 and tree.nodes[0].threshold == 0.5


def test_midpoint_adjacent_floats():
    lo = np.float32(1.0)
    hi = np.nextafter(lo, np.float32(2))
    tree = train_tree(np.array([[lo], [hi]], dtype=np.float32), [1, 2])
    thr = tree.nodes[0].threshold
    assert lo < thr <= hi
    assert predict_tree(tree, [lo]) == 1 and predict_tree(tree, [hi]) == 2


def test_majority_tie_goes_to_lowest_class():
    x = np.zeros((4, 1), np.float32)
    assert train_tree(x, [3, 2, 3, 2]).nodes[0].klass == 2


def test_train_errors():
    with pytest.raises(EmptyDataset):
        train_tree(np.zeros((0, 31)), [])


def test_structure_tree_is_exact(registry, srv_tree):
    x, y = gen_srv_dataset(registry, 1500, seed=99)
    assert tree_accuracy(srv_tree, x, y) == 1.0


def test_tree_file_round_trip(srv_tree, tmp_path):
    blob = save_tree(srv_tree)
    assert blob[:4] == b"VPDT"
    assert load_tree(blob) == srv_tree
    write_tree(srv_tree, tmp_path / "t.bin")
    assert save_tree(read_tree(tmp_path / "t.bin")) == blob


def test_tree_file_errors(srv_tree):
    blob = save_tree(srv_tree)
    with pytest.raises(BadMagic):
        load_tree(b"NOPE" + blob[4:])
    with pytest.raises(TruncatedFile):
        load_tree(blob[:-1])
    with pytest.raises(MalformedTree):
        load_tree(blob + b"\0")
    with pytest.raises(MalformedTree):
        DecisionTree([Node(SPLIT, 0, 0.5, 1, 7), Node(LEAF, klass=1)])
    with pytest.raises(MalformedTree):
        DecisionTree([Node(SPLIT, 0, 0.5, 0, 0)])


# ---------------------------------------------------------------- verification


@pytest.mark.parametrize("did", range(1, 16))
def test_genuine_replies_accepted(registry, srv_tree, did):
    server = RequestContext("get", "hello.txt", 20)
    client = RequestContext("get", "hello.txt")
    v = verify_response(srv_tree, parse_response(render_by_id(registry, did, server)), did, client, registry)
    assert v.accepted and v.predicted == did and v.exists is True
    missing = RequestContext("get", "hello.txt", exists=False)
    v = verify_response(srv_tree, parse_response(render_by_id(registry, did, missing)), did, client, registry)
    assert v.accepted and v.exists is False


def test_cross_dialect_replies_rejected(registry, srv_tree):
    ctx = RequestContext("get", "hello.txt", 20)
    client = RequestContext("get", "hello.txt")
    for sent in registry:
        resp = parse_response(render_by_id(registry, sent, ctx))
        for expected in registry:
            v = verify_response(srv_tree, resp, expected, client, registry)
            assert v.accepted == (sent == expected)
            if sent != expected:
                assert v.reason is RejectReason.DIALECT_MISMATCH


def test_content_mismatches(registry, srv_tree):
    client = RequestContext("get", "hello.txt")
    other = RequestContext("get", "other.txt", 20)
    # D10 echoes the filename
    v = verify_response(srv_tree, parse_response(render_by_id(registry, 10, other)), 10, client, registry)
    assert not v and v.reason is RejectReason.CONTENT_MISMATCH
    bad_status = parse_response(["File maybe", "20,hello.txt,get"])
    assert verify_response(srv_tree, bad_status, 10, client, registry).reason is RejectReason.CONTENT_MISMATCH
    sized = RequestContext("get", "hello.txt", 21)
    resp = parse_response(render_by_id(registry, 10, RequestContext("get", "hello.txt", 20)))
    assert not verify_response(srv_tree, resp, 10, sized, registry)


def test_structure_rejects_garbage(registry, srv_tree):
    client = RequestContext("get", "hello.txt")
    for msgs in (["150 Opening data connection"], ["a", "b", "c", "d"], ["x," * 20 + "x"]):
        v = verify_response(srv_tree, parse_response(msgs), 1, client, registry)
        assert not v and v.reason is RejectReason.DIALECT_MISMATCH
