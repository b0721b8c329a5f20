import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from ranking_data import linear_problem, pairs_by_gap
from faceqe.errors import NumericError, ValidationError
from faceqe.features import FeatureVector
from faceqe.fiqa import (LinearRanker, QualityModel, RankPair, categorize, load_model, make_pairs,
                         model_text, monomial_exponents, pairwise_accuracy, parse_model, partition,
                         poly5_map, poly_dim, predict_quality, ranksvm_objective,
                         round_half_away, save_model, score_from_raw, train_quality_model,
                         train_ranksvm)

KINDS4 = ("hog", "gabor", "gist", "lbp")


def quality_features(seed, n=40, dims=(6, 8, 5, 7), gap=1.5, kinds=KINDS4):
    """Two ordinal classes whose features differ by a shift along a random direction."""
    rng = np.random.default_rng(seed)
    labels = {f"q{i:03d}": i % 2 for i in range(n)}
    feats = {}
    for kind, d in zip(kinds, dims):
        direction = rng.standard_normal(d)
        direction /= np.linalg.norm(direction)
        feats[kind] = {rid: FeatureVector(kind, rng.standard_normal(d) + gap * lab * direction)
                       for rid, lab in labels.items()}
    return labels, feats


# --- RankSVM -----------------------------------------------------------------

def test_ranksvm_1d_positive_direction():
    feats = {f"r{i}": np.array([float(i)]) for i in range(5)}
    pairs = [RankPair(f"r{i + 1}", f"r{i}") for i in range(4)]
    assert train_ranksvm(pairs, feats).weights[0] > 0


def test_ranksvm_antisymmetry():
    tr, _, f, q, _ = linear_problem(0)
    pairs = pairs_by_gap(tr, q)
    w = train_ranksvm(pairs, f).weights
    w_swapped = train_ranksvm([RankPair(p.lower, p.higher) for p in pairs], f).weights
    assert np.allclose(w / np.linalg.norm(w), -w_swapped / np.linalg.norm(w_swapped), atol=1e-6)


def test_ranksvm_recovers_direction():
    tr, ho, f, q, w_true = linear_problem(1)
    r = train_ranksvm(pairs_by_gap(tr, q), f, "synthetic")
    scores = {i: float(r.score(f[i])) for i in f}
    assert pairwise_accuracy(scores, pairs_by_gap(ho, q)) == 1.0
    assert float(w_true @ r.weights / np.linalg.norm(r.weights)) > 0.95


@pytest.mark.parametrize("lam", [1e-2, 1e-3, 1e-4])
def test_ranksvm_objective_non_increasing(lam):
    tr, _, f, q, _ = linear_problem(2)
    pairs = pairs_by_gap(tr, q)
    trace = []
    train_ranksvm(pairs, f, reg_lambda=lam, iters=500, trace=trace)
    diffs = np.stack([f[p.higher] - f[p.lower] for p in pairs])
    objs = [ranksvm_objective(w, diffs, lam) for _, w in trace]
    assert [t for t, _ in trace] == list(range(50, 501, 50))
    assert all(b <= a + 1e-9 for a, b in zip(objs, objs[1:]))


def test_ranksvm_errors():
    with pytest.raises(ValidationError):
        train_ranksvm([], {})
    with pytest.raises(ValidationError):
        train_ranksvm([RankPair("a", "b")], {"a": np.ones(2)})
    with pytest.raises(ValidationError):
        RankPair("a", "a")
    with pytest.raises(ValidationError):
        train_ranksvm([RankPair("a", "b")], {"a": np.ones(2), "b": np.zeros(2)}, reg_lambda=0)


def test_ranker_dim_check():
    with pytest.raises(ValidationError):
        LinearRanker(np.ones(3), "hog").score(np.ones(4))


def test_make_pairs():
    labels = {"a": 2, "b": 1, "c": 0, "d": 1}
    pairs = make_pairs(labels)
    as_set = {(p.higher, p.lower) for p in pairs}
    assert as_set == {("a", "b"), ("a", "d"), ("a", "c"), ("b", "c"), ("d", "c")}
    big = {f"x{i}": i % 3 for i in range(300)}
    capped = make_pairs(big, max_pairs=1000, seed=4)
    assert len(capped) == 1000 and capped == make_pairs(big, max_pairs=1000, seed=4)
    assert all(big[p.higher] > big[p.lower] for p in capped)
    with pytest.raises(ValidationError):
        make_pairs({"a": 1, "b": 1})


# --- polynomial map ----------------------------------------------------------

def test_poly5_dimension():
    assert poly5_map([0.1, 0.2, 0.3, 0.4, 0.5]).size == 252 == math.comb(10, 5)
    assert poly_dim(4) == 126 and poly5_map([1, 2, 3, 4]).size == 126


def test_poly5_examples():
    z = poly5_map([0, 0, 0, 0, 0])
    assert z[0] == 1 and not np.any(z[1:])
    assert np.all(poly5_map([1, 1, 1, 1, 1]) == 1)
    two = poly5_map([2, 0, 0, 0, 0])
    nz = sorted(two[two != 0].tolist())
    assert nz == [1, 2, 4, 8, 16, 32]


def test_monomials_graded_lex_and_complete():
    exps = monomial_exponents(5)
    assert set(exps) == oracles.monomials(5, 5) and len(exps) == 252
    degrees = [sum(e) for e in exps]
    assert degrees == sorted(degrees)
    for d in range(6):
        block = [e for e in exps if sum(e) == d]
        assert block == sorted(block, reverse=True)


def test_poly5_values_match_direct_products():
    x = [0.3, -1.2, 0.7, 2.0, -0.4]
    got = poly5_map(x)
    for e, v in zip(monomial_exponents(5), got):
        assert v == pytest.approx(math.prod(xi ** ei for xi, ei in zip(x, e)), rel=1e-12, abs=1e-15)


def test_poly5_errors():
    with pytest.raises(ValidationError):
        poly5_map([1.0, float("nan"), 0, 0, 0])
    with pytest.raises(ValidationError):
        poly5_map([])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=5, max_size=5), st.lists(st.floats(-3, 3), min_size=5, max_size=5))
def test_poly5_injective(a, b):
    if not np.allclose(a, b, atol=1e-9, rtol=0):
        assert not np.array_equal(poly5_map(a), poly5_map(b))


# --- scores and partition ----------------------------------------------------

def toy_model(lo=-2.0, hi=6.0):
    return QualityModel(KINDS4, [LinearRanker(np.ones(2), k) for k in KINDS4], np.zeros(4), np.ones(4),
                        LinearRanker(np.zeros(126), "poly5"), lo, hi)


def test_score_anchors():
    m = toy_model()
    assert score_from_raw(m, -2.0) == 0
    assert score_from_raw(m, 6.0) == 100
    assert score_from_raw(m, 2.0) == 50
    assert score_from_raw(m, -50.0) == 0 and score_from_raw(m, 50.0) == 100


@settings(max_examples=100, deadline=None)
@given(st.floats(-10, 10), st.floats(-10, 10))
def test_score_monotone(a, b):
    m = toy_model()
    if a >= b:
        assert score_from_raw(m, a) >= score_from_raw(m, b)


def test_round_half_away():
    assert [round_half_away(v) for v in (0.5, 1.5, 2.5, -0.5, -2.5, 2.4999)] == [1, 2, 3, -1, -3, 2]


def test_model_invariants():
    with pytest.raises(NumericError):
        toy_model(1.0, 1.0)
    with pytest.raises(ValidationError):
        QualityModel(KINDS4, [], np.zeros(4), np.ones(4), LinearRanker(np.zeros(252)), 0.0, 1.0)


def test_partition_boundaries():
    scores = {str(s): s for s in (0, 29, 30, 59, 60, 100)}
    sets = partition(scores)
    assert sets == {"low": ["0", "29"], "middle": ["30", "59"], "high": ["60", "100"]}
    assert [len(v) for v in partition({"a": 29, "b": 30, "c": 60}).values()] == [1, 1, 1]
    assert partition({f"r{i}": 100 for i in range(5)})["high"] == [f"r{i}" for i in range(5)]
    with pytest.raises(ValidationError):
        partition({"a": 101})


def test_partition_random_matches_brute_force():
    rng = np.random.default_rng(8)
    scores = {f"r{i}": int(s) for i, s in enumerate(rng.integers(0, 101, 1000))}
    sets = partition(scores)
    for c in ("low", "middle", "high"):
        assert len(sets[c]) == sum(1 for s in scores.values() if oracles.classify(s) == c)
    assert all(categorize(s) == oracles.classify(s) for s in range(101))


# --- two-level model ---------------------------------------------------------

def test_quality_model_separated_classes():
    labels, feats = quality_features(0)
    m = train_quality_model(labels, feats, iters=300)
    assert m.kinds == KINDS4 and m.level2.weights.size == 126
    assert m.notes["external_slot"] == "absent"
    raw = {rid: m.raw_score({k: feats[k][rid] for k in KINDS4}) for rid in labels}
    pairs = make_pairs(labels)
    assert pairwise_accuracy(raw, pairs) == 1.0
    scores = [predict_quality(m, {k: feats[k][rid] for k in KINDS4}) for rid in labels]
    assert all(0 <= s <= 100 for s in scores)


def test_quality_model_five_kinds_dim_252():
    kinds = KINDS4 + ("external",)
    labels, feats = quality_features(1, dims=(6, 8, 5, 7, 4), kinds=kinds)
    m = train_quality_model(labels, feats, iters=200)
    assert m.kinds == ("hog", "gabor", "gist", "lbp", "external") and m.level2.weights.size == 252


def test_quality_model_gist_fill():
    labels, feats = quality_features(2)
    m = train_quality_model(labels, feats, iters=100, fill_external_with_gist=True)
    assert len(m.kinds) == 5 and m.notes["external_slot"] == "gist"


def test_quality_model_errors():
    labels, feats = quality_features(3)
    with pytest.raises(ValidationError):
        train_quality_model({k: 1 for k in labels}, feats)
    partial = {k: v for k, v in feats.items() if k != "lbp"}
    with pytest.raises(ValidationError):
        train_quality_model(labels, partial)
    missing_row = dict(feats)
    missing_row["hog"] = dict(list(feats["hog"].items())[1:])
    with pytest.raises(ValidationError):
        train_quality_model(labels, missing_row)


def test_quality_model_deterministic_and_roundtrip(tmp_path):
    labels, feats = quality_features(4)
    a = train_quality_model(labels, feats, iters=150, seed=3)
    b = train_quality_model(labels, feats, iters=150, seed=3)
    assert model_text(a) == model_text(b)
    save_model(a, tmp_path / "m.txt")
    c = load_model(tmp_path / "m.txt")
    assert model_text(c) == model_text(a)
    for rid in labels:
        f = {k: feats[k][rid] for k in KINDS4}
        assert c.raw_score(f) == a.raw_score(f)
        assert predict_quality(c, f) == predict_quality(a, f)


def test_quality_model_label_shuffle_control():
    labels, feats = quality_features(5, n=60)
    ids = sorted(labels)
    train_ids, held = ids[:40], ids[40:]
    held_pairs = make_pairs({i: labels[i] for i in held})
    rng = np.random.default_rng(0)
    accs = []
    for _ in range(10):
        perm = rng.permutation([labels[i] for i in train_ids])
        m = train_quality_model(dict(zip(train_ids, map(int, perm))), feats, iters=150)
        raw = {i: m.raw_score({k: feats[k][i] for k in KINDS4}) for i in held}
        accs.append(pairwise_accuracy(raw, held_pairs))
    assert abs(float(np.mean(accs)) - 0.5) <= 0.1


def test_parse_model_errors():
    with pytest.raises(ValidationError):
        parse_model("something else\n")
    with pytest.raises(ValidationError):
        parse_model("faceqe-fiqa-model 9\n")
