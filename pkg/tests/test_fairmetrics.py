import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import special_ortho_group

from vldebias.errors import ConfigError, DegenerateError, DomainError, LabelError
from vldebias.fairmetrics import (
    FairnessReport,
    RetrievalRun,
    able,
    association_scores,
    effect_size,
    evaluate,
    maxskew_at_k,
    mean_maxskew,
    ndkl_at_k,
    rank_order,
    recall_at_k,
    reports_to_csv,
    reports_to_json,
    retrieval_runs,
    uniform_desired,
    zeroshot_acc,
)

from . import oracles
from .conftest import make_set

UNIFORM = uniform_desired(["male", "female"])


def run_of(values, desired=UNIFORM):
    k = len(values)
    return RetrievalRun("q", tuple(f"g{i}" for i in range(k)), tuple(np.linspace(1, 0, k)),
                        tuple(values), "gender", desired)


def test_maxskew_examples():
    assert maxskew_at_k(run_of(["male", "female", "female", "male"]), 4) == 0.0
    assert maxskew_at_k(run_of(["male", "male", "female", "male"]), 4) == pytest.approx(math.log(1.5), abs=1e-15)
    assert maxskew_at_k(run_of(["male", "male", "female", "male"]), 4) == pytest.approx(0.4055, abs=1e-4)
    assert maxskew_at_k(run_of(["female"] * 6), 6) == pytest.approx(math.log(2), abs=1e-15)


def test_ndkl_examples():
    r = run_of(["male", "female"])
    expected = math.log(2) / (1 + 1 / math.log2(3))
    assert ndkl_at_k(r, 2) == pytest.approx(expected, abs=1e-15)
    assert ndkl_at_k(r, 2) == pytest.approx(0.4250, abs=1e-4)
    single = run_of(["male"] * 5, {"male": 1.0})
    assert ndkl_at_k(single, 5) == 0.0 and maxskew_at_k(single, 5) == 0.0


def test_metric_errors():
    r = run_of(["male", None, "female"])
    with pytest.raises(LabelError):
        maxskew_at_k(r, 3)
    with pytest.raises(LabelError):
        ndkl_at_k(r, 3)
    with pytest.raises(ConfigError):
        maxskew_at_k(r, 4)
    with pytest.raises(ValueError):
        RetrievalRun("q", ("a", "a"), (1.0, 0.5), ("male", "male"), "gender", UNIFORM)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 10), st.integers(2, 3))
def test_skew_and_ndkl_match_brute_force(seed, k, n_values):
    run, values, desired = oracles.random_run(np.random.default_rng(seed), k, n_values)
    for kk in range(1, k + 1):
        assert abs(maxskew_at_k(run, kk) - oracles.maxskew(values, desired, kk)) <= 1e-10
        nd = ndkl_at_k(run, kk)
        assert abs(nd - oracles.ndkl(values, desired, kk)) <= 1e-10
        assert nd >= 0


def biased_sets():
    rng = np.random.default_rng(0)
    g = rng.standard_normal((30, 4))
    glabels = [(f"g{i:02d}", "image", "c", {"gender": ["male", "female"][i % 2]}) for i in range(30)]
    q = rng.standard_normal((5, 4))
    qlabels = [(f"q{i}", "text", "c", {}) for i in range(5)]
    return make_set(q, qlabels), make_set(g, glabels, vocab={"gender": ["male", "female"]})


def test_metrics_invariant_under_monotone_score_transform():
    queries, gallery = biased_sets()
    runs = retrieval_runs(queries, gallery, "gender", 10)
    for r in runs:
        warped = RetrievalRun(r.query_id, r.retrieved, tuple(np.exp(3 * np.array(r.scores))),
                              r.values, r.axis, r.desired)
        assert maxskew_at_k(warped, 10) == maxskew_at_k(r, 10)
        assert ndkl_at_k(warped, 10) == ndkl_at_k(r, 10)


def test_rank_order_ties_by_id():
    order = rank_order(np.array([0.5, 0.9, 0.5, 0.5]), ["d", "a", "b", "c"])
    assert order.tolist() == [1, 2, 3, 0]


def test_mean_maxskew_thread_invariant():
    queries, gallery = biased_sets()
    runs = retrieval_runs(queries, gallery, "gender", 10)
    one = mean_maxskew(runs, 10, threads=1)
    four = mean_maxskew(runs, 10, threads=4)
    assert one == four
    assert one[0] == pytest.approx(math.fsum(one[1]) / 5, abs=0)


def test_recall_hand_case():
    # query 0 hits at rank 1; query 1 only via a tie resolved by id; query 2 misses
    scores_q = np.eye(3)
    gallery = np.array([[1.0, 0, 0], [0, 0.5, 0.5], [0, 0.5, 0.5], [0, 0, 0]])
    gids = ["a", "b", "c", "z"]
    truth = {"q0": {"a"}, "q1": {"b"}, "q2": {"z"}}
    assert recall_at_k(scores_q, gallery, truth, 1, ["q0", "q1", "q2"], gids) == pytest.approx(200 / 3)
    assert recall_at_k(scores_q, gallery, truth, 4, ["q0", "q1", "q2"], gids) == 100.0
    with pytest.raises(LabelError):
        recall_at_k(scores_q, gallery, {"q0": {"a"}}, 1, ["q0", "q1", "q2"], gids)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_recall_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    nq, ng, k = rng.integers(1, 6), rng.integers(2, 12), rng.integers(1, 6)
    Q, G = rng.standard_normal((nq, 3)), np.round(rng.standard_normal((ng, 3)), 1)
    gids = [f"g{i:02d}" for i in rng.permutation(ng)]
    qids = [f"q{i}" for i in range(nq)]
    truth = {q: set(rng.choice(gids, rng.integers(1, 3), replace=False)) for q in qids}
    k = int(min(k, ng))
    expected = oracles.recall(Q @ G.T, gids, truth, qids, k)
    assert abs(recall_at_k(Q, G, truth, k, qids, gids) - expected) <= 1e-10


def test_zeroshot_examples():
    rng = np.random.default_rng(1)
    T = np.linalg.qr(rng.standard_normal((10, 10)))[0][:6]
    labels = np.arange(6)
    assert zeroshot_acc(T, labels, T) == (100.0, 100.0)
    assert zeroshot_acc(-T, labels, T, ks=(1,)) == (0.0,)
    with pytest.raises(ConfigError):
        zeroshot_acc(T[:3], labels[:3], T[:3])
    imgs = rng.standard_normal((1000, 16))
    cls = rng.standard_normal((10, 16))
    top1, _ = zeroshot_acc(imgs, np.arange(1000) % 10, cls)
    assert abs(top1 - 10.0) <= 5.0


def test_able_examples():
    assert round(able(0.6831, 0.218), 2) == 73.87
    assert round(able(0.6805, 0.080), 2) == 78.35
    assert able(1.0, 0.0) == 100.0
    with pytest.raises(DomainError):
        able(0.0, 0.1)
    with pytest.raises(DomainError):
        able(0.5, -0.1)


def test_able_monotone_on_grid():
    accs = np.linspace(0.05, 1.0, 20)
    skews = np.linspace(0.0, 1.0, 21)
    grid = np.array([[able(a, s) for s in skews] for a in accs])
    assert np.all(np.diff(grid, axis=0) > 0)
    assert np.all(np.diff(grid, axis=1) < 0)


def test_effect_size_examples():
    rng = np.random.default_rng(2)
    X = rng.standard_normal((4, 5))
    A, B = rng.standard_normal((3, 5)), rng.standard_normal((3, 5))
    assert effect_size(X, X.copy(), A, B).effect_size == pytest.approx(0.0, abs=1e-12)
    # s = +c on X and -c on Y: X along a, Y along b with a orthogonal to b
    a, b = np.eye(5)[0], np.eye(5)[1]
    res = effect_size(np.tile(a, (3, 1)), np.tile(b, (3, 1)), a[None], b[None])
    assert res.effect_size == pytest.approx(2.0, abs=1e-12)
    assert res.exact and res.n_permutations == 20 and res.p_value == pytest.approx(1 / 20)
    with pytest.raises(DegenerateError):
        effect_size(np.tile(a, (2, 1)), np.tile(a, (2, 1)), a[None], b[None])


def test_effect_size_rotation_invariant():
    rng = np.random.default_rng(3)
    X, Y, A, B = (rng.standard_normal((4, 6)) for _ in range(4))
    R = special_ortho_group.rvs(6, random_state=3)
    r0 = effect_size(X, Y, A, B)
    r1 = effect_size(X @ R, Y @ R, A @ R, B @ R)
    assert r1.effect_size == pytest.approx(r0.effect_size, abs=1e-12)
    assert r1.p_value == r0.p_value


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 4), st.integers(1, 4))
def test_effect_size_matches_brute_force(seed, nx, ny):
    rng = np.random.default_rng(seed)
    X, Y = rng.standard_normal((nx, 4)), rng.standard_normal((ny, 4))
    A, B = rng.standard_normal((2, 4)), rng.standard_normal((3, 4))
    d, p = oracles.effect_and_exact_p(X.tolist(), Y.tolist(), A.tolist(), B.tolist())
    res = effect_size(X, Y, A, B)
    assert res.exact
    assert abs(res.effect_size - d) <= 1e-10
    assert abs(res.p_value - p) <= 1e-10


def test_effect_size_sampled_is_seeded():
    rng = np.random.default_rng(4)
    X, Y, A, B = (rng.standard_normal((10, 6)) for _ in range(4))
    a = effect_size(X, Y, A, B, n_permutations=500, seed=1)
    assert not a.exact and a.n_permutations == 500
    assert a == effect_size(X, Y, A, B, n_permutations=500, seed=1)


def test_association_scores_definition():
    W = np.array([[1.0, 0], [0, 2]])
    A = np.array([[1.0, 0]])
    B = np.array([[0, 1.0], [1.0, 1.0]])
    r = 1 / math.sqrt(2)
    assert np.allclose(association_scores(W, A, B), [1 - r / 2, 0 - (1 + r) / 2], atol=1e-15)


def test_report_layout(small_synth):
    rep = evaluate(small_synth.queries, small_synth.gallery, small_synth.text_set, ["gender"], k=20)
    names = [c for c, _ in rep.csv_columns()]
    assert names == ["Method", "gender MS", "gender NDKL", "Top-1", "Top-5", "TR", "IR", "ABLE"]
    assert rep.able == pytest.approx(able(rep.top1 / 100, rep.fairness["gender"][0]))
    csv_text = reports_to_csv([rep, FairnessReport(method="empty", fairness={"gender": (0.0, 0.0)})])
    lines = csv_text.splitlines()
    assert lines[0] == ",".join(names) and lines[1].startswith("original,") and lines[2].endswith(",,,,,")
    obj = json.loads(reports_to_json([rep]))
    assert obj[0]["fairness"]["gender"]["MS"] == rep.fairness["gender"][0]
    assert len(obj[0]["per_query"]["gender"]) == len(small_synth.queries)


def test_evaluate_thread_invariant(small_synth):
    a = evaluate(small_synth.queries, small_synth.gallery, small_synth.text_set, ["gender"], k=20)
    b = evaluate(small_synth.queries, small_synth.gallery, small_synth.text_set, ["gender"], k=20,
                 threads=3)
    assert reports_to_json([a]) == reports_to_json([b])
