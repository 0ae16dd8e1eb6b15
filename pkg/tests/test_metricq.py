from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import reference_metricq as ref
from fixtures import WORKED, WORKED_EMBEDDINGS, WORKED_LOGPROBS, TableProvider
from treemoa.embedding import MockEmbeddingProvider
from treemoa.metricq import (
    DEFAULT_TAU,
    DegenerateMatrixError,
    MetricQError,
    MetricQState,
    QualityScore,
    calibrate,
    corr,
    decide_exit,
    frob_cos_sim,
    geometric_mean_confidence,
    gram,
    metric_q,
    quality,
    rms_aggregate,
    sim_matrix,
    weighted_similarity,
)

# Frozen from tests/reference_metricq.py on the fixed 3x2 pair below.
FCS_3x2 = 0.7990606514819465
M_A = np.array([[1.0, 2.0], [0.5, -1.0], [3.0, 0.25]])
M_B = np.array([[2.0, -1.0], [1.0, 1.0], [-0.5, 2.0]])


def test_confidence_examples():
    assert geometric_mean_confidence([0, 0, 0]) == 1.0
    assert geometric_mean_confidence([-0.1, -0.3]) == pytest.approx(0.818731, abs=1e-6)
    assert geometric_mean_confidence([-math.log(4)]) == pytest.approx(0.25, abs=1e-15)
    for bad in ([], [0.1], [float("nan")]):
        with pytest.raises(MetricQError):
            geometric_mean_confidence(bad)


def test_rms_examples():
    assert rms_aggregate([1.0]) == 1.0
    assert rms_aggregate([0.6, 0.8]) == pytest.approx(math.sqrt(0.5), abs=1e-12)
    assert rms_aggregate([0.3] * 3) == pytest.approx(0.3, abs=1e-15)
    with pytest.raises(MetricQError):
        rms_aggregate([])


def test_corr_examples():
    np.testing.assert_allclose(corr(np.diag([4.0, 9.0])), np.eye(2))
    c = np.array([[1, 0.5], [0.5, 1]])
    np.testing.assert_allclose(corr(c), c)
    np.testing.assert_allclose(corr(np.array([[4.0, 3.0], [3.0, 9.0]])), c)
    with pytest.raises(MetricQError):
        corr(np.ones((2, 3)))


def test_corr_degenerate_column_zeroed():
    out = corr(np.array([[4.0, 0.0], [0.0, 0.0]]))
    np.testing.assert_array_equal(out, [[1.0, 0.0], [0.0, 0.0]])


def test_fcs_examples():
    u = np.eye(2)
    assert frob_cos_sim(u, u) == pytest.approx(1.0, abs=1e-9)
    v = np.array([[1, 0.5], [0.5, 1]])
    assert frob_cos_sim(u, v) == pytest.approx(2 / (math.sqrt(2) * math.sqrt(2.5)), abs=1e-12)
    assert frob_cos_sim(7.3 * u, v) == pytest.approx(frob_cos_sim(u, v), abs=1e-12)
    with pytest.raises(DegenerateMatrixError):
        frob_cos_sim(np.zeros((2, 2)), u)


def test_sim_matrix_examples():
    s = sim_matrix([M_A, M_A])
    np.testing.assert_allclose(s, np.ones((2, 2)), atol=1e-12)
    assert sim_matrix([M_A]).tolist() == [[1.0]]
    assert sim_matrix([M_A, M_B])[0, 1] == pytest.approx(FCS_3x2, abs=1e-12)
    assert ref.fcs(ref.gram(M_A.tolist()), ref.gram(M_B.tolist())) == pytest.approx(FCS_3x2, abs=1e-12)
    with pytest.raises(MetricQError):
        sim_matrix([M_A, np.ones((2, 3))])


def test_sim_matrix_zero_embedding_counts_as_zero_similarity():
    s = sim_matrix([np.zeros((3, 2)), M_A])
    assert s[0, 1] == 0.0 and s[0, 0] == 0.0 and s[1, 1] == pytest.approx(1.0)


def test_weighted_similarity_examples():
    c = math.exp(-0.2)
    w, p = weighted_similarity([c], np.array([[1.0]]))
    assert (w, p) == (pytest.approx(c * c), 1.0)
    w, p = weighted_similarity([c, c], np.array([[1, 0.8], [0.8, 1]]))
    assert w == pytest.approx(3 * math.exp(-0.4), abs=1e-12)
    assert p == pytest.approx(2.8 / 3, abs=1e-12)
    _, p = weighted_similarity([0.2, 0.9, 0.4], np.ones((3, 3)))
    assert p == pytest.approx(1.0)


def test_strict_lower_triangle_option():
    c = math.exp(-0.2)
    w, p = weighted_similarity([c, c], np.array([[1, 0.8], [0.8, 1]]), include_diagonal=False)
    assert w == pytest.approx(c * c) and p == pytest.approx(0.8)


def test_calibrate_examples():
    assert calibrate(0.7, 0.7) == 1.0
    assert calibrate(2.8 / 3, 0.7) == pytest.approx(2 / 3, abs=1e-12)
    assert calibrate(-0.5, 0.7) == 0.0
    for tau in (0.0, -0.1, 1.5):
        with pytest.raises(MetricQError):
            calibrate(0.5, tau)


def test_quality_and_exit_examples():
    assert quality(0.818731, 0.666667) == pytest.approx(0.738797, abs=1e-6)
    rng = np.random.default_rng(0)
    assert not any(decide_exit(0.0, rng).exited for _ in range(200))
    assert all(decide_exit(1.0, rng).exited for _ in range(200))


def test_worked_fixture_matches_reference():
    score, decision = metric_q([0, 1], WORKED_LOGPROBS, DEFAULT_TAU, TableProvider(WORKED_EMBEDDINGS))
    oracle = ref.reference_from_embeddings([m.tolist() for m in WORKED_EMBEDDINGS], WORKED_LOGPROBS)
    assert decision is None
    for key, got in (("Cbar", score.cbar), ("W", score.w), ("P", score.p), ("B", score.b), ("Q", score.q)):
        assert got == pytest.approx(oracle[key], abs=1e-12)
        assert got == pytest.approx(WORKED[key], abs=1e-6)
    assert score.sim[0][1] == pytest.approx(0.8, abs=1e-12)


def test_single_output_all_zero_logprobs():
    score, _ = metric_q([[5, 6, 7]], [[0.0, 0.0]], provider=MockEmbeddingProvider(1))
    assert score.cbar == 1.0 and score.p == pytest.approx(1.0)
    assert score.b == pytest.approx(0.571429, abs=1e-6)
    assert score.q == pytest.approx(0.755929, abs=1e-6)


def test_metric_q_input_errors():
    with pytest.raises(MetricQError):
        metric_q([], [], provider=MockEmbeddingProvider())
    with pytest.raises(MetricQError):
        metric_q([[1]], [[0.0], [0.0]], provider=MockEmbeddingProvider())
    with pytest.raises(MetricQError):
        metric_q([[1]], [[0.0]])


def test_incremental_state_matches_batch():
    prov = MockEmbeddingProvider(3)
    outs = [[1, 2, 3, 4], [2, 3, 4, 9, 9], [7, 8, 1]]
    lps = [[-0.1, -0.2], [-0.5], [-0.3, -0.3, -0.9]]
    st_ = MetricQState(prov)
    for i, (o, lp) in enumerate(zip(outs, lps)):
        inc = st_.add(str(i), o, lp)
        batch, _ = metric_q(outs[: i + 1], lps[: i + 1], provider=prov)
        assert inc.q == pytest.approx(batch.q, abs=1e-12)
        np.testing.assert_allclose(inc.sim, batch.sim, atol=1e-12)


def test_score_serialises_all_intermediates():
    score, _ = metric_q([0, 1], WORKED_LOGPROBS, provider=TableProvider(WORKED_EMBEDDINGS))
    d = score.to_dict()
    assert set(d) >= {"C", "Cbar", "Sim", "W", "P", "B", "Q", "tau"}
    assert QualityScore.from_dict(d) == score


def test_decide_exit_reproducible():
    a = [decide_exit(0.5, np.random.default_rng(11)).draw for _ in range(3)]
    b = [decide_exit(0.5, np.random.default_rng(11)).draw for _ in range(3)]
    assert a == b


# -- properties ------------------------------------------------------------------

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def _mat(n_max=6, h=4):
    return arrays(np.float64, st.tuples(st.integers(1, n_max), st.just(h)), elements=finite)


def _nondegenerate(t):
    return np.all(np.diag(gram(t)) > 1e-6)


@settings(max_examples=200, deadline=None)
@given(_mat(), _mat(), st.floats(1e-3, 1e3), st.floats(1e-3, 1e3))
def test_fcs_symmetry_self_and_scale(t1, t2, alpha, beta):
    u, v = gram(t1), gram(t2)
    if not (_nondegenerate(t1) and _nondegenerate(t2)):
        return
    assert frob_cos_sim(u, u) == pytest.approx(1.0, abs=1e-9)
    assert abs(frob_cos_sim(u, v) - frob_cos_sim(v, u)) <= 1e-12
    assert frob_cos_sim(alpha * u, beta * v) == pytest.approx(frob_cos_sim(u, v), abs=1e-9)
    assert abs(frob_cos_sim(u, v)) <= 1 + 1e-9


@settings(max_examples=100, deadline=None)
@given(st.lists(_mat(), min_size=1, max_size=4), st.floats(1e-2, 1e2))
def test_row_scaling_leaves_sim_unchanged(mats, alpha):
    # scale invariance holds away from the degeneracy guard
    if not all(_nondegenerate(m) for m in mats):
        return
    np.testing.assert_allclose(sim_matrix(mats), sim_matrix([alpha * m for m in mats]), atol=1e-9)


logprob_lists = st.lists(st.lists(st.floats(-5, 0, allow_nan=False), min_size=1, max_size=6), min_size=1, max_size=5)


@settings(max_examples=200, deadline=None)
@given(logprob_lists, st.floats(0.05, 1.0), st.data())
def test_score_ranges(lps, tau, data):
    n = len(lps)
    mats = [data.draw(_mat()) for _ in range(n)]
    score, _ = metric_q(list(range(n)), lps, tau, TableProvider(mats))
    assert all(0 < c <= 1 for c in score.confidences)
    assert 0 < score.cbar <= 1
    assert score.cbar**2 == pytest.approx(np.mean(np.square(score.confidences)), rel=1e-9)
    assert 0 <= score.b <= 1 and 0 <= score.q <= 1
    assert np.all(np.abs(score.sim) <= 1 + 1e-9)
    if not all(_nondegenerate(m) for m in mats):
        return
    oracle = ref.reference_from_embeddings([m.tolist() for m in mats], lps, tau)
    assert score.q == pytest.approx(oracle["Q"], abs=1e-9)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0.01, 1.0), min_size=1, max_size=6), st.data())
def test_q_monotone_in_confidence_with_unit_similarity(confs, data):
    i = data.draw(st.integers(0, len(confs) - 1))
    bumped = list(confs)
    bumped[i] = data.draw(st.floats(confs[i], 1.0))
    ones = np.ones((len(confs), len(confs)))

    def q(cs):
        _, p = weighted_similarity(cs, ones)
        return quality(rms_aggregate(cs), calibrate(p))

    assert q(bumped) >= q(confs) - 1e-12
