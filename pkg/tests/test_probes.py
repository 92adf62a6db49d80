import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from vtlab.encoders import init_params
from vtlab.objectives import CorrespondenceMap
from vtlab.probes import (
    HIST_BINS,
    ProbeError,
    SimilarityStats,
    context_features,
    correspondence_precision,
    corpus_precision,
    distance_dataset,
    distance_probe,
    order_probe,
    ranks_from_scores,
    retrieval_eval,
    retrieval_from_scores,
    similarity_distributions,
)
from vtlab.rng import Stream


def cmap(selected, valid=None):
    valid = np.ones(len(selected), bool) if valid is None else np.asarray(valid)
    return CorrespondenceMap(selected, valid, None, "clip-topk", 3)


# ---------------------------------------------------------------- precision


def test_precision_examples():
    gt = [[np.array([0, 1, 2]), np.array([3])]]
    assert correspondence_precision(cmap([[0, 1, 2], [3]]), gt, 2) == (1.0, 1.0)
    assert correspondence_precision(cmap([[4, 5], [0]]), gt, 2) == (0.0, 0.0)
    p, r = correspondence_precision(cmap([[0, 1, 5], [3]]), [[np.array([0, 1]), np.array([3])]], 2)
    assert p == pytest.approx(3 / 4) and r == 1.0
    p, r = correspondence_precision(cmap([[0, 1, 2]]), [[np.array([0, 1])]], 1)
    assert p == pytest.approx(2 / 3) and r == 1.0


def test_precision_skips_invalid_clips():
    gt = [[np.array([0]), np.array([1])]]
    p, r = correspondence_precision(cmap([[0], [5]], valid=[True, False]), gt, 2)
    assert p == 1.0 and r == 0.5


def test_corpus_precision_bounds(small_corpus):
    params = init_params(0, small_corpus.config.raw_dim, 16, 8)
    for strategy in ("clip-topk", "word-topk", "2d-topk", "random"):
        p, r = corpus_precision(params, small_corpus.videos, 3, strategy, seed=1)
        assert 0.0 <= p <= 1.0 and 0.0 <= r <= 1.0
    # one ground-truth word per clip caps clip-topk precision at 1/K
    p, _ = corpus_precision(params, small_corpus.videos, 3, "clip-topk")
    assert p <= 1 / 3 + 1e-12
    assert corpus_precision(params, small_corpus.videos, 2, "random", 4) == corpus_precision(
        params, small_corpus.videos, 2, "random", 4)


# ---------------------------------------------------------------- linear probes


def test_order_probe_reads_one_hot_positions():
    M, T = 40, 8
    feats = np.tile(np.eye(T), (M, 1, 1)) + 0.01 * Stream(0).normal((M, T, T))
    rep = order_probe(feats, seed=0)
    assert rep.accuracy == 1.0
    assert rep.confusion.sum() == rep.test_size == (M // 2) * T
    assert np.trace(rep.confusion) == rep.test_size
    assert rep.curve[-1] < rep.curve[0]


def test_order_probe_random_features_near_chance():
    M, T = 200, 8
    feats = Stream(1).normal((M, T, 16))
    rep = order_probe(feats, seed=0)
    sigma = (1 / T * (1 - 1 / T) / rep.test_size) ** 0.5
    assert abs(rep.accuracy - 1 / T) < 3 * sigma


def test_distance_probe_reads_positions():
    M, T = 40, 6
    feats = np.tile(np.eye(T), (M, 1, 1))
    assert distance_probe(feats, seed=0).accuracy == 1.0
    rnd = distance_probe(Stream(2).normal((200, T, 8)), seed=0)
    # class prior for |dt| favours small gaps; random features do no better than the majority class
    _, y = distance_dataset(np.zeros((1, T, 1)), np.array([0]))
    majority = np.bincount(y).max() / len(y)
    assert rnd.accuracy <= majority + 0.06


def test_distance_dataset_pairs():
    feats = np.arange(2 * 4 * 1, dtype=float).reshape(2, 4, 1)
    X, y = distance_dataset(feats, np.array([1]))
    assert X.shape == (6, 2)
    assert y.tolist() == [0, 1, 2, 0, 1, 0]
    assert X[0].tolist() == [4.0, 5.0]


def test_context_features_shape():
    f = Stream(3).normal((5, 4, 3))
    ctx = context_features(f)
    assert ctx.shape == (5, 4, 6)
    assert np.allclose(ctx[..., 3:].sum(axis=1), 0.0)


def test_probe_errors():
    with pytest.raises(ProbeError):
        order_probe(np.zeros((1, 4, 2)), seed=0)
    with pytest.raises(ProbeError):
        distance_probe(np.zeros((10, 2, 2)), seed=0)
    with pytest.raises(ProbeError, match="single class"):
        order_probe(np.zeros((10, 1, 2)), seed=0)


# ---------------------------------------------------------------- similarities


def test_similarity_stats_invariants(small_corpus):
    params = init_params(5, small_corpus.config.raw_dim, 16, 8)
    stats = similarity_distributions(params, small_corpus.videos, 3, 2, seed=0, min_samples=200)
    n = len(stats.reference)
    assert n >= 200 and len(stats.bias) == n and len(stats.projection) == n
    for k in SimilarityStats.SETS:
        x = getattr(stats, k)
        assert np.all(np.abs(x) <= 1 + 1e-12)
        assert stats.histograms()[k].sum() == n
    assert len(stats.histogram_csv().splitlines()) == HIST_BINS + 1
    again = similarity_distributions(params, small_corpus.videos, 3, 2, seed=0, min_samples=200)
    assert np.array_equal(again.projection, stats.projection)


def test_similarity_errors():
    params = init_params(0, 4, 8, 4)
    with pytest.raises(ProbeError):
        similarity_distributions(params, [], 3, 2, seed=0)


# ---------------------------------------------------------------- retrieval


@given(arrays(np.float64, st.tuples(st.integers(1, 12), st.just(12)),
              elements=st.integers(-3, 3).map(float)))
def test_ranks_match_oracle(block):
    n = block.shape[0]
    scores = block[:, :n]
    assert ranks_from_scores(scores).tolist() == oracles.ranks(scores.tolist())


def test_retrieval_identity_and_reversal():
    n = 20
    rep = retrieval_from_scores(np.eye(n))
    assert (rep.r1, rep.r5, rep.r10, rep.median_rank) == (1.0, 1.0, 1.0, 1.0)
    rep = retrieval_from_scores(-np.eye(n))
    # every off-diagonal score beats the diagonal
    assert (rep.r1, rep.r10, rep.median_rank) == (0.0, 0.0, float(n))
    # constant scores: ties go to the lower index, so row i ranks i + 1
    rep = retrieval_from_scores(np.zeros((n, n)))
    assert rep.r1 == pytest.approx(1 / n) and rep.median_rank == pytest.approx(10.5)


@given(st.integers(0, 10_000), st.integers(5, 30))
def test_retrieval_monotone_in_diagonal_boost(seed, n):
    scores = Stream(seed).normal((n, n))
    before = retrieval_from_scores(scores)
    boosted = scores + 0.5 * np.eye(n)
    after = retrieval_from_scores(boosted)
    assert after.r1 >= before.r1 and after.r5 >= before.r5 and after.r10 >= before.r10
    assert after.median_rank <= before.median_rank
    assert before.r1 <= before.r5 <= before.r10


def test_retrieval_eval_pool_checks(small_corpus):
    params = init_params(0, small_corpus.config.raw_dim, 16, 8)
    rep = retrieval_eval(params, small_corpus.videos)
    assert rep.pool_size == len(small_corpus)
    with pytest.raises(ProbeError):
        retrieval_eval(params, small_corpus.videos[:3])
    with pytest.raises(ProbeError):
        retrieval_eval(params, [])
    with pytest.raises(ProbeError):
        retrieval_from_scores(np.zeros((0, 0)))
