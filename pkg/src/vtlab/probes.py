"""Evaluation: correspondence precision, temporal linear probes, similarity
distributions and toy retrieval."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from . import diffmath as dm
from .objectives import discover_correspondence, make_batch, pool_sentences, pool_videos, sample_offsets, warp_batch
from .rng import Stream

HIST_BINS = 64


class ProbeError(ValueError):
    pass


# ---------------------------------------------------------------- correspondence


def correspondence_precision(cmap, gt_align: list, T: int) -> tuple[float, float]:
    """Micro-averaged precision over valid clips and recall over clips with ground truth.

    ``gt_align`` is the per-video list of per-clip word-position arrays.
    """
    hits = chosen = 0
    rec_hits = rec_total = 0
    for row, sel in enumerate(cmap.selected):
        gt = set(np.asarray(gt_align[row // T][row % T]).tolist())
        common = len(set(sel) & gt) if cmap.valid[row] else 0
        if cmap.valid[row]:
            hits += common
            chosen += len(sel)
        if gt:
            rec_hits += common
            rec_total += len(gt)
    precision = hits / chosen if chosen else 0.0
    recall = rec_hits / rec_total if rec_total else 0.0
    return precision, recall


def corpus_precision(params, videos, K: int, strategy: str, seed: int = 0, chunk: int = 64):
    hits = chosen = rec_hits = rec_total = 0.0
    root = Stream(seed).child("precision")
    for j, start in enumerate(range(0, len(videos), chunk)):
        part = videos[start:start + chunk]
        batch = make_batch(params, part)
        cmap = discover_correspondence(batch, K, strategy, root.child(j))
        p, r = correspondence_precision(cmap, batch.gt_align, batch.T)
        n_sel = sum(len(s) for s, ok in zip(cmap.selected, cmap.valid) if ok)
        n_gt = sum(len(g) for v in batch.gt_align for g in v)
        hits += p * n_sel
        chosen += n_sel
        rec_hits += r * n_gt
        rec_total += n_gt
    return (hits / chosen if chosen else 0.0), (rec_hits / rec_total if rec_total else 0.0)


# ---------------------------------------------------------------- linear probes


@dataclass
class ProbeReport:
    accuracy: float
    confusion: np.ndarray
    curve: list = field(default_factory=list)
    train_size: int = 0
    test_size: int = 0

    def as_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "confusion": self.confusion.tolist(),
            "curve": self.curve,
            "train_size": self.train_size,
            "test_size": self.test_size,
        }


def train_linear_probe(X_train, y_train, X_test, y_test, num_classes: int, seed: int,
                       epochs: int = 100, lr: float = 1e-2, batch_size: int = 128) -> ProbeReport:
    """Softmax regression trained with Adam; reports held-out accuracy."""
    from .trainer import AdamState, adam_step

    if len(np.unique(y_train)) < 2:
        raise ProbeError("probe training data has a single class")
    mu = X_train.mean(axis=0)
    sd = X_train.std(axis=0) + 1e-8
    Xtr = (X_train - mu) / sd
    Xte = (X_test - mu) / sd
    F = Xtr.shape[1]
    root = Stream(seed)
    params = {"W": (2.0 * root.child("W").uniform((F, num_classes)) - 1.0) / np.sqrt(F),
              "b": np.zeros(num_classes)}
    state = AdamState(0, {}, {})
    onehot = np.eye(num_classes)[y_train]
    curve = []
    for epoch in range(epochs):
        order = root.child("shuffle", epoch).permutation(len(Xtr))
        losses = []
        for start in range(0, len(Xtr), batch_size):
            idx = order[start:start + batch_size]
            tape = dm.Tape()
            W = tape.param("W", params["W"])
            b = tape.param("b", params["b"])
            logits = dm.add(dm.matmul(Xtr[idx], W), b)
            loss = dm.mean(dm.sub(dm.logsumexp(logits), dm.rowdot(logits, onehot[idx])))
            grads = dm.backward(tape, loss)
            adam_step(params, grads, state, lr)
            losses.append(float(loss.value))
        curve.append(float(np.mean(losses)))
    pred = np.argmax(Xte @ params["W"] + params["b"], axis=1)
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(confusion, (y_test, pred), 1)
    return ProbeReport(float(np.mean(pred == y_test)), confusion, curve, len(Xtr), len(Xte))


def _video_split(num_videos: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    if num_videos < 2:
        raise ProbeError("probes need at least two videos")
    perm = Stream(seed).child("probe-split").permutation(num_videos)
    half = num_videos // 2
    return np.sort(perm[:half]), np.sort(perm[half:])


def context_features(features: np.ndarray) -> np.ndarray:
    """Per-clip probe inputs: the clip feature next to its offset from the video mean."""
    features = np.asarray(features, dtype=np.float64)
    mean = features.mean(axis=1, keepdims=True)
    return np.concatenate([features, features - mean], axis=2)


def order_dataset(features: np.ndarray, videos: np.ndarray):
    ctx = context_features(features)
    M, T, F = ctx.shape
    X = ctx[videos].reshape(-1, F)
    y = np.tile(np.arange(T), len(videos))
    return X, y


def distance_dataset(features: np.ndarray, videos: np.ndarray):
    """All unordered clip pairs (t1 < t2) of each video; label ``t2 - t1 - 1``."""
    features = np.asarray(features, dtype=np.float64)
    T = features.shape[1]
    t1, t2 = np.triu_indices(T, k=1)
    X = np.concatenate([features[videos][:, t1], features[videos][:, t2]], axis=2)
    X = X.reshape(-1, X.shape[-1])
    y = np.tile(t2 - t1 - 1, len(videos))
    return X, y


def order_probe(features: np.ndarray, seed: int, **kw) -> ProbeReport:
    """Predict each clip's index in ``[0, T)`` from frozen features shaped ``(videos, T, D)``."""
    features = np.asarray(features, dtype=np.float64)
    M, T, _ = features.shape
    tr, te = _video_split(M, seed)
    Xtr, ytr = order_dataset(features, tr)
    Xte, yte = order_dataset(features, te)
    return train_linear_probe(Xtr, ytr, Xte, yte, T, Stream(seed).child("order").key, **kw)


def distance_probe(features: np.ndarray, seed: int, **kw) -> ProbeReport:
    """Predict ``|t1 - t2|`` (as class ``|t1 - t2| - 1``) from concatenated clip-pair features."""
    features = np.asarray(features, dtype=np.float64)
    M, T, _ = features.shape
    if T < 3:
        raise ProbeError("distance probe needs T >= 3 for more than one class")
    tr, te = _video_split(M, seed)
    Xtr, ytr = distance_dataset(features, tr)
    Xte, yte = distance_dataset(features, te)
    return train_linear_probe(Xtr, ytr, Xte, yte, T - 1, Stream(seed).child("distance").key, **kw)


def clip_features(params, videos) -> np.ndarray:
    """Frozen normalized clip embeddings shaped ``(videos, T, D)``."""
    from .encoders import encode_video

    T = len(videos[0].clip_actions)
    V, _ = encode_video(params, np.concatenate([v.clip_raw for v in videos]))
    return V.reshape(len(videos), T, -1)


# ---------------------------------------------------------------- similarities


@dataclass
class SimilarityStats:
    reference: np.ndarray
    bias: np.ndarray
    projection: np.ndarray

    SETS = ("reference", "bias", "projection")

    def means(self) -> dict:
        return {k: float(np.mean(getattr(self, k))) for k in self.SETS}

    def variances(self) -> dict:
        return {k: float(np.var(getattr(self, k))) for k in self.SETS}

    @staticmethod
    def bin_edges() -> np.ndarray:
        return np.linspace(-1.0, 1.0, HIST_BINS + 1)

    def histograms(self) -> dict:
        edges = self.bin_edges()
        out = {}
        for k in self.SETS:
            x = np.clip(getattr(self, k), -1.0, 1.0)
            out[k] = np.histogram(x, bins=edges)[0]
        return out

    def histogram_csv(self) -> str:
        edges = self.bin_edges()
        hist = self.histograms()
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bin_left", "bin_right", *self.SETS])
        for i in range(HIST_BINS):
            w.writerow([repr(float(edges[i])), repr(float(edges[i + 1])), *(int(hist[k][i]) for k in self.SETS)])
        return buf.getvalue()

    def summary(self) -> dict:
        return {"count": int(len(self.reference)), "mean": self.means(), "variance": self.variances()}


def similarity_distributions(params, videos, K: int, delta_max: int, seed: int,
                             strategy: str = "clip-topk", warp_sign: bool = True, warp_dist: bool = True,
                             min_samples: int = 2000, chunk: int = 64) -> SimilarityStats:
    """Reference, bias and projection cosines on shared (clip, offset, positive) draws.

    Passes over ``videos`` are repeated with fresh offsets until at least
    ``min_samples`` samples are collected.
    """
    if not videos:
        raise ProbeError("empty sample")
    ref, bias, proj = [], [], []
    root = Stream(seed).child("similarity")
    warp_W = params.tensors["warp.W"] if hasattr(params, "tensors") else params["warp.W"]
    total, rnd = 0, 0
    while total < min_samples:
        before = total
        for j, start in enumerate(range(0, len(videos), chunk)):
            part = videos[start:start + chunk]
            batch = make_batch(params, part)
            s = root.child(rnd, j)
            cmap = discover_correspondence(batch, K, strategy, s.child("strategy"))
            spec = sample_offsets(batch.T, delta_max, s.child("offsets"), batch.N)
            Z, zdeg = warp_batch(batch, spec, warp_W, warp_sign, warp_dist)
            rows = np.flatnonzero(cmap.valid & ~zdeg)
            qp = cmap.q_plus[rows]
            V = batch.V
            ref.append(np.sum(V[rows] * qp, axis=1))
            bias.append(np.sum(V[spec.context_rows()[rows]] * qp, axis=1))
            proj.append(np.sum(Z[rows] * qp, axis=1))
            total += len(rows)
        rnd += 1
        if total == before:
            raise ProbeError("no usable (clip, warp) samples")
    return SimilarityStats(np.concatenate(ref), np.concatenate(bias), np.concatenate(proj))


# ---------------------------------------------------------------- retrieval


@dataclass
class RetrievalReport:
    r1: float
    r5: float
    r10: float
    median_rank: float
    pool_size: int

    def as_dict(self) -> dict:
        return {"R@1": self.r1, "R@5": self.r5, "R@10": self.r10, "MdR": self.median_rank,
                "pool_size": self.pool_size}


def ranks_from_scores(scores: np.ndarray) -> np.ndarray:
    """1-based rank of the diagonal entry in each row; ties go to the lower column index."""
    scores = np.asarray(scores, dtype=np.float64)
    n = scores.shape[0]
    diag = scores[np.arange(n), np.arange(n)]
    better = scores > diag[:, None]
    tied_before = (scores == diag[:, None]) & (np.arange(n)[None, :] < np.arange(n)[:, None])
    return 1 + better.sum(axis=1) + tied_before.sum(axis=1)


def retrieval_from_scores(scores: np.ndarray) -> RetrievalReport:
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise ProbeError("empty retrieval pool")
    ranks = ranks_from_scores(scores)
    return RetrievalReport(float(np.mean(ranks <= 1)), float(np.mean(ranks <= 5)),
                           float(np.mean(ranks <= 10)), float(np.median(ranks)), len(ranks))


def retrieval_eval(params, videos, min_pool: int = 10) -> RetrievalReport:
    """Video-to-sentence retrieval on pooled features over a held-out pool."""
    if len(videos) == 0:
        raise ProbeError("empty retrieval pool")
    if len(videos) < min_pool:
        raise ProbeError(f"retrieval pool of {len(videos)} is smaller than {min_pool}")
    batch = make_batch(params, videos)
    vbar, _ = pool_videos(batch)
    qbar, _ = pool_sentences(batch)
    return retrieval_from_scores(vbar @ qbar.T)
