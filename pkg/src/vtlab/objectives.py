"""Coarse, fine-grained and temporal contrastive objectives.

Clip rows of a batch are stored flat: row ``i * T + t`` is clip ``t`` of video
``i``.  Words of all sentences are concatenated; sentence ``i`` owns rows
``word_offsets[i]:word_offsets[i + 1]``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffmath as dm
from .encoders import encode_video, encode_words
from .rng import Stream

STRATEGIES = ("random", "2d-topk", "word-topk", "clip-topk")
LT_MODES = ("cross", "intra")
DENOMINATORS = ("literal", "other-sentences")


class EmptySupportError(ValueError):
    """No clip is left to average a loss over."""


@dataclass(frozen=True)
class LossWeights:
    lambda_c: float = 0.5
    lambda_f: float = 1.0
    lambda_t: float = 1.0
    tau: float = 0.07

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError(f"temperature must be positive (got {self.tau})")
        if min(self.lambda_c, self.lambda_f, self.lambda_t) < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass(frozen=True)
class ObjectiveConfig:
    K: int = 3
    strategy: str = "clip-topk"
    delta_max: int = 4
    lt_mode: str = "cross"
    denominator: str = "literal"
    warp_sign: bool = True
    warp_dist: bool = True
    symmetric_coarse: bool = False

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if self.lt_mode not in LT_MODES:
            raise ValueError(f"unknown temporal loss mode {self.lt_mode!r}")
        if self.denominator not in DENOMINATORS:
            raise ValueError(f"unknown denominator convention {self.denominator!r}")
        if self.K < 1 or self.delta_max < 1:
            raise ValueError("K and delta_max must be >= 1")


@dataclass
class Batch:
    V: object  # (N*T, D) normalized clips, Var or array
    Q: object  # (W, D) normalized words
    T: int
    word_offsets: np.ndarray  # (N+1,)
    v_degenerate: np.ndarray
    q_degenerate: np.ndarray
    gt_align: list | None = None

    @property
    def N(self) -> int:
        return len(self.word_offsets) - 1

    @property
    def word_counts(self) -> np.ndarray:
        return np.diff(self.word_offsets)

    def words_of(self, i: int) -> slice:
        return slice(int(self.word_offsets[i]), int(self.word_offsets[i + 1]))

    def word_owner(self) -> np.ndarray:
        return np.repeat(np.arange(self.N), self.word_counts)


def make_batch(params, videos) -> Batch:
    """Encode a list of corpus videos with ``params`` (arrays or tape variables)."""
    if not videos:
        raise ValueError("empty batch")
    T = len(videos[0].clip_actions)
    V, vdeg = encode_video(params, np.concatenate([v.clip_raw for v in videos]))
    Q, qdeg = encode_words(params, np.concatenate([v.word_raw for v in videos]))
    counts = np.array([v.num_words for v in videos])
    if np.any(counts < 1):
        raise ValueError("every sentence needs at least one word")
    offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    return Batch(V, Q, T, offsets, vdeg, qdeg, [v.gt_align for v in videos])


def batch_from_arrays(V: np.ndarray, words: list) -> Batch:
    """Batch from already-normalized embeddings: ``V`` is ``N x T x D``, ``words`` a list of ``S_i x D``."""
    V = np.asarray(V, dtype=np.float64)
    N, T, D = V.shape
    counts = np.array([len(w) for w in words])
    offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    flatV = V.reshape(N * T, D)
    Q = np.concatenate([np.asarray(w, dtype=np.float64).reshape(-1, D) for w in words])
    return Batch(flatV, Q, T, offsets, np.linalg.norm(flatV, axis=1) < dm.NORM_EPS,
                 np.linalg.norm(Q, axis=1) < dm.NORM_EPS)


# ---------------------------------------------------------------- pooling / coarse


def _segment_mean_matrix(offsets: np.ndarray, total: int) -> np.ndarray:
    M = np.zeros((len(offsets) - 1, total))
    for i in range(len(offsets) - 1):
        a, b = offsets[i], offsets[i + 1]
        M[i, a:b] = 1.0 / (b - a)
    return M


def pool_global(X, offsets: np.ndarray):
    """Mean over each segment of rows, then l2 re-normalization.

    Returns ``(pooled N x D, degenerate mask)``.
    """
    M = _segment_mean_matrix(np.asarray(offsets), dm.value(X).shape[0])
    return dm.l2_normalize_rows(dm.matmul(M, X))


def pool_videos(batch: Batch):
    return pool_global(batch.V, np.arange(batch.N + 1) * batch.T)


def pool_sentences(batch: Batch):
    return pool_global(batch.Q, batch.word_offsets)


def coarse_loss(vbar, qbar, tau: float, symmetric: bool = False):
    """Mean over videos of ``-log softmax_j(vbar_i . qbar_j / tau)[i]``."""
    if tau <= 0:
        raise ValueError(f"temperature must be positive (got {tau})")
    logits = dm.scale(dm.matmul(vbar, dm.transpose(qbar)), 1.0 / tau)
    # diagonal read off the logit matrix itself, so N=1 gives exactly zero
    pos = dm.rowdot(logits, np.eye(*dm.value(logits).shape))
    loss = dm.mean(dm.sub(dm.logsumexp(logits), pos))
    if symmetric:
        back = dm.mean(dm.sub(dm.logsumexp(dm.transpose(logits)), pos))
        loss = dm.scale(dm.add(loss, back), 0.5)
    return loss


# ---------------------------------------------------------------- correspondence


@dataclass
class CorrespondenceMap:
    selected: list  # per flat clip row: local word indices (0-based) in selection order
    valid: np.ndarray  # (N*T,) bool
    q_plus: object  # (N*T, D) pooled positives, Var or array; invalid rows are zero
    strategy: str
    K: int

    def valid_rows(self) -> np.ndarray:
        return np.flatnonzero(self.valid)


def _topk_desc(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest entries; ties go to the lower index."""
    return np.argsort(-scores, kind="stable")[:k]


def _cap_by_similarity(cands: list, sims_row: np.ndarray, K: int) -> list:
    if len(cands) <= K:
        return sorted(cands, key=lambda s: (-sims_row[s], s))
    return sorted(cands, key=lambda s: (-sims_row[s], s))[:K]


def select_words(sims: np.ndarray, K: int, strategy: str, stream: Stream | None = None) -> list:
    """Per-clip word selections for one video given its ``T x S`` similarity grid."""
    T, S = sims.shape
    if strategy == "clip-topk":
        if K > S:
            raise ValueError(f"clip-topk needs K <= words per sentence (K={K}, S={S})")
        return [list(_topk_desc(sims[t], K)) for t in range(T)]
    if strategy == "random":
        if K > S:
            raise ValueError(f"random strategy needs K <= words per sentence (K={K}, S={S})")
        if stream is None:
            raise ValueError("random strategy needs a random stream")
        return [list(stream.choice(S, K)) for _ in range(T)]
    if strategy == "word-topk":
        if K > T:
            raise ValueError(f"word-topk needs K <= clips per video (K={K}, T={T})")
        cands: list[list[int]] = [[] for _ in range(T)]
        for s in range(S):
            for t in _topk_desc(sims[:, s], K):
                cands[t].append(s)
        return [_cap_by_similarity(c, sims[t], K) for t, c in enumerate(cands)]
    if strategy == "2d-topk":
        if K * T > T * S:
            raise ValueError(f"2d-topk needs K*T <= T*S (K={K}, T={T}, S={S})")
        tt, ss = np.meshgrid(np.arange(T), np.arange(S), indexing="ij")
        order = np.lexsort((tt.ravel(), ss.ravel(), -sims.ravel()))[: K * T]
        cands = [[] for _ in range(T)]
        for flat in order:
            cands[flat // S].append(int(flat % S))
        return [_cap_by_similarity(c, sims[t], K) for t, c in enumerate(cands)]
    raise ValueError(f"unknown strategy {strategy!r}")


def discover_correspondence(batch: Batch, K: int, strategy: str = "clip-topk",
                            stream: Stream | None = None) -> CorrespondenceMap:
    """Pick each clip's positive words inside its own sentence and pool them.

    Selection uses the current similarity values only; the pooled positives
    are differentiable functions of the word embeddings.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    Vv, Qv = dm.value(batch.V), dm.value(batch.Q)
    T, N = batch.T, batch.N
    selected: list = []
    for i in range(N):
        ws = batch.words_of(i)
        sims = Vv[i * T:(i + 1) * T] @ Qv[ws].T
        sub = stream.child(i) if stream is not None else None
        selected.extend(select_words(sims, K, strategy, sub))
    P = np.zeros((N * T, Qv.shape[0]))
    for row, sel in enumerate(selected):
        if sel:
            base = batch.word_offsets[row // T]
            P[row, base + np.asarray(sel)] = 1.0 / len(sel)
    q_plus, degenerate = dm.l2_normalize_rows(dm.matmul(P, batch.Q))
    valid = np.array([len(s) > 0 for s in selected]) & ~degenerate
    return CorrespondenceMap([list(map(int, s)) for s in selected], valid, q_plus, strategy, K)


# ---------------------------------------------------------------- clip-word NCE


def _own_sentence_mask(batch: Batch, rows: np.ndarray) -> np.ndarray:
    owner = batch.word_owner()
    return owner[None, :] == (rows // batch.T)[:, None]


def clip_word_nce(X, rows: np.ndarray, positives, batch: Batch, tau: float, denominator: str = "literal"):
    """Mean over ``rows`` of ``-log exp(x.p/tau) / sum_{i,s} exp(x.q_i^s/tau)``.

    ``X`` and ``positives`` are full ``N*T x D`` matrices; only ``rows`` enter
    the loss.  With ``denominator="other-sentences"`` the clip's own sentence
    is dropped from the sum and the pooled positive is added instead.
    """
    if len(rows) == 0:
        raise EmptySupportError("no valid clips to average over")
    Xr = dm.take_rows(X, rows)
    Pr = dm.take_rows(positives, rows)
    pos = dm.scale(dm.rowdot(Xr, Pr), 1.0 / tau)
    logits = dm.scale(dm.matmul(Xr, dm.transpose(batch.Q)), 1.0 / tau)
    if denominator == "literal":
        lse = dm.logsumexp(logits)
    elif denominator == "other-sentences":
        full = dm.concat_cols([dm.reshape(pos, (len(rows), 1)), logits])
        mask = np.concatenate([np.ones((len(rows), 1), bool), ~_own_sentence_mask(batch, rows)], axis=1)
        lse = dm.logsumexp(full, mask=mask)
    else:
        raise ValueError(f"unknown denominator convention {denominator!r}")
    return dm.mean(dm.sub(lse, pos))


def fine_loss(batch: Batch, cmap: CorrespondenceMap, tau: float, denominator: str = "literal"):
    rows = cmap.valid_rows()
    if len(rows) == 0:
        raise EmptySupportError(f"{cmap.strategy} left every clip without words")
    return clip_word_nce(batch.V, rows, cmap.q_plus, batch, tau, denominator)


# ---------------------------------------------------------------- warping


@dataclass
class WarpSpec:
    offsets: np.ndarray  # (N, T) nonzero ints
    delta_max: int

    def context_rows(self) -> np.ndarray:
        N, T = self.offsets.shape
        return (np.arange(N)[:, None] * T + np.arange(T)[None, :] + self.offsets).ravel()


def offset_support(T: int, t: int, delta_max: int) -> list:
    return [d for d in range(-delta_max, delta_max + 1) if d != 0 and 0 <= t + d < T]


def sample_offsets(T: int, delta_max: int, stream: Stream, num_videos: int = 1) -> WarpSpec:
    """Uniform nonzero offsets with the context clip inside the video."""
    if delta_max < 1 or T < 2:
        raise ValueError("need delta_max >= 1 and T >= 2")
    supports = [offset_support(T, t, delta_max) for t in range(T)]
    u = stream.uniform((num_videos, T))
    out = np.empty((num_videos, T), dtype=np.int64)
    for t, sup in enumerate(supports):
        pick = np.minimum((u[:, t] * len(sup)).astype(np.int64), len(sup) - 1)
        out[:, t] = np.asarray(sup)[pick]
    return WarpSpec(out, delta_max)


def warp(v_ctx, deltas, warp_W, use_sign: bool = True, use_dist: bool = True):
    """``relu([v, sgn(delta), |delta|] @ W)`` per row, l2-normalized.

    Returns ``(z, degenerate mask)``.  Disabled scalar inputs are zeroed.
    """
    deltas = np.atleast_1d(np.asarray(deltas, dtype=np.int64))
    if np.any(deltas == 0):
        raise ValueError("warp offsets must be nonzero")
    single = np.ndim(dm.value(v_ctx)) == 1
    if single:
        v_ctx = dm.reshape(v_ctx, (1, -1)) if isinstance(v_ctx, dm.Var) else np.asarray(v_ctx)[None, :]
    extra = np.stack([np.sign(deltas) * float(use_sign), np.abs(deltas) * float(use_dist)], axis=1)
    aug = dm.concat_cols([v_ctx, extra.astype(np.float64)])
    z, degenerate = dm.l2_normalize_rows(dm.relu(dm.matmul(aug, warp_W)))
    return z, degenerate


def warp_batch(batch: Batch, spec: WarpSpec, warp_W, use_sign=True, use_dist=True):
    ctx = dm.take_rows(batch.V, spec.context_rows())
    return warp(ctx, spec.offsets.ravel(), warp_W, use_sign, use_dist)


def temporal_loss(Z, z_degenerate: np.ndarray, cmap: CorrespondenceMap, batch: Batch, tau: float,
                  mode: str = "cross", denominator: str = "literal"):
    """Warped clips against pooled words (cross) or against the true clips (intra)."""
    usable = ~np.asarray(z_degenerate, dtype=bool)
    if mode == "cross":
        rows = np.flatnonzero(usable & cmap.valid)
        if len(rows) == 0:
            raise EmptySupportError("no warped clip with a valid positive")
        return clip_word_nce(Z, rows, cmap.q_plus, batch, tau, denominator)
    if mode != "intra":
        raise ValueError(f"unknown temporal loss mode {mode!r}")
    rows = np.flatnonzero(usable)
    if len(rows) == 0:
        raise EmptySupportError("every warped clip is degenerate")
    Zr = dm.take_rows(Z, rows)
    Vr = dm.take_rows(batch.V, rows)
    pos = dm.scale(dm.rowdot(Zr, Vr), 1.0 / tau)
    logits = dm.scale(dm.matmul(Zr, dm.transpose(batch.V)), 1.0 / tau)
    if denominator == "literal":
        lse = dm.logsumexp(logits)
    else:
        clip_owner = np.arange(batch.N * batch.T) // batch.T
        own = clip_owner[None, :] == (rows // batch.T)[:, None]
        full = dm.concat_cols([dm.reshape(pos, (len(rows), 1)), logits])
        lse = dm.logsumexp(full, mask=np.concatenate([np.ones((len(rows), 1), bool), ~own], axis=1))
    return dm.mean(dm.sub(lse, pos))


# ---------------------------------------------------------------- total


@dataclass
class LossBreakdown:
    total: object
    L_c: float | None
    L_f: float | None
    L_t: float | None
    weights: LossWeights
    diagnostics: dict = field(default_factory=dict)
    cmap: CorrespondenceMap | None = None
    warp_spec: WarpSpec | None = None

    @property
    def total_value(self) -> float:
        return float(dm.value(self.total))


def total_loss(params, videos, weights: LossWeights, cfg: ObjectiveConfig, stream: Stream) -> LossBreakdown:
    """Weighted sum of the three objectives; zero-weight terms are not computed.

    ``stream`` feeds the random strategy (child ``"strategy"``) and the offset
    draws (child ``"offsets"``).
    """
    batch = make_batch(params, videos)
    terms = []
    diag: dict = {"num_videos": batch.N, "num_words": int(batch.word_offsets[-1])}
    L_c = L_f = L_t = None
    cmap = spec = None
    if weights.lambda_c > 0:
        vbar, _ = pool_videos(batch)
        qbar, _ = pool_sentences(batch)
        lc = coarse_loss(vbar, qbar, weights.tau, cfg.symmetric_coarse)
        terms.append(dm.scale(lc, weights.lambda_c))
        L_c = float(dm.value(lc))
    if weights.lambda_f > 0 or weights.lambda_t > 0:
        cmap = discover_correspondence(batch, cfg.K, cfg.strategy, stream.child("strategy"))
        diag["valid_clips"] = int(cmap.valid.sum())
    if weights.lambda_f > 0:
        lf = fine_loss(batch, cmap, weights.tau, cfg.denominator)
        terms.append(dm.scale(lf, weights.lambda_f))
        L_f = float(dm.value(lf))
    if weights.lambda_t > 0:
        spec = sample_offsets(batch.T, cfg.delta_max, stream.child("offsets"), batch.N)
        warp_W = params.tensors["warp.W"] if hasattr(params, "tensors") else params["warp.W"]
        Z, zdeg = warp_batch(batch, spec, warp_W, cfg.warp_sign, cfg.warp_dist)
        diag["degenerate_warps"] = int(zdeg.sum())
        lt = temporal_loss(Z, zdeg, cmap, batch, weights.tau, cfg.lt_mode, cfg.denominator)
        terms.append(dm.scale(lt, weights.lambda_t))
        L_t = float(dm.value(lt))
    total = terms[0] if terms else np.asarray(0.0)
    for t in terms[1:]:
        total = dm.add(total, t)
    return LossBreakdown(total, L_c, L_f, L_t, weights, diag, cmap, spec)
