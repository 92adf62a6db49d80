"""Finite-difference verification of every loss term on a small fixed batch.

Parameters are the unit clip and word features the losses are defined on,
plus the warp weight, so the check exercises pooling with re-normalization,
selection-driven gathers, the warp head and every InfoNCE term.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffmath as dm
from .objectives import (
    Batch,
    LossWeights,
    coarse_loss,
    discover_correspondence,
    fine_loss,
    pool_sentences,
    pool_videos,
    sample_offsets,
    temporal_loss,
    warp_batch,
)
from .rng import Stream

LOSS_NAMES = ("L_c", "L_f", "L_t", "total")
TOLERANCE = 1e-5


@dataclass
class GradCheckRow:
    loss: str
    value: float
    max_rel_error: float
    worst_param: str
    worst_index: tuple

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_error) and self.max_rel_error < TOLERANCE)


def _unit(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def fixed_problem(seed: int = 0, N: int = 4, T: int = 4, D: int = 8, min_words: int = 3,
                  max_words: int = 6, delta_max: int = 2):
    """Random embeddings, sentence lengths in ``[min_words, max_words]`` and warp offsets."""
    s = Stream(seed).child("gradcheck")
    counts = min_words + s.child("counts").integers(max_words - min_words + 1, (N,))
    params = {
        "V": _unit(s.child("V").normal((N * T, D))),
        "Q": _unit(s.child("Q").normal((int(counts.sum()), D))),
        "warp.W": 0.5 * s.child("W").normal((D + 2, D)),
    }
    offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    spec = sample_offsets(T, delta_max, s.child("offsets"), N)
    return params, offsets, spec


def loss_functions(offsets, spec, T: int, weights: LossWeights | None = None, K: int = 3,
                   strategy: str = "clip-topk", lt_mode: str = "cross", denominator: str = "literal"):
    """Map loss name -> ``fn(params) -> scalar`` over the embedding-level parameters."""
    w = weights or LossWeights()

    def batch(p) -> Batch:
        V, Q = p["V"], p["Q"]
        return Batch(V, Q, T, offsets, np.zeros(dm.value(V).shape[0], bool), np.zeros(dm.value(Q).shape[0], bool))

    def l_c(p, b=None):
        b = b or batch(p)
        return coarse_loss(pool_videos(b)[0], pool_sentences(b)[0], w.tau)

    def cmap_of(b):
        return discover_correspondence(b, K, strategy, Stream(0).child("strategy"))

    def l_f(p, b=None, cmap=None):
        b = b or batch(p)
        return fine_loss(b, cmap or cmap_of(b), w.tau, denominator)

    def l_t(p, b=None, cmap=None):
        b = b or batch(p)
        Z, zdeg = warp_batch(b, spec, p["warp.W"])
        return temporal_loss(Z, zdeg, cmap or cmap_of(b), b, w.tau, lt_mode, denominator)

    def total(p):
        b = batch(p)
        cmap = cmap_of(b)
        out = dm.scale(l_c(p, b), w.lambda_c)
        out = dm.add(out, dm.scale(l_f(p, b, cmap), w.lambda_f))
        return dm.add(out, dm.scale(l_t(p, b, cmap), w.lambda_t))

    return {"L_c": l_c, "L_f": l_f, "L_t": l_t, "total": total}


def run_gradcheck(seed: int = 0, h: float = 1e-5, inject_fault: str | None = None) -> list[GradCheckRow]:
    """One row per loss term.  ``inject_fault`` names a loss whose analytic gradient gets corrupted."""
    params, offsets, spec = fixed_problem(seed)
    T = spec.offsets.shape[1]
    rows = []
    for name, fn in loss_functions(offsets, spec, T).items():
        value, grads = dm.value_and_grad(fn, params)
        if name == inject_fault:
            grads = {k: g.copy() for k, g in grads.items()}
            grads["V"].flat[0] += 1e-3 * (1.0 + abs(grads["V"].flat[0]))
        res = dm.finite_diff_check(fn, params, h=h, analytic=grads)
        rows.append(GradCheckRow(name, value, res.max_rel_error, res.worst_param, res.worst_index))
    return rows


def format_rows(rows: list[GradCheckRow]) -> str:
    lines = ["loss,value,max_rel_error,worst_param,worst_index,status"]
    for r in rows:
        idx = "x".join(str(i) for i in r.worst_index)
        lines.append(f"{r.loss},{r.value:.10g},{r.max_rel_error:.3e},{r.worst_param},{idx},"
                     f"{'pass' if r.passed else 'FAIL'}")
    return "\n".join(lines) + "\n"
