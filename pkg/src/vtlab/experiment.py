"""Train/evaluate glue shared by the command line and the acceptance suite."""
from __future__ import annotations

import csv
import io
import json
import time
import traceback
from dataclasses import dataclass

import numpy as np

from .corpus import Corpus, split_corpus
from .encoders import ModelParams
from .probes import (
    clip_features,
    corpus_precision,
    distance_probe,
    order_probe,
    retrieval_eval,
    similarity_distributions,
)
from .rng import Stream
from .trainer import TrainConfig, train

EVAL_KEYS = ["precision", "recall", "precision_clip_topk", "Accu_o", "Accu_d",
             "R@1", "R@5", "R@10", "MdR", "sim_reference", "sim_bias", "sim_projection"]


def held_out_split(corpus: Corpus, cfg: TrainConfig) -> tuple[Corpus, Corpus]:
    """Train/held-out split of a corpus by video, fixed by the run config."""
    return split_corpus(corpus, cfg.train_frac, cfg.seed)


def evaluate(params: ModelParams, cfg: TrainConfig, videos: list, seed: int = 0,
             with_similarity_stats: bool = False) -> dict:
    """Every probe on held-out ``videos``.

    ``precision`` uses the configured selection strategy; ``precision_clip_topk``
    always scores the similarity-based selection.
    """
    prec, rec = corpus_precision(params, videos, cfg.K, cfg.strategy, seed)
    out = {"precision": prec, "recall": rec}
    out["precision_clip_topk"] = (prec if cfg.strategy == "clip-topk"
                                  else corpus_precision(params, videos, cfg.K, "clip-topk", seed)[0])
    feats = clip_features(params, videos)
    order = order_probe(feats, seed)
    dist = distance_probe(feats, seed)
    out["Accu_o"] = order.accuracy
    out["Accu_d"] = dist.accuracy
    out.update({k: v for k, v in retrieval_eval(params, videos).as_dict().items() if k != "pool_size"})
    sims = similarity_distributions(params, videos, cfg.K, cfg.delta_max, seed, cfg.strategy,
                                    cfg.warp_sign, cfg.warp_dist)
    for name, mean in sims.means().items():
        out[f"sim_{name}"] = mean
    if with_similarity_stats:
        out["_similarity"] = sims
        out["_order"] = order
        out["_distance"] = dist
    return out


# ---------------------------------------------------------------- ablation suites

SUITES = {
    "strategy": [{"strategy": s} for s in ("clip-topk", "word-topk", "2d-topk", "random")],
    "k": [{"K": k} for k in (1, 2, 3, 4)],
    "warp-components": [{"warp_sign": s, "warp_dist": d}
                        for s, d in ((True, True), (True, False), (False, True), (False, False))],
    "delta-max": [{"delta_max": d} for d in (2, 3, 4, 5)],
    "loss-components": [{"lambda_f": f, "lambda_t": t}
                        for f, t in ((1.0, 1.0), (1.0, 0.0), (0.0, 1.0), (0.0, 0.0))],
    "schedule": [{"schedule": m} for m in ("weighted", "warmup", "multistage")],
    "lt-mode": [{"lt_mode": m} for m in ("cross", "intra")],
}

ABLATION_COLUMNS = (["suite", "index", "label", "seed", "status", "error", "config_hash",
                     "final_total", "final_L_c", "final_L_f", "final_L_t"] + EVAL_KEYS)


def point_label(overrides: dict) -> str:
    return ";".join(f"{k}={v}" for k, v in overrides.items())


def point_seed(base_seed: int, index: int) -> int:
    """Independent, reproducible seed for one grid point."""
    return Stream(base_seed).child("ablate", index).key % (1 << 32)


@dataclass
class SuitePoint:
    index: int
    overrides: dict
    config: TrainConfig | None
    error: str | None = None


def suite_points(suite: str, base: TrainConfig) -> list[SuitePoint]:
    if suite not in SUITES:
        raise KeyError(f"unknown suite {suite!r}; choose from {', '.join(SUITES)}")
    points = []
    for i, over in enumerate(SUITES[suite]):
        try:
            cfg = base.replace(seed=point_seed(base.seed, i), **over)
            cfg.validate()
            points.append(SuitePoint(i, over, cfg))
        except ValueError as exc:
            points.append(SuitePoint(i, over, None, f"invalid config: {exc}"))
    return points


def _fmt(x):
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return x


def run_point(point: SuitePoint, suite: str, corpus: Corpus, eval_seed: int = 0) -> dict:
    row = {c: None for c in ABLATION_COLUMNS}
    row.update(suite=suite, index=point.index, label=point_label(point.overrides))
    if point.config is None:
        row.update(status="failed", error=point.error)
        return row
    cfg = point.config
    row.update(seed=cfg.seed, config_hash=cfg.hash())
    try:
        train_c, test_c = held_out_split(corpus, cfg)
        params, report = train(cfg, train_c)
        last = report.rows[-1]
        row.update(final_total=last["total"], final_L_c=last["L_c"], final_L_f=last["L_f"],
                   final_L_t=last["L_t"])
        row.update(evaluate(params, cfg, test_c.videos, eval_seed))
        row["status"] = "ok"
    except Exception as exc:  # a failed point must not abort the sweep
        row.update(status="failed", error=f"{type(exc).__name__}: {exc}")
        row["error"] += " | " + traceback.format_exc(limit=1).strip().splitlines()[-1]
    return row


def ablation_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ABLATION_COLUMNS)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in ABLATION_COLUMNS])
    return buf.getvalue()


def run_suite(suite: str, base: TrainConfig, corpus: Corpus, eval_seed: int = 0,
              on_row=None) -> list[dict]:
    rows = []
    for point in suite_points(suite, base):
        t0 = time.perf_counter()
        row = run_point(point, suite, corpus, eval_seed)
        rows.append(row)
        if on_row is not None:
            on_row(row, time.perf_counter() - t0)
    return rows


def eval_report_csv(metrics: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", "value"])
    for k in EVAL_KEYS:
        w.writerow([k, _fmt(metrics[k])])
    return buf.getvalue()


def eval_report_json(metrics: dict, extra: dict | None = None) -> str:
    payload = {k: metrics[k] for k in EVAL_KEYS}
    if extra:
        payload.update(extra)
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def mean_metric(rows: list[dict], key: str) -> float:
    vals = [r[key] for r in rows if r.get(key) is not None]
    return float(np.mean(vals)) if vals else float("nan")
