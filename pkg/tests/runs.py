"""Cached training runs on the default desk corpus, shared between test modules.

Each distinct (overrides, seed) pair trains once per pytest session.
"""
from functools import lru_cache

from vtlab.corpus import CorpusConfig, generate_corpus
from vtlab.experiment import evaluate, held_out_split
from vtlab.trainer import TrainConfig, train

SEEDS = (0, 1, 2)


@lru_cache(maxsize=None)
def desk_corpus():
    return generate_corpus(CorpusConfig())


def run(seed: int, **overrides):
    """Train on the train side of the desk corpus; returns ``(cfg, params, report, held_out)``."""
    return _run(TrainConfig(seed=seed, **overrides))


def metrics(seed: int, **overrides) -> dict:
    return _metrics(TrainConfig(seed=seed, **overrides))


# keyed on the full config so equivalent override spellings share one run
@lru_cache(maxsize=None)
def _run(cfg: TrainConfig):
    train_c, test_c = held_out_split(desk_corpus(), cfg)
    params, report = train(cfg, train_c)
    return cfg, params, report, test_c


@lru_cache(maxsize=None)
def _metrics(cfg: TrainConfig) -> dict:
    _, params, _, test_c = _run(cfg)
    return evaluate(params, cfg, test_c.videos, seed=0, with_similarity_stats=True)


def seed_mean(key: str, **overrides) -> float:
    return sum(metrics(s, **overrides)[key] for s in SEEDS) / len(SEEDS)
