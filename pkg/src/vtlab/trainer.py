"""Adam training loop with loss-weight schedules, checkpoints and bit-exact resume.

Randomness: every draw derives from ``Stream(seed)``.  Epoch ``e`` shuffles
with child ``("shuffle", e)``; optimizer step ``k`` draws correspondence and
offset randomness from child ``("step", k)`` (further split into
``"strategy"`` and ``"offsets"`` by the objective).  The resumable PRNG state
is therefore the root key plus the global step counter.
"""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field, fields

import numpy as np

from . import diffmath as dm
from .corpus import Corpus
from .encoders import (
    CheckpointMismatchError,
    ModelParams,
    checkpoint_read,
    checkpoint_write,
    config_hash,
    init_params,
    param_names,
)
from .objectives import LossWeights, ObjectiveConfig, total_loss
from .rng import Stream

log = logging.getLogger(__name__)

SCHEDULES = ("weighted", "warmup", "multistage")
ADAM_BETA1, ADAM_BETA2, ADAM_EPS = 0.9, 0.999, 1e-8


class NumericalError(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 32
    lr: float = 1e-4
    lr_milestones: tuple = (0.5, 0.8)
    lr_decay: float = 0.1
    schedule: str = "weighted"
    lambda_c: float = 0.5
    lambda_f: float = 1.0
    lambda_t: float = 1.0
    tau: float = 0.07
    K: int = 3
    delta_max: int = 4
    strategy: str = "clip-topk"
    lt_mode: str = "cross"
    denominator: str = "literal"
    warp_sign: bool = True
    warp_dist: bool = True
    symmetric_coarse: bool = False
    hidden_dim: int = 64
    embed_dim: int = 32
    train_frac: float = 0.75
    seed: int = 0
    checkpoint_every: int = 0

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        ms = list(self.lr_milestones)
        if any(not 0.0 < m < 1.0 for m in ms) or any(b <= a for a, b in zip(ms, ms[1:])):
            raise ConfigError("lr_milestones must be strictly increasing fractions in (0, 1)")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"unknown schedule {self.schedule!r}; expected one of {SCHEDULES}")
        if not 0.0 < self.train_frac < 1.0:
            raise ConfigError("train_frac must lie in (0, 1)")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0")
        try:
            self.weights()
            self.objective()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_c, self.lambda_f, self.lambda_t, self.tau)

    def objective(self) -> ObjectiveConfig:
        return ObjectiveConfig(self.K, self.strategy, self.delta_max, self.lt_mode, self.denominator,
                               self.warp_sign, self.warp_dist, self.symmetric_coarse)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def as_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["lr_milestones"] = list(self.lr_milestones)
        return d

    def hash(self) -> str:
        d = self.as_dict()
        d.pop("checkpoint_every")
        return config_hash(d)


# ---------------------------------------------------------------- config files


def _coerce(raw: str, ftype, name: str):
    raw = raw.strip()
    if ftype in (bool, "bool"):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{name}: expected a boolean, got {raw!r}")
    if ftype in (int, "int"):
        return int(raw)
    if ftype in (float, "float"):
        return float(raw)
    if ftype in (tuple, "tuple"):
        return tuple(float(x) for x in raw.replace(",", " ").split())
    return raw


def parse_config_text(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """Parse ``key = value`` lines (``#`` starts a comment); unknown keys are errors."""
    types = {f.name: f.type for f in fields(TrainConfig)}
    values: dict = {}
    errors = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            errors.append(f"line {lineno}: expected key=value, got {line!r}")
            continue
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in types:
            errors.append(f"line {lineno}: unknown key {key!r}")
            continue
        try:
            values[key] = _coerce(raw, types[key], key)
        except ValueError as exc:
            errors.append(f"line {lineno}: {exc}")
    if errors:
        raise ConfigError("; ".join(errors))
    cfg = dataclasses.replace(base or TrainConfig(), **values)
    cfg.validate()
    return cfg


def load_config(path) -> TrainConfig:
    with open(path) as fh:
        return parse_config_text(fh.read())


def format_config(cfg: TrainConfig) -> str:
    lines = []
    for k, v in cfg.as_dict().items():
        if isinstance(v, list):
            v = " ".join(repr(float(x)) for x in v)
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "AdamState":
        return cls(0, {k: np.zeros_like(a) for k, a in params.tensors.items()},
                   {k: np.zeros_like(a) for k, a in params.tensors.items()})

    def as_dict(self) -> dict:
        return {"step": self.step, "m": self.m, "v": self.v}


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              beta1: float = ADAM_BETA1, beta2: float = ADAM_BETA2, eps: float = ADAM_EPS) -> None:
    """Bias-corrected Adam update, in place, in sorted parameter-name order."""
    missing = set(params) - set(grads)
    if missing:
        raise ValueError(f"no gradient for {sorted(missing)}")
    for name in sorted(params):
        g = grads[name]
        if g.shape != params[name].shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {params[name].shape}")
        if not np.all(np.isfinite(g)):
            bad = np.argwhere(~np.isfinite(g))[0]
            raise NumericalError(f"non-finite gradient for {name} at index {tuple(bad)}")
    state.step += 1
    bc1 = 1.0 - beta1 ** state.step
    bc2 = 1.0 - beta2 ** state.step
    for name in sorted(params):
        g = grads[name]
        m = state.m.setdefault(name, np.zeros_like(g))
        v = state.v.setdefault(name, np.zeros_like(g))
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        params[name] -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


# ---------------------------------------------------------------- schedules


def lambda_schedule(mode: str, epoch: int, epochs: int, base: LossWeights | None = None) -> tuple:
    """Loss weights ``(lambda_c, lambda_f, lambda_t)`` for ``epoch`` in ``[0, epochs)``.

    weighted: constant base weights.  warmup: ``lambda_c = exp(-ln(100) e / E)``
    (clamped to 0 once below 0.01).  multistage: coarse only for the first
    ``ceil(E/2)`` epochs, then ``(0, 1, 1)``.
    """
    base = base or LossWeights()
    if not 0 <= epoch < epochs:
        raise ValueError(f"epoch {epoch} outside [0, {epochs})")
    if mode == "weighted":
        return base.lambda_c, base.lambda_f, base.lambda_t
    if mode == "warmup":
        lc = math.exp(-math.log(100.0) / epochs * epoch)
        return (lc if lc >= 0.01 else 0.0), base.lambda_f, base.lambda_t
    if mode == "multistage":
        if epoch < math.ceil(epochs / 2):
            return 1.0, 0.0, 0.0
        return 0.0, 1.0, 1.0
    raise ValueError(f"unknown schedule {mode!r}")


def lr_at(cfg: TrainConfig, epoch: int) -> float:
    passed = sum(1 for m in cfg.lr_milestones if epoch >= int(round(m * cfg.epochs)))
    return cfg.lr * cfg.lr_decay ** passed


# ---------------------------------------------------------------- report

REPORT_COLUMNS = ["epoch", "step", "lr", "lambda_c", "lambda_f", "lambda_t", "L_c", "L_f", "L_t", "total"]


@dataclass
class TrainReport:
    config: dict
    seed: int
    rows: list = field(default_factory=list)
    wall_time: float = 0.0

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in self.rows:
            w.writerow(["" if r[c] is None else (repr(r[c]) if isinstance(r[c], float) else r[c])
                        for c in REPORT_COLUMNS])
        return buf.getvalue()

    def summary(self) -> dict:
        last = self.rows[-1] if self.rows else {}
        return {
            "config": self.config,
            "seed": self.seed,
            "epochs_completed": len(self.rows),
            "final": last,
            "first": self.rows[0] if self.rows else {},
            "lambda_c": [r["lambda_c"] for r in self.rows],
            "lr": [r["lr"] for r in self.rows],
        }

    def write(self, out_dir) -> None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "train_report.csv"), "w") as fh:
            fh.write(self.csv_text())
        with open(os.path.join(out_dir, "train_summary.json"), "w") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        with open(os.path.join(out_dir, "timing.json"), "w") as fh:
            json.dump({"wall_time_seconds": self.wall_time}, fh)
            fh.write("\n")


# ---------------------------------------------------------------- loop


def corpus_fingerprint(corpus: Corpus) -> str:
    import hashlib

    h = hashlib.sha256()
    for v in corpus.videos:
        h.update(v.clip_raw.tobytes())
        h.update(v.word_raw.tobytes())
    return h.hexdigest()


def _mean(xs):
    xs = [x for x in xs if x is not None]
    return float(np.mean(xs)) if xs else None


def _manifest(cfg: TrainConfig, corpus_fp: str, epoch: int, rows: list) -> dict:
    return {
        "config_hash": cfg.hash(),
        "config": cfg.as_dict(),
        "corpus": corpus_fp,
        "epoch": epoch,
        "rng": {"seed": cfg.seed, "key": Stream(cfg.seed).key},
        "report_rows": rows,
    }


def train(cfg: TrainConfig, corpus: Corpus, out_dir=None, resume_from=None,
          stop_after_epoch: int | None = None) -> tuple[ModelParams, TrainReport]:
    """Train on every video of ``corpus``.

    Writes ``checkpoint.lvck`` (plus ``checkpoint_eNNN.lvck`` at the cadence)
    and the report files into ``out_dir`` when given.  ``stop_after_epoch``
    ends the run early after that many epochs, as an interruption would.
    """
    cfg.validate()
    if len(corpus) == 0:
        raise ValueError("cannot train on an empty corpus")
    D_in = corpus.config.raw_dim
    fp = corpus_fingerprint(corpus)
    root = Stream(cfg.seed)

    if resume_from is not None:
        ck = checkpoint_read(resume_from, expected_hash=cfg.hash(), dims=(D_in, cfg.hidden_dim, cfg.embed_dim))
        if ck.manifest.get("corpus") != fp:
            raise CheckpointMismatchError("checkpoint was trained on a different corpus")
        rng = ck.manifest.get("rng")
        if not rng or rng.get("key") != root.key:
            raise CheckpointMismatchError("checkpoint is missing its PRNG state")
        params = ck.params
        state = AdamState(ck.optimizer["step"], ck.optimizer["m"], ck.optimizer["v"])
        start_epoch = int(ck.manifest["epoch"])
        rows = list(ck.manifest.get("report_rows", []))
        step = ck.step
    else:
        params = init_params(root.child("params").key, D_in, cfg.hidden_dim, cfg.embed_dim)
        state = AdamState.zeros_like(params)
        start_epoch, rows, step = 0, [], 0

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    report = TrainReport(cfg.as_dict(), cfg.seed, rows)
    base = cfg.weights()
    obj = cfg.objective()
    n = len(corpus)
    t0 = time.perf_counter()
    last_epoch = cfg.epochs if stop_after_epoch is None else min(cfg.epochs, stop_after_epoch)

    for epoch in range(start_epoch, last_epoch):
        lc, lf, lt = lambda_schedule(cfg.schedule, epoch, cfg.epochs, base)
        weights = LossWeights(lc, lf, lt, cfg.tau)
        lr = lr_at(cfg, epoch)
        order = root.child("shuffle", epoch).permutation(n)
        comps: dict = {"L_c": [], "L_f": [], "L_t": [], "total": []}
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            videos = [corpus.videos[i] for i in order[start:start + cfg.batch_size]]
            tape = dm.Tape()
            leaves = {k: tape.param(k, params.tensors[k]) for k in param_names()}
            try:
                lb = total_loss(leaves, videos, weights, obj, root.child("step", step))
            except dm.GradientError as exc:
                raise NumericalError(f"epoch {epoch}, batch {b}: {exc}") from exc
            total = lb.total_value
            if not np.isfinite(total):
                raise NumericalError(f"non-finite loss at epoch {epoch}, batch {b}")
            if isinstance(lb.total, dm.Var):
                grads = dm.backward(tape, lb.total)
                try:
                    adam_step(params.tensors, grads, state, lr)
                except NumericalError as exc:
                    raise NumericalError(f"epoch {epoch}, batch {b}: {exc}") from exc
            step += 1
            comps["L_c"].append(lb.L_c)
            comps["L_f"].append(lb.L_f)
            comps["L_t"].append(lb.L_t)
            comps["total"].append(total)
        row = {"epoch": epoch, "step": step, "lr": lr, "lambda_c": lc, "lambda_f": lf, "lambda_t": lt}
        row.update({k: _mean(v) for k, v in comps.items()})
        rows.append(row)
        log.info("epoch %d total %.4f", epoch, row["total"])
        if out_dir is not None:
            done = epoch + 1
            manifest = _manifest(cfg, fp, done, rows)
            if cfg.checkpoint_every and done % cfg.checkpoint_every == 0:
                checkpoint_write(os.path.join(out_dir, f"checkpoint_e{done:04d}.lvck"), params,
                                 state.as_dict(), step, manifest)
            checkpoint_write(os.path.join(out_dir, "checkpoint.lvck"), params, state.as_dict(), step, manifest)

    report.wall_time = time.perf_counter() - t0
    if out_dir is not None:
        if not rows or start_epoch >= last_epoch:
            # nothing ran in this call; still leave a checkpoint describing the state
            checkpoint_write(os.path.join(out_dir, "checkpoint.lvck"), params, state.as_dict(), step,
                             _manifest(cfg, fp, max(start_epoch, 0), rows))
        report.write(out_dir)
    return params, report


def resume(checkpoint_path, cfg: TrainConfig, corpus: Corpus, out_dir=None,
           stop_after_epoch: int | None = None) -> tuple[ModelParams, TrainReport]:
    """Continue a run from ``checkpoint_path``; refuses a checkpoint from a different config."""
    return train(cfg, corpus, out_dir=out_dir, resume_from=checkpoint_path, stop_after_epoch=stop_after_epoch)
