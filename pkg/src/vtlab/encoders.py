"""Two-layer clip and word encoders, the warp-head weight, and checkpoints."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import diffmath as dm
from .binio import FormatError, Reader, UnsupportedVersionError, Writer, atomic_write
from .rng import Stream

CKPT_MAGIC = b"LVCK"
CKPT_VERSION = 1


class CheckpointMismatchError(ValueError):
    """Checkpoint does not belong to the requested config or model dims."""


def param_names() -> list[str]:
    names = [f"{m}.{p}" for m in ("video", "text") for p in ("W1", "b1", "W2", "b2")]
    return names + ["warp.W"]


@dataclass
class ModelParams:
    raw_dim: int
    hidden_dim: int
    embed_dim: int
    tensors: dict = field(default_factory=dict)

    def shapes(self) -> dict:
        D_in, H, D = self.raw_dim, self.hidden_dim, self.embed_dim
        out = {}
        for m in ("video", "text"):
            out.update({f"{m}.W1": (D_in, H), f"{m}.b1": (H,), f"{m}.W2": (H, D), f"{m}.b2": (D,)})
        out["warp.W"] = (D + 2, D)
        return out

    def validate(self) -> None:
        shapes = self.shapes()
        if set(self.tensors) != set(shapes):
            raise ValueError(f"parameter names {sorted(self.tensors)} != {sorted(shapes)}")
        for name, shape in shapes.items():
            arr = self.tensors[name]
            if arr.shape != shape:
                raise ValueError(f"{name}: shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name}: non-finite entries")

    def copy(self) -> "ModelParams":
        return ModelParams(self.raw_dim, self.hidden_dim, self.embed_dim,
                           {k: v.copy() for k, v in self.tensors.items()})

    def __getitem__(self, name):
        return self.tensors[name]

    def equals(self, other: "ModelParams") -> bool:
        return (
            (self.raw_dim, self.hidden_dim, self.embed_dim) == (other.raw_dim, other.hidden_dim, other.embed_dim)
            and set(self.tensors) == set(other.tensors)
            and all(self.tensors[k].tobytes() == other.tensors[k].tobytes() for k in self.tensors)
        )


def init_params(seed: int, raw_dim: int, hidden_dim: int = 64, embed_dim: int = 32) -> ModelParams:
    """Uniform weights in +-1/sqrt(fan_in), zero biases."""
    if min(raw_dim, hidden_dim, embed_dim) < 1:
        raise ValueError("all dims must be >= 1")
    p = ModelParams(raw_dim, hidden_dim, embed_dim)
    root = Stream(seed).child("init")
    for name, shape in p.shapes().items():
        if name.endswith((".b1", ".b2")):
            p.tensors[name] = np.zeros(shape)
            continue
        bound = 1.0 / np.sqrt(shape[0])
        p.tensors[name] = (2.0 * root.child(name).uniform(shape) - 1.0) * bound
    return p


def _tensors(p) -> Mapping:
    return p.tensors if isinstance(p, ModelParams) else p


def _encode(p, prefix: str, raw):
    t = _tensors(p)
    rv = dm.value(raw)
    if rv.ndim != 2 or rv.shape[1] != dm.value(t[f"{prefix}.W1"]).shape[0]:
        raise dm.ShapeError(
            f"{prefix} encoder expects rows of width {dm.value(t[f'{prefix}.W1']).shape[0]}, got {rv.shape}"
        )
    h = dm.relu(dm.add(dm.matmul(raw, t[f"{prefix}.W1"]), t[f"{prefix}.b1"]))
    e = dm.add(dm.matmul(h, t[f"{prefix}.W2"]), t[f"{prefix}.b2"])
    return dm.l2_normalize_rows(e)


def embed_video(p, clip_raw):
    """Pre-normalization clip embeddings (no l2 step)."""
    t = _tensors(p)
    h = dm.relu(dm.add(dm.matmul(clip_raw, t["video.W1"]), t["video.b1"]))
    return dm.add(dm.matmul(h, t["video.W2"]), t["video.b2"])


def encode_video(p, clip_raw):
    """Row-normalized clip embeddings ``(T x D)`` and the degenerate-row mask."""
    return _encode(p, "video", clip_raw)


def encode_words(p, word_raw):
    """Row-normalized word embeddings ``(S x D)`` and the degenerate-row mask."""
    return _encode(p, "text", word_raw)


# ---------------------------------------------------------------- checkpoints


def config_hash(config: Mapping) -> str:
    blob = json.dumps(dict(config), sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


@dataclass
class Checkpoint:
    params: ModelParams
    optimizer: dict  # {"step": int, "m": {name: arr}, "v": {name: arr}}
    step: int
    manifest: dict


def checkpoint_bytes(params: ModelParams, optimizer: dict, step: int, manifest: Mapping) -> bytes:
    man = dict(manifest)
    man.update({
        "step": int(step),
        "dims": {"raw_dim": params.raw_dim, "hidden_dim": params.hidden_dim, "embed_dim": params.embed_dim},
        "optimizer_step": int(optimizer.get("step", 0)),
    })
    man_bytes = json.dumps(man, sort_keys=True, separators=(",", ":")).encode()
    w = Writer()
    w.raw(CKPT_MAGIC)
    w.u32(CKPT_VERSION)
    w.u32(len(man_bytes))
    w.raw(man_bytes)
    blobs = [(f"param/{n}", params.tensors[n]) for n in param_names()]
    for kind in ("m", "v"):
        moments = optimizer.get(kind, {})
        blobs += [(f"adam.{kind}/{n}", moments[n]) for n in param_names() if n in moments]
    w.u32(len(blobs))
    for name, arr in blobs:
        nb = name.encode()
        w.u32(len(nb))
        w.raw(nb)
        w.u32(arr.ndim)
        for d in arr.shape:
            w.u32(d)
        w.array(arr, "f8")
    return w.getvalue()


def checkpoint_write(path, params: ModelParams, optimizer: dict, step: int, manifest: Mapping) -> None:
    atomic_write(path, checkpoint_bytes(params, optimizer, step, manifest))


def parse_checkpoint(data: bytes) -> Checkpoint:
    r = Reader(data)
    if r.take(4) != CKPT_MAGIC:
        raise FormatError("bad magic: not a checkpoint file")
    version = r.u32()
    if version != CKPT_VERSION:
        raise UnsupportedVersionError(f"unsupported checkpoint version {version} (expected {CKPT_VERSION})")
    try:
        manifest = json.loads(r.take(r.u32()).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt checkpoint manifest: {exc}") from exc
    dims = manifest["dims"]
    params = ModelParams(dims["raw_dim"], dims["hidden_dim"], dims["embed_dim"])
    opt = {"step": int(manifest.get("optimizer_step", 0)), "m": {}, "v": {}}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode()
        shape = tuple(r.u32() for _ in range(r.u32()))
        arr = r.array(int(np.prod(shape)) if shape else 1, "f8").reshape(shape)
        kind, _, pname = name.partition("/")
        if kind == "param":
            params.tensors[pname] = arr
        elif kind in ("adam.m", "adam.v"):
            opt[kind[-1]][pname] = arr
        else:
            raise FormatError(f"unknown checkpoint blob {name!r}")
    if not r.done():
        raise FormatError("trailing bytes after checkpoint payload")
    try:
        params.validate()
    except ValueError as exc:
        raise CheckpointMismatchError(f"checkpoint parameters disagree with recorded dims: {exc}") from exc
    return Checkpoint(params, opt, int(manifest["step"]), manifest)


def checkpoint_read(path, expected_hash: str | None = None, dims: tuple | None = None) -> Checkpoint:
    """Load a checkpoint; refuse it if ``expected_hash`` or ``dims`` disagree with the manifest."""
    with open(path, "rb") as fh:
        ck = parse_checkpoint(fh.read())
    if expected_hash is not None and ck.manifest.get("config_hash") != expected_hash:
        raise CheckpointMismatchError(
            f"checkpoint config hash {ck.manifest.get('config_hash')} does not match config hash {expected_hash}"
        )
    if dims is not None:
        have = (ck.params.raw_dim, ck.params.hidden_dim, ck.params.embed_dim)
        if tuple(dims) != have:
            raise CheckpointMismatchError(f"checkpoint dims {have} != configured dims {tuple(dims)}")
    return ck
