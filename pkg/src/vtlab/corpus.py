"""Synthetic scripted narrated-video corpus with known clip-word alignment.

All videos are windows of ``T`` consecutive actions on one global cycle of
``num_actions`` actions.  Each clip narrates its action with a short phrase
of ``phrase_len`` content words (kept with probability ``content_word_rate``)
and the sentence is padded with randomly placed function words that belong
to no clip.  Clip and word features are noisy rows of two fixed mixing
matrices, so encoders have to learn the cross-modal correspondence.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .binio import FormatError, Reader, UnsupportedVersionError, Writer, atomic_write
from .rng import Stream

MAGIC = b"LVTP"
VERSION = 1


class CorpusConfigError(ValueError):
    pass


class CorpusValidationError(FormatError):
    pass


@dataclass(frozen=True)
class CorpusConfig:
    num_actions: int = 32
    num_function_words: int = 4
    clips_per_video: int = 8
    max_words_per_video: int = 32
    raw_dim: int = 32
    noise_sigma: float = 0.1
    num_videos: int = 512
    content_word_rate: float = 0.9
    seed: int = 0
    phrase_len: int = 1
    modality_coupling: float = 0.3

    def validate(self) -> None:
        T = self.clips_per_video
        if T < 2:
            raise CorpusConfigError(f"clips_per_video must be >= 2 (got {T})")
        if self.num_actions < T:
            raise CorpusConfigError(
                f"num_actions={self.num_actions} < clips_per_video={T}: window longer than the action cycle"
            )
        if not 0.0 < self.content_word_rate <= 1.0:
            raise CorpusConfigError("content_word_rate must lie in (0, 1]")
        if self.noise_sigma < 0:
            raise CorpusConfigError("noise_sigma must be >= 0")
        if self.phrase_len < 1:
            raise CorpusConfigError("phrase_len must be >= 1")
        if T * self.phrase_len > self.max_words_per_video:
            raise CorpusConfigError(
                f"max_words_per_video={self.max_words_per_video} cannot hold {T} phrases of {self.phrase_len} words"
            )
        if self.raw_dim < 1 or self.num_videos < 0 or self.num_function_words < 0:
            raise CorpusConfigError("raw_dim >= 1, num_videos >= 0 and num_function_words >= 0 required")
        if not 0.0 <= self.modality_coupling < 1.0:
            raise CorpusConfigError("modality_coupling must lie in [0, 1)")


@dataclass
class VideoSample:
    clip_actions: np.ndarray  # (T,) int
    clip_raw: np.ndarray  # (T, D_in)
    word_ids: np.ndarray  # (S,) int; content id = action * phrase_len + slot
    word_raw: np.ndarray  # (S, D_in)
    word_is_content: np.ndarray  # (S,) bool
    gt_align: list  # per clip: sorted int array of word positions

    @property
    def num_words(self) -> int:
        return len(self.word_ids)

    phrase_len: int = 1

    def word_actions(self) -> np.ndarray:
        """Action id of each word (content ids are ``action * phrase_len + slot``); -1 for function words."""
        return np.where(self.word_is_content, self.word_ids // self.phrase_len, -1)

    def expected_alignment(self) -> list:
        return [
            np.flatnonzero(self.word_is_content & (self.word_actions() == a)).astype(np.int64)
            for a in self.clip_actions
        ]

    def equals(self, other: "VideoSample") -> bool:
        return (
            _same(self.clip_actions, other.clip_actions)
            and _same(self.clip_raw, other.clip_raw)
            and _same(self.word_ids, other.word_ids)
            and _same(self.word_raw, other.word_raw)
            and _same(self.word_is_content, other.word_is_content)
            and len(self.gt_align) == len(other.gt_align)
            and all(_same(a, b) for a, b in zip(self.gt_align, other.gt_align))
        )


def _same(a, b) -> bool:
    a, b = np.asarray(a), np.asarray(b)
    return a.shape == b.shape and a.tobytes() == b.tobytes()


@dataclass
class Corpus:
    config: CorpusConfig
    videos: list
    E_v: np.ndarray
    E_w: np.ndarray
    stats: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.videos)

    def equals(self, other: "Corpus") -> bool:
        return (
            self.config == other.config
            and _same(self.E_v, other.E_v)
            and _same(self.E_w, other.E_w)
            and len(self.videos) == len(other.videos)
            and all(a.equals(b) for a, b in zip(self.videos, other.videos))
        )

    def subset(self, indices) -> "Corpus":
        return Corpus(self.config, [self.videos[i] for i in indices], self.E_v, self.E_w, dict(self.stats))


# ---------------------------------------------------------------- generation


def _mixers(cfg: CorpusConfig, root: Stream) -> tuple[np.ndarray, np.ndarray, int]:
    """Draw mixing rows one at a time, redrawing any row too close to an earlier one."""
    A, D = cfg.num_actions, cfg.raw_dim
    c = cfg.modality_coupling
    s = root.child("mixers")
    L = cfg.phrase_len
    E_v = np.zeros((A, D))
    E_w = np.zeros((A * L, D))
    draws = 0
    for E, base in ((E_v, None), (E_w, E_v)):
        for a in range(len(E)):
            for _ in range(10000):
                draws += 1
                row = _unit_rows(s.normal((1, D)))[0]
                if base is not None:
                    row = c * base[a // L] + np.sqrt(1.0 - c * c) * row
                    row /= np.linalg.norm(row)
                if a == 0 or np.max(E[:a] @ row) < 0.5:
                    E[a] = row
                    break
            else:
                raise CorpusConfigError(
                    f"could not draw {A} mixing rows in {D} dims with pairwise cosine < 0.5; increase raw_dim"
                )
    return E_v, E_w, draws


def _unit_rows(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def _max_offdiag_cos(E: np.ndarray) -> float:
    if len(E) < 2:
        return -1.0
    G = E @ E.T
    np.fill_diagonal(G, -np.inf)
    return float(G.max())


def _make_video(cfg: CorpusConfig, E_v, E_w, s: Stream) -> VideoSample:
    A, T, D = cfg.num_actions, cfg.clips_per_video, cfg.raw_dim
    start = s.integers(A)
    actions = (start + np.arange(T)) % A
    clip_raw = E_v[actions] + cfg.noise_sigma * s.normal((T, D))

    L = cfg.phrase_len
    keep = s.uniform((T, L)) < cfg.content_word_rate
    if not keep.any():
        keep[s.integers(T), s.integers(L)] = True
    tokens: list[tuple[int, bool]] = [
        (int(actions[t]) * L + j, True) for t in range(T) for j in range(L) if keep[t, j]
    ]

    if cfg.num_function_words > 0:
        room = min(T, cfg.max_words_per_video - len(tokens))
        n_func = s.integers(room + 1)
        for _ in range(n_func):
            pos = s.integers(len(tokens) + 1)
            fid = A * L + s.integers(cfg.num_function_words)
            tokens.insert(pos, (fid, False))

    word_ids = np.array([w for w, _ in tokens], dtype=np.int64)
    is_content = np.array([c for _, c in tokens], dtype=bool)
    S = len(tokens)
    word_raw = np.empty((S, D))
    n_content = int(is_content.sum())
    word_raw[is_content] = E_w[word_ids[is_content]] + cfg.noise_sigma * s.normal((n_content, D))
    word_raw[~is_content] = s.normal((S - n_content, D)) / np.sqrt(D)
    video = VideoSample(actions.astype(np.int64), clip_raw, word_ids, word_raw, is_content, [], L)
    video.gt_align = video.expected_alignment()
    return video


def _alignment_stats(cfg: CorpusConfig, videos: list, root: Stream) -> dict:
    """Mean cosine of GT vs non-GT clip-word pairs after a shared random projection."""
    if not videos:
        return {"gt_pair_cosine": None, "non_gt_pair_cosine": None, "gt_pairs": 0, "non_gt_pairs": 0}
    D = cfg.raw_dim
    probe = root.child("probe").normal((D, max(D // 2, 1))) / np.sqrt(D)
    gt_sum, gt_n, non_sum, non_n = 0.0, 0, 0.0, 0
    for v in videos:
        c = _unit_rows_safe(v.clip_raw @ probe)
        w = _unit_rows_safe(v.word_raw @ probe)
        sims = c @ w.T
        mask = np.zeros(sims.shape, dtype=bool)
        for t, pos in enumerate(v.gt_align):
            mask[t, pos] = True
        gt_sum += float(sims[mask].sum())
        gt_n += int(mask.sum())
        non_sum += float(sims[~mask].sum())
        non_n += int((~mask).sum())
    return {
        "gt_pair_cosine": gt_sum / gt_n if gt_n else None,
        "non_gt_pair_cosine": non_sum / non_n if non_n else None,
        "gt_pairs": gt_n,
        "non_gt_pairs": non_n,
    }


def _unit_rows_safe(x):
    n = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.maximum(n, 1e-12)


def generate_corpus(cfg: CorpusConfig) -> Corpus:
    cfg.validate()
    root = Stream(cfg.seed)
    E_v, E_w, attempts = _mixers(cfg, root)
    videos = [_make_video(cfg, E_v, E_w, root.child("video", i)) for i in range(cfg.num_videos)]
    stats = _alignment_stats(cfg, videos, root)
    stats["mixer_draws"] = attempts
    stats["mean_words_per_video"] = float(np.mean([v.num_words for v in videos])) if videos else 0.0
    stats["min_words_per_video"] = int(min((v.num_words for v in videos), default=0))
    return Corpus(cfg, videos, E_v, E_w, stats)


def split_corpus(c: Corpus, train_frac: float, seed: int) -> tuple[Corpus, Corpus]:
    if not 0.0 < train_frac < 1.0:
        raise ValueError("train_frac must lie in (0, 1)")
    n = len(c)
    n_train = int(round(train_frac * n))
    if n_train == 0 or n_train == n:
        raise ValueError(f"split of {n} videos at {train_frac} leaves one side empty")
    perm = Stream(seed).child("split").permutation(n)
    return c.subset(np.sort(perm[:n_train])), c.subset(np.sort(perm[n_train:]))


# ---------------------------------------------------------------- serialization

_CONFIG_LAYOUT = [
    ("num_actions", "u32"),
    ("num_function_words", "u32"),
    ("clips_per_video", "u32"),
    ("max_words_per_video", "u32"),
    ("raw_dim", "u32"),
    ("noise_sigma", "f64"),
    ("num_videos", "u32"),
    ("content_word_rate", "f64"),
    ("seed", "u64"),
    ("phrase_len", "u32"),
    ("modality_coupling", "f64"),
]


def corpus_bytes(c: Corpus) -> bytes:
    w = Writer()
    w.raw(MAGIC)
    w.u32(VERSION)
    for name, kind in _CONFIG_LAYOUT:
        getattr(w, kind)(getattr(c.config, name))
    for E in (c.E_v, c.E_w):
        w.u32(E.shape[0])
        w.u32(E.shape[1])
        w.array(E, "f8")
    w.u32(len(c.videos))
    for v in c.videos:
        w.u32(len(v.clip_actions))
        w.array(v.clip_actions, "i4")
        w.array(v.clip_raw, "f8")
        w.u32(v.num_words)
        w.array(v.word_ids, "i4")
        w.array(v.word_is_content, "u1")
        w.array(v.word_raw, "f8")
        for pos in v.gt_align:
            w.u32(len(pos))
            w.array(pos, "u4")
    return w.getvalue()


def metadata(c: Corpus) -> dict:
    return {"format": "LVTP", "version": VERSION, "config": asdict(c.config), "num_videos": len(c), "stats": c.stats}


def write_corpus(c: Corpus, path) -> None:
    """Write the binary corpus and a ``<stem>.meta.json`` sidecar."""
    atomic_write(path, corpus_bytes(c))
    meta = json.dumps(metadata(c), indent=2, sort_keys=True) + "\n"
    atomic_write(sidecar_path(path), meta.encode())


def sidecar_path(path) -> str:
    stem, _ = os.path.splitext(os.fspath(path))
    return stem + ".meta.json"


def parse_corpus(data: bytes) -> Corpus:
    r = Reader(data)
    if r.take(4) != MAGIC:
        raise FormatError("bad magic: not a corpus file")
    version = r.u32()
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported corpus format version {version} (expected {VERSION})")
    cfg = CorpusConfig(**{name: getattr(r, kind)() for name, kind in _CONFIG_LAYOUT})
    mats = []
    for _ in range(2):
        rows, cols = r.u32(), r.u32()
        mats.append(r.array(rows * cols, "f8").reshape(rows, cols))
    E_v, E_w = mats
    D = cfg.raw_dim
    videos = []
    for _ in range(r.u32()):
        T = r.u32()
        actions = r.array(T, "i4").astype(np.int64)
        clip_raw = r.array(T * D, "f8").reshape(T, D)
        S = r.u32()
        word_ids = r.array(S, "i4").astype(np.int64)
        is_content = r.array(S, "u1").astype(bool)
        word_raw = r.array(S * D, "f8").reshape(S, D)
        gt = [r.array(r.u32(), "u4").astype(np.int64) for _ in range(T)]
        videos.append(VideoSample(actions, clip_raw, word_ids, word_raw, is_content, gt, cfg.phrase_len))
    if not r.done():
        raise FormatError(f"{len(data) - r.pos} trailing bytes after corpus payload")
    c = Corpus(cfg, videos, E_v, E_w)
    validate_corpus(c)
    return c


def read_corpus(path) -> Corpus:
    with open(path, "rb") as fh:
        c = parse_corpus(fh.read())
    meta = sidecar_path(path)
    if os.path.exists(meta):
        with open(meta) as fh:
            c.stats = json.load(fh).get("stats", {})
    return c


def validate_corpus(c: Corpus) -> None:
    cfg = c.config
    try:
        cfg.validate()
    except CorpusConfigError as exc:
        raise CorpusValidationError(f"invalid config block: {exc}") from exc
    A, T, D = cfg.num_actions, cfg.clips_per_video, cfg.raw_dim
    if c.E_v.shape != (A, D) or c.E_w.shape != (A * cfg.phrase_len, D):
        raise CorpusValidationError("mixing matrix shapes disagree with config")
    for i, v in enumerate(c.videos):
        if len(v.clip_actions) != T or v.clip_raw.shape != (T, D):
            raise CorpusValidationError(f"video {i}: clip arrays disagree with config")
        if v.num_words < 1 or v.num_words > cfg.max_words_per_video or v.word_raw.shape != (v.num_words, D):
            raise CorpusValidationError(f"video {i}: bad word count {v.num_words}")
        if not np.array_equal((v.clip_actions - v.clip_actions[0]) % A, np.arange(T)):
            raise CorpusValidationError(f"video {i}: clip actions are not a window on the action cycle")
        expected = v.expected_alignment()
        if any(not np.array_equal(a, b) for a, b in zip(expected, v.gt_align)):
            raise CorpusValidationError(f"video {i}: gt_align inconsistent with word and action ids")
        content_ids = set(v.word_actions()[v.word_is_content].tolist())
        if not content_ids <= set(v.clip_actions.tolist()):
            raise CorpusValidationError(f"video {i}: content word without a matching clip")
        if not (np.all(np.isfinite(v.clip_raw)) and np.all(np.isfinite(v.word_raw))):
            raise CorpusValidationError(f"video {i}: non-finite features")
