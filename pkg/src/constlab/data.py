"""Synthetic speech-translation triplets.

A fixed "language" maps every content token to a short prototype sequence
of feature frames (the speech side) and to a target token through a
permutation plus a pairwise local reordering (the translation side).
Corpora, batches and the line-oriented corpus file format live here.
"""

from __future__ import annotations

import base64
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD, EOS, BOS_SRC, BOS_TGT = 0, 1, 2, 3
N_SPECIAL = 4
SPECIAL_TOKENS = frozenset({PAD, EOS, BOS_SRC, BOS_TGT})

CORPUS_FORMAT = "constlab-corpus"
CORPUS_VERSION = 1


class CorpusFormatError(ValueError):
    """A corpus file record could not be parsed."""


@dataclass(frozen=True)
class SyntheticLanguageSpec:
    vocab_size: int = 40
    feature_dim: int = 8
    proto_len_min: int = 5
    proto_len_max: int = 8
    noise_sigma: float = 0.3
    stretch_min: float = 0.8
    stretch_max: float = 1.25
    sent_len_min: int = 3
    sent_len_max: int = 8
    lang_seed: int = 1234

    def __post_init__(self):
        if self.vocab_size - N_SPECIAL < 2:
            raise ValueError(f"vocab_size {self.vocab_size} leaves fewer than 2 content tokens")
        if not 1 <= self.proto_len_min <= self.proto_len_max:
            raise ValueError("prototype length range is empty")
        if not 0 < self.stretch_min <= self.stretch_max:
            raise ValueError("time-stretch range is empty")
        if not 1 <= self.sent_len_min <= self.sent_len_max:
            raise ValueError("sentence length range is empty")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")

    @property
    def n_content(self) -> int:
        return self.vocab_size - N_SPECIAL


@dataclass
class Triplet:
    s: np.ndarray  # (T_s, F)
    x: np.ndarray  # [BOS_SRC, content..., EOS]
    y: np.ndarray  # [BOS_TGT, translated..., EOS]

    def __eq__(self, other):
        if not isinstance(other, Triplet):
            return NotImplemented
        return (
            self.s.shape == other.s.shape
            and np.array_equal(self.s, other.s)
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.y, other.y)
        )

    @property
    def content(self) -> np.ndarray:
        return self.x[1:-1]


@dataclass
class Corpus:
    spec: SyntheticLanguageSpec
    train: list[Triplet]
    dev: list[Triplet]
    test: list[Triplet]

    def split(self, name: str) -> list[Triplet]:
        if name not in ("train", "dev", "test"):
            raise KeyError(f"unknown split {name!r}")
        return getattr(self, name)


class Language:
    """Deterministic tables derived from a :class:`SyntheticLanguageSpec`."""

    def __init__(self, spec: SyntheticLanguageSpec):
        self.spec = spec
        rng = np.random.default_rng(spec.lang_seed)
        content = np.arange(N_SPECIAL, spec.vocab_size)
        self.perm = dict(zip(content.tolist(), rng.permutation(content).tolist()))
        self.inv_perm = {v: k for k, v in self.perm.items()}
        lengths = rng.integers(spec.proto_len_min, spec.proto_len_max + 1, size=spec.n_content)
        self.prototypes = {
            int(tok): rng.standard_normal((int(n), spec.feature_dim)).astype(np.float32).astype(np.float64)
            for tok, n in zip(content, lengths)
        }

    @staticmethod
    def _swap_pairs(tokens: Sequence[int]) -> list[int]:
        out = list(tokens)
        for i in range(0, len(out) - 1, 2):
            out[i], out[i + 1] = out[i + 1], out[i]
        return out

    def translate(self, content: Sequence[int]) -> list[int]:
        return self._swap_pairs([self.perm[int(t)] for t in content])

    def inverse_translate(self, target: Sequence[int]) -> list[int]:
        return [self.inv_perm[int(t)] for t in self._swap_pairs(target)]

    def synthesize(self, content: Sequence[int], rng: np.random.Generator) -> np.ndarray:
        spec = self.spec
        pieces = []
        for tok in content:
            proto = self.prototypes[int(tok)]
            factor = rng.uniform(spec.stretch_min, spec.stretch_max)
            pieces.append(stretch(proto, max(1, int(round(len(proto) * factor)))))
        s = np.concatenate(pieces, axis=0)
        if spec.noise_sigma > 0:
            s = s + spec.noise_sigma * rng.standard_normal(s.shape)
        # float32-representable so the corpus file round-trips exactly
        return s.astype(np.float32).astype(np.float64)


def stretch(proto: np.ndarray, length: int) -> np.ndarray:
    """Nearest-index resampling of a prototype to ``length`` frames."""
    src = np.minimum((np.arange(length) * len(proto)) // length, len(proto) - 1)
    return proto[src]


def _sample_content(spec: SyntheticLanguageSpec, rng: np.random.Generator) -> list[int]:
    n = int(rng.integers(spec.sent_len_min, spec.sent_len_max + 1))
    out: list[int] = []
    while len(out) < n:
        tok = int(rng.integers(N_SPECIAL, spec.vocab_size))
        if out and out[-1] == tok:
            continue
        out.append(tok)
    return out


def split_sizes(n_examples: int) -> tuple[int, int, int]:
    n_dev = max(1, int(round(0.1 * n_examples)))
    n_test = max(1, int(round(0.1 * n_examples)))
    return n_examples - n_dev - n_test, n_dev, n_test


def generate_corpus(spec: SyntheticLanguageSpec, n_examples: int, seed: int) -> Corpus:
    """Sample ``n_examples`` distinct triplets and split them 80/10/10."""
    if n_examples < 10:
        raise ValueError(f"n_examples must be >= 10, got {n_examples}")
    lang = Language(spec)
    rng = np.random.default_rng(seed)
    seen: set[tuple[int, ...]] = set()
    triplets = []
    attempts = 0
    while len(triplets) < n_examples:
        attempts += 1
        if attempts > 100 * n_examples:
            raise ValueError("vocabulary too small to draw enough distinct sentences")
        content = _sample_content(spec, rng)
        if tuple(content) in seen:
            continue
        seen.add(tuple(content))
        s = lang.synthesize(content, rng)
        x = np.array([BOS_SRC, *content, EOS], dtype=np.int64)
        y = np.array([BOS_TGT, *lang.translate(content), EOS], dtype=np.int64)
        triplets.append(Triplet(s, x, y))
    n_train, n_dev, _ = split_sizes(n_examples)
    return Corpus(spec, triplets[:n_train], triplets[n_train : n_train + n_dev], triplets[n_train + n_dev :])


def generate_bitext(spec: SyntheticLanguageSpec, n_pairs: int, seed: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Text-only (x, y) pairs from the same language, for MT pre-training."""
    lang = Language(spec)
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(n_pairs):
        content = _sample_content(spec, rng)
        pairs.append(
            (
                np.array([BOS_SRC, *content, EOS], dtype=np.int64),
                np.array([BOS_TGT, *lang.translate(content), EOS], dtype=np.int64),
            )
        )
    return pairs


def oracle_transcribe(s: np.ndarray, spec: SyntheticLanguageSpec) -> list[int]:
    """Recover content tokens from features by exhaustive segmentation.

    Dynamic program over segment end points: every admissible
    (token, stretched length) is scored by squared error against the
    stretched prototype, and the cheapest segmentation wins.
    """
    lang = Language(spec)
    candidates = []
    for tok, proto in lang.prototypes.items():
        lo = max(1, int(round(len(proto) * spec.stretch_min)))
        hi = max(1, int(round(len(proto) * spec.stretch_max)))
        for n in range(lo, hi + 1):
            candidates.append((tok, n, stretch(proto, n)))
    t_total = len(s)
    best = np.full(t_total + 1, np.inf)
    back: list[tuple[int, int] | None] = [None] * (t_total + 1)
    best[0] = 0.0
    for t in range(1, t_total + 1):
        for tok, n, frames in candidates:
            if n > t or not np.isfinite(best[t - n]):
                continue
            cost = best[t - n] + float(((s[t - n : t] - frames) ** 2).sum())
            if cost < best[t]:
                best[t] = cost
                back[t] = (tok, n)
    if back[t_total] is None:
        return []
    out = []
    t = t_total
    while t > 0:
        tok, n = back[t]
        out.append(tok)
        t -= n
    return out[::-1]


# ----------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    speech: np.ndarray  # (N, T, F)
    speech_mask: np.ndarray  # (N, T) bool
    x: np.ndarray  # (N, Lx) int
    x_mask: np.ndarray
    y: np.ndarray  # (N, Ly) int
    y_mask: np.ndarray
    indices: list[int] = field(default_factory=list)

    @property
    def n(self) -> int:
        return self.speech.shape[0]

    @property
    def text_in(self) -> tuple[np.ndarray, np.ndarray]:
        """Encoder-side transcript: content tokens plus EOS, no language tag."""
        return self.x[:, 1:], self.x_mask[:, 1:]


def pad_tokens(seqs: Sequence[np.ndarray], pad: int = PAD) -> tuple[np.ndarray, np.ndarray]:
    width = max(len(q) for q in seqs)
    out = np.full((len(seqs), width), pad, dtype=np.int64)
    mask = np.zeros((len(seqs), width), dtype=bool)
    for i, q in enumerate(seqs):
        out[i, : len(q)] = q
        mask[i, : len(q)] = True
    return out, mask


def pad_features(seqs: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    width = max(len(q) for q in seqs)
    f = seqs[0].shape[1]
    out = np.zeros((len(seqs), width, f))
    mask = np.zeros((len(seqs), width), dtype=bool)
    for i, q in enumerate(seqs):
        out[i, : len(q)] = q
        mask[i, : len(q)] = True
    return out, mask


def collate(items: Sequence[Triplet], indices: Iterable[int] = ()) -> Batch:
    speech, speech_mask = pad_features([t.s for t in items])
    x, x_mask = pad_tokens([t.x for t in items])
    y, y_mask = pad_tokens([t.y for t in items])
    return Batch(speech, speech_mask, x, x_mask, y, y_mask, list(indices))


def make_batches(
    split: Sequence[Triplet],
    batch_size: int,
    max_tokens: int | None = None,
    seed: int = 0,
    shuffle: bool = True,
    ctr: bool = True,
) -> list[Batch]:
    """Length-bucketed batches.

    Examples are shuffled (when ``shuffle``), grouped into pools of eight
    batches, sorted by speech length inside each pool and chunked. Batch
    order is shuffled again. ``max_tokens`` caps N * max speech length.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if ctr and (batch_size < 2 or len(split) < 2):
        raise ValueError("contrastive training needs at least 2 examples per batch")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(split)) if shuffle else np.arange(len(split))
    pool = 8 * batch_size
    groups: list[list[int]] = []
    for p in range(0, len(order), pool):
        chunk = sorted(order[p : p + pool].tolist(), key=lambda i: (len(split[i].s), i))
        current: list[int] = []
        longest = 0
        for i in chunk:
            n_frames = len(split[i].s)
            full = len(current) >= batch_size
            over = max_tokens is not None and max(longest, n_frames) * (len(current) + 1) > max_tokens
            if current and (full or over):
                groups.append(current)
                current, longest = [], 0
            current.append(i)
            longest = max(longest, n_frames)
        if current:
            groups.append(current)
    if ctr:
        # a trailing singleton has no in-batch negative; fold it into its neighbour
        merged: list[list[int]] = []
        for g in groups:
            if len(g) < 2 and merged:
                merged[-1].extend(g)
            else:
                merged.append(g)
        if merged and len(merged[0]) < 2:
            if len(merged) > 1:
                merged[1].extend(merged.pop(0))
        groups = merged
    if shuffle:
        groups = [groups[i] for i in rng.permutation(len(groups))]
    return [collate([split[i] for i in g], g) for g in groups]


# ----------------------------------------------------------------------------
# corpus file format


def _encode_features(s: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(s, dtype="<f4").tobytes()).decode("ascii")


def _decode_features(text: str, n_frames: int, feature_dim: int) -> np.ndarray:
    raw = base64.b64decode(text.encode("ascii"), validate=True)
    arr = np.frombuffer(raw, dtype="<f4")
    if arr.size != n_frames * feature_dim:
        raise ValueError(f"feature block holds {arr.size} values, expected {n_frames * feature_dim}")
    return arr.reshape(n_frames, feature_dim).astype(np.float64)


def write_corpus(path: str | Path, triplets: Sequence[Triplet], vocab_size: int, feature_dim: int) -> None:
    header = {
        "format": CORPUS_FORMAT,
        "version": CORPUS_VERSION,
        "vocab_size": vocab_size,
        "feature_dim": feature_dim,
        "count": len(triplets),
    }
    lines = [json.dumps(header, sort_keys=True)]
    for t in triplets:
        if t.s.shape[1] != feature_dim:
            raise ValueError(f"triplet feature width {t.s.shape[1]} != {feature_dim}")
        rec = {
            "n_frames": int(t.s.shape[0]),
            "s": _encode_features(t.s),
            "x": [int(v) for v in t.x],
            "y": [int(v) for v in t.y],
            "x_len": int(len(t.x)),
            "y_len": int(len(t.y)),
        }
        lines.append(json.dumps(rec, sort_keys=True))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_corpus(path: str | Path) -> tuple[dict, list[Triplet]]:
    """Parse a corpus file into (header, triplets). An empty file is an empty corpus."""
    text = Path(path).read_text(encoding="utf-8")
    if not text.strip():
        return {}, []
    lines = text.splitlines()
    try:
        header = json.loads(lines[0])
        if header.get("format") != CORPUS_FORMAT:
            raise ValueError(f"not a {CORPUS_FORMAT} file")
        if header.get("version") != CORPUS_VERSION:
            raise ValueError(f"unsupported version {header.get('version')}")
        vocab, feat = int(header["vocab_size"]), int(header["feature_dim"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CorpusFormatError(f"line 1: bad header: {exc}") from exc
    out = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            s = _decode_features(rec["s"], int(rec["n_frames"]), feat)
            x = np.array(rec["x"], dtype=np.int64)
            y = np.array(rec["y"], dtype=np.int64)
            if len(x) != rec["x_len"] or len(y) != rec["y_len"]:
                raise ValueError("token list length disagrees with stored length")
            if x.size and (x.min() < 0 or x.max() >= vocab) or y.size and (y.min() < 0 or y.max() >= vocab):
                raise ValueError("token id outside vocabulary")
        except (ValueError, KeyError, TypeError) as exc:
            raise CorpusFormatError(f"line {lineno}: {exc}") from exc
        out.append(Triplet(s, x, y))
    if "count" in header and header["count"] != len(out):
        raise CorpusFormatError(f"line {len(lines)}: header count {header['count']} but {len(out)} records")
    return header, out


def spec_to_dict(spec: SyntheticLanguageSpec) -> dict:
    return asdict(spec)
