"""Hard-example views for the contrastive term.

Input-level: span masking of speech frames and word repetition of the
transcript. Representation-level: sequence or feature cut-off of the
speech encoder output (block erasure, survivors are not rescaled).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from .data import SPECIAL_TOKENS, Batch, pad_features, pad_tokens
from .nn import CutoffSpec

STRATEGIES = ("original", "span_mask", "word_rep", "seq_cutoff", "feat_cutoff")

# Short names used in sweep reports and heat maps.
SHORT_NAMES = {
    "original": "Original",
    "word_rep": "Rep",
    "span_mask": "SMA",
    "seq_cutoff": "SCut",
    "feat_cutoff": "FCut",
}


@dataclass(frozen=True)
class AugmentSpec:
    strategy: str = "original"
    mask_prob: float = 0.05
    mask_span: int = 4
    repetition_rate: float = 1.0
    cutoff_rate: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown augmentation strategy {self.strategy!r}; choose from {STRATEGIES}")
        if not 0.0 <= self.mask_prob <= 1.0:
            raise ValueError("mask_prob must be in [0, 1]")
        if self.mask_span < 1:
            raise ValueError("mask_span must be >= 1")
        if self.repetition_rate < 0:
            raise ValueError("repetition_rate must be >= 0")
        if not 0.0 <= self.cutoff_rate < 1.0:
            raise ValueError("cutoff_rate must be in [0, 1)")

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown AugmentSpec keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def span_mask(s: np.ndarray, p: float, span: int, rng: np.random.Generator) -> np.ndarray:
    """Zero ``span`` frames after every start index; starts are Bernoulli(p) per frame."""
    if span < 1:
        raise ValueError("span must be >= 1")
    s = np.asarray(s, dtype=np.float64)
    n_frames = s.shape[0]
    starts = np.flatnonzero(rng.random(n_frames) < p)
    keep = np.ones(n_frames, dtype=bool)
    for st in starts:
        keep[st : st + span] = False
    return s * keep[:, None]


def word_repetition(x, mean: float, rng: np.random.Generator, special=SPECIAL_TOKENS) -> np.ndarray:
    """Repeat each non-special token 1 + Poisson(mean) times in place."""
    if mean < 0:
        raise ValueError("mean must be >= 0")
    x = np.asarray(x, dtype=np.int64)
    k = rng.poisson(mean, size=len(x))
    k[np.isin(x, list(special))] = 0
    return np.repeat(x, 1 + k)


def cutoff_keep_mask(shape, valid: np.ndarray | None, axis: str, rate: float, rng: np.random.Generator) -> np.ndarray:
    """0/1 keep mask for (N, T, d) or (T, d) representations.

    Sequence cut-off drops whole time rows, feature cut-off drops whole
    feature columns, each independently with probability ``rate``. When a
    sequence cut would erase every valid row of an example, its first
    valid row is kept so the pooled vector stays nonzero.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError("cut-off rate must be in [0, 1)")
    squeeze = len(shape) == 2
    n, t, d = (1, *shape) if squeeze else shape
    valid = np.ones((n, t), dtype=bool) if valid is None else np.asarray(valid, dtype=bool).reshape(n, t)
    if axis == "sequence":
        rows = rng.random((n, t)) >= rate
        for i in range(n):
            if valid[i].any() and not (rows[i] & valid[i]).any():
                rows[i, np.flatnonzero(valid[i])[0]] = True
        keep = np.broadcast_to(rows[:, :, None], (n, t, d))
    elif axis == "feature":
        cols = rng.random((n, d)) >= rate
        keep = np.broadcast_to(cols[:, None, :], (n, t, d))
    else:
        raise ValueError(f"cut-off axis must be 'sequence' or 'feature', got {axis!r}")
    keep = keep.astype(np.float64)
    return keep[0] if squeeze else keep


def cutoff(rep: np.ndarray, axis: str, rate: float, rng: np.random.Generator) -> np.ndarray:
    """Apply a cut-off to a plain (T, d) array."""
    rep = np.asarray(rep, dtype=np.float64)
    return rep * cutoff_keep_mask(rep.shape, None, axis, rate, rng)


@dataclass
class ContrastView:
    tag: str
    speech: np.ndarray
    speech_mask: np.ndarray
    text: np.ndarray  # encoder-side transcript ids (content + EOS)
    text_mask: np.ndarray
    cutoff: CutoffSpec | None = None

    @property
    def reuses_speech(self) -> bool:
        return self.tag in ("original", "word_rep", "seq_cutoff", "feat_cutoff")


def build_contrast_views(batch: Batch, specs, rng: np.random.Generator) -> list[ContrastView]:
    """One view per spec; view i always pairs speech i with transcript i."""
    specs = list(specs)
    if not specs:
        raise ValueError("at least one augmentation spec is required")
    tags = [s.strategy for s in specs]
    if len(set(tags)) != len(tags):
        raise ValueError(f"duplicate augmentation strategies: {tags}")
    text, text_mask = batch.text_in
    lengths = batch.speech_mask.sum(axis=1)
    views = []
    for spec in specs:
        sub = np.random.default_rng([spec.seed, int(rng.integers(2**31))])
        if spec.strategy == "original":
            views.append(ContrastView("original", batch.speech, batch.speech_mask, text, text_mask))
        elif spec.strategy == "span_mask":
            masked = [span_mask(batch.speech[i, :n], spec.mask_prob, spec.mask_span, sub) for i, n in enumerate(lengths)]
            sp, sm = pad_features(masked)
            views.append(ContrastView("span_mask", sp, sm, text, text_mask))
        elif spec.strategy == "word_rep":
            seqs = [word_repetition(text[i][text_mask[i]], spec.repetition_rate, sub) for i in range(batch.n)]
            rt, rm = pad_tokens(seqs)
            views.append(ContrastView("word_rep", batch.speech, batch.speech_mask, rt, rm))
        else:
            axis = "sequence" if spec.strategy == "seq_cutoff" else "feature"
            views.append(
                ContrastView(spec.strategy, batch.speech, batch.speech_mask, text, text_mask, CutoffSpec(axis, spec.cutoff_rate, sub))
            )
    return views


def parse_augment_list(text: str, **overrides) -> list[AugmentSpec]:
    """``"original,seq_cutoff"`` -> specs. Accepts long or short strategy names."""
    lookup = {k: k for k in STRATEGIES}
    lookup.update({v.lower(): k for k, v in SHORT_NAMES.items()})
    out = []
    for raw in text.split(","):
        name = raw.strip()
        if not name:
            continue
        key = lookup.get(name.lower())
        if key is None:
            raise ValueError(f"unknown augmentation {name!r}")
        out.append(AugmentSpec(strategy=key, **overrides))
    return out
