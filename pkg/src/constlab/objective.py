"""Training losses: label-smoothed CE, cross-modal contrastive, L2, CTC, and the weighted total."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class LossBundle:
    l_st: float
    l_asr: float
    l_mt: float
    l_ctr: float
    lam: float
    total: float
    total_tensor: Tensor | None = field(default=None, repr=False, compare=False)

    def as_dict(self) -> dict[str, float]:
        return {"l_st": self.l_st, "l_asr": self.l_asr, "l_mt": self.l_mt, "l_ctr": self.l_ctr, "total": self.total}


@dataclass(frozen=True)
class ContrastConfig:
    temperature: float = 0.02
    level: str = "low"

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("temperature must be > 0")
        if self.level not in ("low", "high"):
            raise ValueError(f"level must be 'low' or 'high', got {self.level!r}")


def cross_entropy(logits: Tensor, targets: np.ndarray, pad_mask: np.ndarray | None = None, label_smoothing: float = 0.0) -> Tensor:
    """Token-mean label-smoothed NLL.

    Per token: -[(1 - eps) * log p(target) + eps * mean_v log p(v)].
    """
    if not 0.0 <= label_smoothing < 1.0:
        raise ValueError("label_smoothing must be in [0, 1)")
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.ones(targets.shape) if pad_mask is None else np.asarray(pad_mask, dtype=np.float64)
    count = mask.sum()
    if count == 0:
        raise ValueError("cross_entropy: every target position is padding")
    lp = T.log_softmax(logits, axis=-1)
    per_token = T.scale(T.pick(lp, targets), 1.0 - label_smoothing)
    if label_smoothing:
        per_token = T.add(per_token, T.scale(T.mean_axis(lp, -1), label_smoothing))
    return T.scale(T.sum_all(T.mul(per_token, Tensor(mask))), -1.0 / count)


def contrastive_loss(
    u: Tensor,
    v: Tensor,
    temperature: float,
    extra_positives: Sequence[tuple[int, Tensor]] | None = None,
) -> Tensor:
    """Multi-class N-pair loss with in-batch negatives and cosine similarity.

    Row i scores u_i against every v_j / temperature and takes -log softmax
    at column i. Each extra ``(i, v')`` adds a term with v' as positive
    against the batch negatives {v_j : j != i}. Returns the mean over all
    terms.
    """
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    if u.ndim != 2 or u.shape != v.shape:
        raise T.ShapeError(f"contrastive_loss: u {u.shape} and v {v.shape} must both be (N, d)")
    n = u.shape[0]
    if n == 0:
        raise ValueError("contrastive_loss: empty batch")
    un = T.l2_normalize(u)
    vn = T.l2_normalize(v)
    logits = T.scale(T.matmul(un, T.transpose(vn)), 1.0 / temperature)
    terms = T.sum_all(T.pick(T.log_softmax(logits, axis=1), np.arange(n)))
    n_terms = n
    for i, v_extra in extra_positives or ():
        if not 0 <= i < n:
            raise IndexError(f"extra positive index {i} outside batch of {n}")
        ve = T.l2_normalize(T.reshape(v_extra, (1, u.shape[1])))
        pos = T.scale(T.matmul(T.slice_axis(un, i, i + 1, 0), T.transpose(ve)), 1.0 / temperature)
        row = T.slice_axis(logits, i, i + 1, 0)
        parts = [pos]
        if i > 0:
            parts.append(T.slice_axis(row, 0, i, 1))
        if i < n - 1:
            parts.append(T.slice_axis(row, i + 1, n, 1))
        full = T.concat(parts, axis=1)
        terms = T.add(terms, T.sum_all(T.pick(T.log_softmax(full, axis=1), np.zeros(1, dtype=np.int64))))
        n_terms += 1
    return T.scale(terms, -1.0 / n_terms)


def l2_loss(u: Tensor, v: Tensor) -> Tensor:
    """Mean over pairs of the squared Euclidean distance."""
    if u.shape != v.shape:
        raise T.ShapeError(f"l2_loss: shape mismatch {u.shape} vs {v.shape}")
    diff = T.sub(u, v)
    n = u.shape[0] if u.ndim > 1 else 1
    return T.scale(T.sum_all(T.mul(diff, diff)), 1.0 / n)


# ----------------------------------------------------------------------------
# CTC


def ctc_min_frames(target: Sequence[int]) -> int:
    """Shortest frame count that can emit ``target`` (repeats need a blank between)."""
    target = list(target)
    return len(target) + sum(1 for a, b in zip(target, target[1:]) if a == b)


def _logsumexp(*xs: np.ndarray) -> np.ndarray:
    stacked = np.stack(xs)
    m = stacked.max(axis=0)
    safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        return np.where(np.isfinite(m), safe + np.log(np.exp(stacked - safe).sum(axis=0)), -np.inf)


def _ctc_tables(lp: np.ndarray, ext: np.ndarray, blank: int):
    """Log-space forward (alpha) and backward (beta) tables over the blank-extended labels."""
    n_frames, s = lp.shape[0], len(ext)
    emit = lp[:, ext]  # (T, S)
    # transitions from s-2 allowed when ext[s] is a label differing from ext[s-2]
    skip = np.zeros(s, dtype=bool)
    skip[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])
    neg = np.full(s, -np.inf)

    alpha = np.full((n_frames, s), -np.inf)
    alpha[0, 0] = emit[0, 0]
    if s > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, n_frames):
        prev = alpha[t - 1]
        shift1 = np.concatenate([[-np.inf], prev[:-1]])
        shift2 = np.where(skip, np.concatenate([[-np.inf, -np.inf], prev[:-2]]) if s > 1 else neg, -np.inf)
        alpha[t] = _logsumexp(prev, shift1, shift2) + emit[t]

    beta = np.full((n_frames, s), -np.inf)
    beta[-1, -1] = emit[-1, -1]
    if s > 1:
        beta[-1, -2] = emit[-1, -2]
    skip_next = np.zeros(s, dtype=bool)
    skip_next[:-2] = skip[2:]
    for t in range(n_frames - 2, -1, -1):
        nxt = beta[t + 1]
        shift1 = np.concatenate([nxt[1:], [-np.inf]])
        shift2 = np.where(skip_next, np.concatenate([nxt[2:], [-np.inf, -np.inf]]) if s > 1 else neg, -np.inf)
        beta[t] = _logsumexp(nxt, shift1, shift2) + emit[t]
    return alpha, beta


def ctc_loss(log_probs: Tensor, target: Sequence[int], blank: int | None = None) -> Tensor:
    """-log p(target | frames) by the forward recursion in log space.

    ``log_probs`` is (T, V+1) of per-frame log-distributions; the blank
    symbol defaults to the last index.
    """
    lp = log_probs.data
    if lp.ndim != 2:
        raise T.ShapeError(f"ctc_loss: expected (T, V+1) log-probs, got {log_probs.shape}")
    n_frames, n_sym = lp.shape
    blank = n_sym - 1 if blank is None else blank
    target = np.asarray(list(target), dtype=np.int64)
    if target.size and (target.min() < 0 or target.max() >= n_sym or (target == blank).any()):
        raise ValueError("ctc_loss: target contains blank or out-of-range symbols")
    need = ctc_min_frames(target.tolist())
    if n_frames < need:
        raise ValueError(f"ctc_loss: {n_frames} frames cannot emit a target of this shape; need T >= {need}")
    if not np.isfinite(lp).all():
        raise FloatingPointError("ctc_loss: non-finite input")
    ext = np.full(2 * len(target) + 1, blank, dtype=np.int64)
    ext[1::2] = target
    alpha, beta = _ctc_tables(lp, ext, blank)
    ends = [alpha[-1, -1]] + ([alpha[-1, -2]] if len(ext) > 1 else [])
    log_p = float(_logsumexp(*[np.asarray(e) for e in ends]))

    def backward(g):
        # occupancy: alpha and beta both include the frame's emission
        occ = alpha + beta - lp[:, ext]
        grad = np.zeros_like(lp)
        for k in np.unique(ext):
            cols = occ[:, ext == k]
            grad[:, k] = -np.exp(_logsumexp(*cols.T) - log_p) if cols.shape[1] > 1 else -np.exp(cols[:, 0] - log_p)
        return (g * grad,)

    return T._result("ctc", np.asarray(-log_p), (log_probs,), backward)


def ctc_batch_loss(log_probs: Tensor, lengths: Sequence[int], targets: Sequence[Sequence[int]]) -> Tensor:
    """Mean CTC loss over a padded batch of (N, T, V+1) log-probs."""
    losses = []
    for i, (n, tgt) in enumerate(zip(lengths, targets)):
        row = T.reshape(T.slice_axis(T.slice_axis(log_probs, i, i + 1, 0), 0, int(n), 1), (int(n), log_probs.shape[2]))
        losses.append(ctc_loss(row, tgt))
    total = losses[0]
    for l in losses[1:]:
        total = T.add(total, l)
    return T.scale(total, 1.0 / len(losses))


# ----------------------------------------------------------------------------


def combine(l_st, l_asr, l_mt, l_ctr, lam: float) -> LossBundle:
    """Weighted total ST + ASR + MT + lam * CTR. Accepts floats or scalar Tensors."""
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    parts = {"l_st": l_st, "l_asr": l_asr, "l_mt": l_mt, "l_ctr": l_ctr}
    values = {}
    for name, val in parts.items():
        f = val.item() if isinstance(val, Tensor) else float(val)
        if not math.isfinite(f):
            raise FloatingPointError(f"{name} is not finite ({f})")
        if f < 0:
            raise ValueError(f"{name} is negative ({f})")
        values[name] = f
    total = values["l_st"] + values["l_asr"] + values["l_mt"] + lam * values["l_ctr"]
    total_tensor = None
    if any(isinstance(v, Tensor) for v in parts.values()):
        st, asr, mt, ctr = (v if isinstance(v, Tensor) else Tensor(float(v)) for v in parts.values())
        total_tensor = T.add(T.add(T.add(st, asr), mt), T.scale(ctr, lam)) if lam else T.add(T.add(st, asr), mt)
    return LossBundle(values["l_st"], values["l_asr"], values["l_mt"], values["l_ctr"], float(lam), total, total_tensor)
