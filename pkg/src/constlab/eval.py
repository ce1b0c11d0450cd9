"""Decoding, BLEU, cross-modal retrieval and modality-gap statistics."""

from __future__ import annotations

import csv
import io
import math
from collections import Counter
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .data import BOS_SRC, BOS_TGT, EOS, collate
from .nn import ConstModel

StepFn = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class DecodeConfig:
    beam: int = 4
    alpha: float = 1.0
    max_len: int = 20

    def __post_init__(self):
        if self.beam < 1:
            raise ValueError("beam size must be >= 1")
        if self.alpha < 0:
            raise ValueError("length penalty alpha must be >= 0")
        if self.max_len < 1:
            raise ValueError("max_len must be >= 1")


@dataclass(frozen=True)
class Hypothesis:
    tokens: tuple[int, ...]  # generated tokens, BOS excluded, EOS included when finished
    logprob: float
    score: float
    finished_at: int


def length_normalize(logprob: float, length: int, alpha: float) -> float:
    return logprob / (max(length, 1) ** alpha)


def _rank_key(h: Hypothesis):
    return (-h.score, h.finished_at, h.tokens)


def _search(step_fn: StepFn, bos: int, eos: int, cfg: DecodeConfig) -> list[Hypothesis]:
    live: list[tuple[tuple[int, ...], float]] = [((), 0.0)]
    finished: list[Hypothesis] = []
    for t in range(1, cfg.max_len + 1):
        prefixes = np.array([(bos, *toks) for toks, _ in live], dtype=np.int64)
        lp = np.asarray(step_fn(prefixes), dtype=np.float64)
        cands = []
        for k, (toks, acc) in enumerate(live):
            for v in range(lp.shape[1]):
                cands.append((acc + lp[k, v], (*toks, v)))
        cands.sort(key=lambda c: (-c[0], c[1]))
        live = []
        for acc, toks in cands[: cfg.beam]:
            if toks[-1] == eos:
                finished.append(Hypothesis(toks, acc, length_normalize(acc, len(toks), cfg.alpha), t))
            else:
                live.append((toks, acc))
        if not live or len(finished) >= cfg.beam:
            break
    else:
        for toks, acc in live:
            finished.append(Hypothesis(toks, acc, length_normalize(acc, len(toks), cfg.alpha), cfg.max_len + 1))
    return finished


def beam_decode(step_fn: StepFn, bos: int, eos: int, cfg: DecodeConfig) -> Hypothesis:
    """Beam search over next-token log-probabilities.

    Hypotheses are ranked by logprob / |y|^alpha, ties broken by earlier
    completion and then by token order. For beam > 1 the greedy path is
    kept as a candidate, so widening the beam never lowers the score.
    """
    pool = _search(step_fn, bos, eos, cfg)
    if cfg.beam > 1:
        pool += _search(step_fn, bos, eos, DecodeConfig(1, cfg.alpha, cfg.max_len))
    return min(pool, key=_rank_key)


def greedy_decode(step_fn: StepFn, bos: int, eos: int, max_len: int) -> list[int]:
    toks = [bos]
    for _ in range(max_len):
        nxt = int(np.argmax(step_fn(np.array([toks]))[0]))
        toks.append(nxt)
        if nxt == eos:
            break
    return toks[1:]


def sequence_logprob(step_fn: StepFn, bos: int, tokens: Sequence[int]) -> float:
    total = 0.0
    prefix = [bos]
    for tok in tokens:
        total += float(step_fn(np.array([prefix]))[0, tok])
        prefix.append(tok)
    return total


def model_step_fn(model: ConstModel, source, task: str) -> StepFn:
    """Encode one source (speech features or transcript ids) and return its step function."""
    with T.no_grad():
        if task in ("st", "asr"):
            audio, mask = model.speech_encode(np.asarray(source)[None])
            states = model.encode(audio, mask)
        elif task == "mt":
            ids = np.asarray(source, dtype=np.int64)[None]
            mask = np.ones(ids.shape, dtype=bool)
            states = model.encode(model.embed_text(ids), mask)
        else:
            raise ValueError(f"unknown task {task!r}")
    return model.step_fn(states, mask)


def translate(model: ConstModel, source, task: str, cfg: DecodeConfig) -> Hypothesis:
    bos = BOS_SRC if task == "asr" else BOS_TGT
    return beam_decode(model_step_fn(model, source, task), bos, EOS, cfg)


# ----------------------------------------------------------------------------
# BLEU


def _ngrams(tokens: Sequence, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu(hypotheses: Sequence[Sequence], references: Sequence[Sequence], max_n: int = 4) -> float:
    """Corpus BLEU in [0, 100] with exponential smoothing of zero n-gram matches."""
    if len(hypotheses) != len(references):
        raise ValueError(f"{len(hypotheses)} hypotheses vs {len(references)} references")
    if not hypotheses:
        raise ValueError("BLEU of an empty corpus is undefined")
    correct = [0] * max_n
    total = [0] * max_n
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp, ref = list(hyp), list(ref)
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_n + 1):
            h, r = _ngrams(hyp, n), _ngrams(ref, n)
            correct[n - 1] += sum(min(c, r[g]) for g, c in h.items())
            total[n - 1] += max(len(hyp) - n + 1, 0)
    if hyp_len == 0:
        return 0.0
    log_sum = 0.0
    smooth = 1.0
    for n in range(max_n):
        if total[n] == 0:
            return 0.0
        if correct[n] == 0:
            smooth *= 2.0
            p = 1.0 / (smooth * total[n])
        else:
            p = correct[n] / total[n]
        log_sum += math.log(p)
    bp = 1.0 if hyp_len >= ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(log_sum / max_n)


def strip_special(tokens: Sequence[int]) -> list[int]:
    out = []
    for t in tokens:
        if t == EOS:
            break
        if t in (BOS_SRC, BOS_TGT):
            continue
        out.append(int(t))
    return out


def corpus_bleu(model: ConstModel, split, cfg: DecodeConfig, task: str = "st") -> float:
    hyps, refs = [], []
    for ex in split:
        source = ex.x[1:] if task == "mt" else ex.s
        hyps.append(strip_special(translate(model, source, task, cfg).tokens))
        refs.append(strip_special(ex.x[1:] if task == "asr" else ex.y[1:]))
    return bleu(hyps, refs)


# ----------------------------------------------------------------------------
# retrieval and modality gap


@dataclass(frozen=True)
class RetrievalReport:
    level: str
    n_queries: int
    correct: int
    top1_accuracy: float
    mean_paired_cosine: float
    mean_unpaired_cosine: float

    @property
    def margin(self) -> float:
        return self.mean_paired_cosine - self.mean_unpaired_cosine


def cosine_matrix(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    nu = np.linalg.norm(u, axis=1)
    nv = np.linalg.norm(v, axis=1)
    for name, norms in (("speech", nu), ("text", nv)):
        bad = np.flatnonzero(norms == 0)
        if bad.size:
            raise ValueError(f"zero-norm {name} representation for example {int(bad[0])}")
    return (u / nu[:, None]) @ (v / nv[:, None]).T


def retrieval_from_reps(u: np.ndarray, v: np.ndarray, level: str = "low") -> RetrievalReport:
    """Top-1 speech-to-transcript retrieval by largest cosine; ties count as misses."""
    u, v = np.asarray(u, dtype=np.float64), np.asarray(v, dtype=np.float64)
    n = u.shape[0]
    if n < 2 or v.shape != u.shape:
        raise ValueError("retrieval needs matching (N, d) arrays with N >= 2")
    sims = cosine_matrix(u, v)
    paired = np.diag(sims)
    off = sims.copy()
    np.fill_diagonal(off, -np.inf)
    correct = int((paired > off.max(axis=1)).sum())
    unpaired = sims[~np.eye(n, dtype=bool)]
    return RetrievalReport(level, n, correct, correct / n, float(paired.mean()), float(unpaired.mean()))


def split_representations(model: ConstModel, split, level: str, batch_size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    us, vs = [], []
    with T.no_grad():
        for i in range(0, len(split), batch_size):
            b = collate(split[i : i + batch_size])
            text, mask = b.text_in
            u, v = model.representations(b.speech, b.speech_mask, text, mask, level)
            us.append(u.data)
            vs.append(v.data)
    return np.concatenate(us), np.concatenate(vs)


def retrieve(model: ConstModel, split, level: str) -> RetrievalReport:
    if len(split) < 2:
        raise ValueError("retrieval needs at least 2 examples")
    u, v = split_representations(model, split, level)
    return retrieval_from_reps(u, v, level)


def pca(points: np.ndarray, k: int = 2) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return (coords (N, k), components (k, d), mean (d,))."""
    points = np.asarray(points, dtype=np.float64)
    mean = points.mean(axis=0)
    _, _, vt = np.linalg.svd(points - mean, full_matrices=False)
    comps = vt[:k]
    # fix the sign so outputs are reproducible across LAPACK builds
    signs = np.sign(comps[np.arange(len(comps)), np.abs(comps).argmax(axis=1)])
    comps = comps * signs[:, None]
    return (points - mean) @ comps.T, comps, mean


@dataclass
class GapReport:
    level: str
    paired_mean: float
    paired_std: float
    unpaired_mean: float
    unpaired_std: float
    coords_speech: np.ndarray
    coords_text: np.ndarray

    @property
    def margin(self) -> float:
        return self.paired_mean - self.unpaired_mean


def gap_from_reps(u: np.ndarray, v: np.ndarray, level: str = "low") -> GapReport:
    u, v = np.asarray(u, dtype=np.float64), np.asarray(v, dtype=np.float64)
    n = u.shape[0]
    if n < 2:
        raise ValueError("gap report needs at least 2 examples")
    sims = cosine_matrix(u, v)
    paired = np.diag(sims)
    unpaired = sims[~np.eye(n, dtype=bool)]
    coords, _, _ = pca(np.concatenate([u, v]), 2)
    return GapReport(level, float(paired.mean()), float(paired.std()), float(unpaired.mean()), float(unpaired.std()), coords[:n], coords[n:])


def gap_report(model: ConstModel, split, level: str = "low") -> GapReport:
    if len(split) < 2:
        raise ValueError("gap report needs at least 2 examples")
    u, v = split_representations(model, split, level)
    return gap_from_reps(u, v, level)


# ----------------------------------------------------------------------------
# report files


def _csv(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _num(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def retrieval_csv(reports: Sequence[RetrievalReport]) -> str:
    return _csv(
        ["level", "n_queries", "correct", "top1_accuracy", "mean_paired_cosine", "mean_unpaired_cosine", "margin"],
        [[r.level, r.n_queries, r.correct, _num(r.top1_accuracy), _num(r.mean_paired_cosine), _num(r.mean_unpaired_cosine), _num(r.margin)] for r in reports],
    )


def gap_csv(reports: Sequence[GapReport]) -> str:
    return _csv(
        ["level", "paired_mean", "paired_std", "unpaired_mean", "unpaired_std", "margin"],
        [[g.level, _num(g.paired_mean), _num(g.paired_std), _num(g.unpaired_mean), _num(g.unpaired_std), _num(g.margin)] for g in reports],
    )


def pca_csv(report: GapReport) -> str:
    rows = [["speech", i, _num(x), _num(y)] for i, (x, y) in enumerate(report.coords_speech)]
    rows += [["text", i, _num(x), _num(y)] for i, (x, y) in enumerate(report.coords_text)]
    return _csv(["modality", "index", "pc1", "pc2"], rows)
