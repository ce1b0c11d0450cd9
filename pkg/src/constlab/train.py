"""Multi-task training: ST + ASR + MT cross-entropy plus a weighted bridge loss."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .augment import AugmentSpec, build_contrast_views
from .data import Batch, Corpus, collate, generate_bitext, make_batches, pad_tokens
from .nn import ConstModel, ModelConfig, apply_cutoff, load_checkpoint, pooled_representation, save_checkpoint
from .objective import LossBundle, combine, contrastive_loss, cross_entropy, ctc_batch_loss, l2_loss
from .tensor import Tensor

log = logging.getLogger(__name__)

BRIDGES = ("ctr", "l2", "ctc", "none")
METRIC_COLUMNS = ("step", "l_st", "l_asr", "l_mt", "l_ctr", "total", "lr", "dev_loss", "dev_retrieval_acc")


@dataclass
class TrainConfig:
    lam: float = 1.0
    tau: float = 0.02
    level: str = "low"
    bridge: str = "ctr"
    augment: list[AugmentSpec] = field(default_factory=lambda: [AugmentSpec("original")])
    max_steps: int = 2000
    batch_size: int = 16
    max_tokens: int | None = None
    label_smoothing: float = 0.1
    seed: int = 0
    base_lr: float = 1e-3
    warmup_steps: int = 200
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-8
    log_interval: int = 100
    checkpoint_interval: int = 200
    average_last: int = 10
    mt_pretrain_steps: int = 0
    mt_pretrain_pairs: int = 2000

    def __post_init__(self):
        self.augment = [a if isinstance(a, AugmentSpec) else AugmentSpec.from_dict(a) for a in self.augment]
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.bridge not in BRIDGES:
            raise ValueError(f"bridge must be one of {BRIDGES}, got {self.bridge!r}")
        if self.level not in ("low", "high"):
            raise ValueError(f"level must be 'low' or 'high', got {self.level!r}")
        if self.tau <= 0:
            raise ValueError("tau must be > 0")
        if self.max_steps < 0 or self.warmup_steps < 1 or self.batch_size < 1:
            raise ValueError("max_steps >= 0, warmup_steps >= 1 and batch_size >= 1 are required")
        if self.log_interval < 1 or self.checkpoint_interval < 1 or self.average_last < 1:
            raise ValueError("intervals and average_last must be >= 1")

    @property
    def uses_ctr(self) -> bool:
        return self.bridge == "ctr"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["augment"] = [a.to_dict() for a in self.augment]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)


def learning_rate(step: int, base_lr: float, warmup: int) -> float:
    """Linear warmup to ``base_lr`` at ``warmup``, then inverse-sqrt decay."""
    if step < 1:
        return 0.0
    return base_lr * min(step / warmup, math.sqrt(warmup / step))


@dataclass
class OptimState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0


@dataclass
class TrainState:
    model: ConstModel
    optim: OptimState
    config: TrainConfig
    rng: np.random.Generator

    @property
    def step(self) -> int:
        return self.optim.step

    @property
    def params(self) -> dict[str, Tensor]:
        return self.model.params


def init_state(model_config: ModelConfig, train_config: TrainConfig) -> TrainState:
    model = ConstModel(model_config, seed=train_config.seed)
    optim = OptimState(
        m={k: np.zeros_like(p.data) for k, p in model.params.items()},
        v={k: np.zeros_like(p.data) for k, p in model.params.items()},
    )
    return TrainState(model, optim, train_config, np.random.default_rng([train_config.seed, 1]))


def adam_update(state: TrainState, lr: float) -> None:
    """One bias-corrected Adam step; parameters without a grad count as zero grad."""
    cfg = state.config
    opt = state.optim
    t = opt.step
    b1, b2 = cfg.beta1, cfg.beta2
    for name, p in state.model.params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        opt.m[name] = b1 * opt.m[name] + (1 - b1) * g
        opt.v[name] = b2 * opt.v[name] + (1 - b2) * g * g
        m_hat = opt.m[name] / (1 - b1**t)
        v_hat = opt.v[name] / (1 - b2**t)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)


# ----------------------------------------------------------------------------
# forward


def _bridge_loss(model: ConstModel, batch: Batch, cfg: TrainConfig, audio, a_mask, h_speech, emb, text_mask, h_text, train, rng) -> Tensor:
    if cfg.bridge == "none":
        return Tensor(0.0)
    if cfg.bridge == "ctc":
        lengths = a_mask.sum(axis=1)
        targets = [batch.x[i][batch.x_mask[i]][1:-1] for i in range(batch.n)]
        return ctc_batch_loss(model.ctc_log_probs(audio), lengths, targets)

    def pooled_pair(view_audio, view_a_mask, view_emb, view_text_mask, hs=None, hx=None):
        if cfg.level == "low":
            return pooled_representation(view_audio, view_a_mask, "low"), pooled_representation(view_emb, view_text_mask, "low")
        hs = model.encode(view_audio, view_a_mask, train, rng) if hs is None else hs
        hx = model.encode(view_emb, view_text_mask, train, rng) if hx is None else hx
        return pooled_representation(hs, view_a_mask, "high"), pooled_representation(hx, view_text_mask, "high")

    if cfg.bridge == "l2":
        u, v = pooled_pair(audio, a_mask, emb, text_mask, h_speech, h_text)
        return l2_loss(u, v)

    total = None
    view_rng = rng if rng is not None else np.random.default_rng([cfg.seed, 3])
    for view in build_contrast_views(batch, cfg.augment, view_rng):
        same_speech = view.reuses_speech
        same_text = view.tag != "word_rep"
        if same_speech:
            v_audio, v_mask = audio, a_mask
            if view.cutoff is not None:
                v_audio = apply_cutoff(audio, a_mask, view.cutoff)
        else:
            v_audio, v_mask = model.speech_encode(view.speech, view.speech_mask, view.cutoff)
        v_emb, v_tmask = (emb, text_mask) if same_text else (model.embed_text(view.text), view.text_mask)
        reuse_hs = h_speech if (same_speech and view.cutoff is None) else None
        reuse_hx = h_text if same_text else None
        u, v = pooled_pair(v_audio, v_mask, v_emb, v_tmask, reuse_hs, reuse_hx)
        term = contrastive_loss(u, v, cfg.tau)
        total = term if total is None else T.add(total, term)
    return total


def forward_losses(model: ConstModel, batch: Batch, cfg: TrainConfig, train: bool, rng=None, label_smoothing=None) -> LossBundle:
    """Shared-parameter ST, ASR, MT passes plus the bridge term."""
    eps = cfg.label_smoothing if label_smoothing is None else label_smoothing
    audio, a_mask = model.speech_encode(batch.speech, batch.speech_mask)
    h_speech = model.encode(audio, a_mask, train, rng)
    text, text_mask = batch.text_in
    emb = model.embed_text(text)
    h_text = model.encode(emb, text_mask, train, rng)

    y_in, y_out, y_mask = batch.y[:, :-1], batch.y[:, 1:], batch.y_mask[:, 1:]
    x_in, x_out, x_mask = batch.x[:, :-1], batch.x[:, 1:], batch.x_mask[:, 1:]
    l_st = cross_entropy(model.decode(y_in, h_speech, a_mask, train, rng), y_out, y_mask, eps)
    l_asr = cross_entropy(model.decode(x_in, h_speech, a_mask, train, rng), x_out, x_mask, eps)
    l_mt = cross_entropy(model.decode(y_in, h_text, text_mask, train, rng), y_out, y_mask, eps)
    l_ctr = _bridge_loss(model, batch, cfg, audio, a_mask, h_speech, emb, text_mask, h_text, train, rng)
    lam = cfg.lam if cfg.bridge != "none" else 0.0
    try:
        return combine(l_st, l_asr, l_mt, l_ctr, lam)
    except FloatingPointError as exc:
        raise FloatingPointError(f"non-finite loss at step: {exc}") from exc


def train_step(state: TrainState, batch: Batch) -> LossBundle:
    cfg = state.config
    if cfg.uses_ctr and cfg.lam > 0 and batch.n < 2:
        raise ValueError("contrastive loss needs at least 2 examples in a batch")
    bundle = forward_losses(state.model, batch, cfg, train=True, rng=state.rng)
    state.optim.step += 1
    bundle.total_tensor.backward()
    adam_update(state, learning_rate(state.optim.step, cfg.base_lr, cfg.warmup_steps))
    state.model.zero_grad()
    bundle.total_tensor = None
    return bundle


def mt_step(state: TrainState, x: np.ndarray, x_mask: np.ndarray, y: np.ndarray, y_mask: np.ndarray, lr: float) -> float:
    """Text-only MT update used by the optional pre-training stage."""
    model, cfg = state.model, state.config
    text, text_mask = x[:, 1:], x_mask[:, 1:]
    h = model.encode(model.embed_text(text), text_mask, True, state.rng)
    loss = cross_entropy(model.decode(y[:, :-1], h, text_mask, True, state.rng), y[:, 1:], y_mask[:, 1:], cfg.label_smoothing)
    loss.backward()
    state.optim.step += 1
    adam_update(state, lr)
    model.zero_grad()
    return loss.item()


# ----------------------------------------------------------------------------
# evaluation used during training


def dev_st_loss(model: ConstModel, split, batch_size: int = 32) -> float:
    """Token-mean ST negative log-likelihood (no smoothing) over a split."""
    total, count = 0.0, 0
    with T.no_grad():
        for i in range(0, len(split), batch_size):
            b = collate(split[i : i + batch_size])
            audio, a_mask = model.speech_encode(b.speech, b.speech_mask)
            h = model.encode(audio, a_mask)
            n_tok = b.y_mask[:, 1:].sum()
            loss = cross_entropy(model.decode(b.y[:, :-1], h, a_mask), b.y[:, 1:], b.y_mask[:, 1:], 0.0)
            total += loss.item() * n_tok
            count += n_tok
    return total / count


def retrieval_accuracy(model: ConstModel, split, level: str) -> float:
    from .eval import retrieve

    return retrieve(model, split, level).top1_accuracy


# ----------------------------------------------------------------------------


def format_row(row: dict) -> list[str]:
    return [str(row["step"])] + [repr(float(row[k])) for k in METRIC_COLUMNS[1:]]


def metrics_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for row in rows:
        w.writerow(format_row(row))
    return buf.getvalue()


@dataclass
class TrainResult:
    state: TrainState
    log: list[dict]
    checkpoints: list[Path]
    averaged: dict[str, Tensor] | None = None


def _check_writable(out_dir: Path) -> None:
    try:
        (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        probe = out_dir / "checkpoints" / ".write-test"
        probe.write_text("ok")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"checkpoint directory {out_dir / 'checkpoints'} is not writable: {exc}") from exc


def run_training(model_config: ModelConfig, config: TrainConfig, corpus: Corpus, out_dir: str | Path | None = None) -> TrainResult:
    """Train for ``config.max_steps`` steps, logging every ``log_interval`` steps.

    With an ``out_dir`` the metrics CSV and checkpoints are written there and
    the last ``average_last`` checkpoints are averaged into
    ``checkpoint_avg.json``. Deterministic given ``config.seed``.
    """
    if not corpus.train or not corpus.dev:
        raise ValueError("corpus needs non-empty train and dev splits")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        _check_writable(out)
    state = init_state(model_config, config)
    rows: list[dict] = []
    saved: list[Path] = []

    def save(step: int) -> None:
        if out is None:
            return
        path = out / "checkpoints" / f"ckpt_{step:06d}.json"
        save_checkpoint(path, state.params, model_config, step)
        saved.append(path)

    def record(step: int, bundle: LossBundle) -> None:
        rows.append(
            {
                "step": step,
                **bundle.as_dict(),
                "lr": learning_rate(step, config.base_lr, config.warmup_steps),
                "dev_loss": dev_st_loss(state.model, corpus.dev),
                "dev_retrieval_acc": retrieval_accuracy(state.model, corpus.dev, config.level),
            }
        )
        log.info("step %d total %.4f dev_loss %.4f dev_r@1 %.3f", step, bundle.total, rows[-1]["dev_loss"], rows[-1]["dev_retrieval_acc"])

    if config.max_steps == 0:
        save(0)
        return _finish(state, rows, saved, out)

    if config.mt_pretrain_steps:
        _pretrain_mt(state, corpus, config)

    epoch = 0
    batches: list[Batch] = []
    ctr = config.uses_ctr

    def next_batch() -> Batch:
        nonlocal epoch, batches
        if not batches:
            batches = make_batches(corpus.train, config.batch_size, config.max_tokens, seed=config.seed * 100003 + epoch, ctr=ctr)
            batches.reverse()
            epoch += 1
        return batches.pop()

    first = next_batch()
    with T.no_grad():
        record(0, forward_losses(state.model, first, config, train=False))
    batches.append(first)

    for _ in range(config.max_steps):
        bundle = train_step(state, next_batch())
        step = state.step
        if step % config.log_interval == 0 or step == config.max_steps:
            record(step, bundle)
        if step % config.checkpoint_interval == 0 or step == config.max_steps:
            save(step)
    return _finish(state, rows, saved, out)


def _pretrain_mt(state: TrainState, corpus: Corpus, config: TrainConfig) -> None:
    pairs = generate_bitext(corpus.spec, config.mt_pretrain_pairs, seed=config.seed + 7)
    rng = np.random.default_rng([config.seed, 2])
    for step in range(1, config.mt_pretrain_steps + 1):
        idx = rng.choice(len(pairs), size=min(config.batch_size, len(pairs)), replace=False)
        x, xm = pad_tokens([pairs[i][0] for i in idx])
        y, ym = pad_tokens([pairs[i][1] for i in idx])
        mt_step(state, x, xm, y, ym, learning_rate(step, config.base_lr, config.warmup_steps))
    # fine-tuning restarts the schedule and the moments
    state.optim = OptimState(
        m={k: np.zeros_like(v) for k, v in state.optim.m.items()},
        v={k: np.zeros_like(v) for k, v in state.optim.v.items()},
    )


def _finish(state: TrainState, rows, saved, out) -> TrainResult:
    result = TrainResult(state, rows, saved)
    if out is None:
        return result
    (out / "metrics.csv").write_text(metrics_csv(rows), encoding="utf-8")
    if saved:
        tail = saved[-state.config.average_last :]
        result.averaged = average_checkpoints(tail)
        save_checkpoint(out / "checkpoint_avg.json", result.averaged, state.model.config, state.step)
        save_checkpoint(out / "checkpoint_last.json", state.params, state.model.config, state.step)
    return result


def average_checkpoints(paths: Sequence[str | Path]) -> dict[str, Tensor]:
    """Elementwise mean of parameters across checkpoints."""
    if not paths:
        raise ValueError("need at least one checkpoint to average")
    acc: dict[str, np.ndarray] | None = None
    for path in paths:
        params, _, _ = load_checkpoint(path)
        if acc is None:
            acc = {k: p.data.copy() for k, p in params.items()}
            continue
        if set(params) != set(acc):
            raise ValueError(f"{path}: parameter names differ from the first checkpoint")
        for k, p in params.items():
            if p.shape != acc[k].shape:
                raise ValueError(f"{path}: shape mismatch for {k}: {p.shape} vs {acc[k].shape}")
            acc[k] += p.data
    return {k: Tensor(v / len(paths), requires_grad=True) for k, v in acc.items()}
