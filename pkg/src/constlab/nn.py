"""Speech/text encoder-decoder built on :mod:`constlab.tensor`.

Speech path: two strided 1-D convolutions over precomputed frame features,
then a layer norm. Text path: a scaled word embedding. Both feed one shared
pre-LN Transformer encoder; one Transformer decoder (output projection tied
to the embedding) serves ST, ASR and MT, with the task picked by the
language-tag BOS token.
"""

from __future__ import annotations

import base64
import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .tensor import Tensor

CHECKPOINT_FORMAT = "constlab-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 40
    d_model: int = 64
    n_heads: int = 4
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    ffn_dim: int = 128
    dropout: float = 0.1
    feature_dim: int = 8
    conv_kernel: int = 5
    conv_stride: int = 2
    max_len: int = 512

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_heads", "n_enc_layers", "n_dec_layers", "ffn_dim", "feature_dim", "conv_kernel", "conv_stride", "max_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    @property
    def conv_pad(self) -> int:
        return self.conv_kernel // 2

    def speech_out_len(self, n_frames: int) -> int:
        n = n_frames
        for _ in range(2):
            n = T.conv1d_out_len(n, self.conv_kernel, self.conv_stride, self.conv_pad)
        return n

    @property
    def min_speech_frames(self) -> int:
        return self.conv_stride**2

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown ModelConfig keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class CutoffSpec:
    """Representation-level cut-off applied to the speech encoder output."""

    axis: str  # "sequence" | "feature"
    rate: float
    rng: np.random.Generator


def init_params(config: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    d, f, k, v = config.d_model, config.feature_dim, config.conv_kernel, config.vocab_size
    p: dict[str, np.ndarray] = {}

    def dense(name, n_in, n_out):
        bound = math.sqrt(6.0 / (n_in + n_out))
        p[f"{name}.w"] = rng.uniform(-bound, bound, (n_in, n_out))
        p[f"{name}.b"] = np.zeros(n_out)

    def norm(name, n):
        p[f"{name}.g"] = np.ones(n)
        p[f"{name}.b"] = np.zeros(n)

    def attention(name):
        for proj in ("q", "k", "v", "o"):
            dense(f"{name}.{proj}", d, d)

    def ffn(name):
        dense(f"{name}.fc1", d, config.ffn_dim)
        dense(f"{name}.fc2", config.ffn_dim, d)

    p["embed"] = rng.normal(0.0, d**-0.5, (v, d))
    for i, n_in in enumerate((f, d), start=1):
        bound = math.sqrt(6.0 / (k * n_in + k * d))
        p[f"speech.conv{i}.w"] = rng.uniform(-bound, bound, (k, n_in, d))
        p[f"speech.conv{i}.b"] = np.zeros(d)
    norm("speech.ln", d)
    dense("ctc.proj", d, v + 1)
    for i in range(config.n_enc_layers):
        norm(f"enc.{i}.ln1", d)
        attention(f"enc.{i}.self_attn")
        norm(f"enc.{i}.ln2", d)
        ffn(f"enc.{i}.ffn")
    norm("enc.ln", d)
    for i in range(config.n_dec_layers):
        norm(f"dec.{i}.ln1", d)
        attention(f"dec.{i}.self_attn")
        norm(f"dec.{i}.ln2", d)
        attention(f"dec.{i}.cross_attn")
        norm(f"dec.{i}.ln3", d)
        ffn(f"dec.{i}.ffn")
    norm("dec.ln", d)
    return {name: Tensor(arr, requires_grad=True) for name, arr in sorted(p.items())}


def sinusoidal_positions(length: int, d_model: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(0, d_model, 2)[None, :]
    angle = pos / np.power(10000.0, i / d_model)
    out = np.zeros((length, d_model))
    out[:, 0::2] = np.sin(angle)
    out[:, 1::2] = np.cos(angle[:, : d_model // 2])
    return out


def pooled_representation(seq: Tensor, pad_mask: np.ndarray | None, level: str = "low") -> Tensor:
    """Mean over non-pad time steps; ``level`` only labels where ``seq`` came from."""
    if level not in ("low", "high"):
        raise ValueError(f"level must be 'low' or 'high', got {level!r}")
    return T.mean_pool_time(seq, pad_mask)


def apply_cutoff(rep: Tensor, mask: np.ndarray, spec: CutoffSpec) -> Tensor:
    from .augment import cutoff_keep_mask

    keep = cutoff_keep_mask(rep.shape, mask, spec.axis, spec.rate, spec.rng)
    return T.mul(rep, Tensor(keep))


class ConstModel:
    """Parameters plus the forward passes. Dropout masks come from ``rng``."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor] | None = None, seed: int = 0):
        self.config = config
        self.params = params if params is not None else init_params(config, seed)
        self._pos = sinusoidal_positions(config.max_len, config.d_model)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    # -- helpers --------------------------------------------------------------

    def _dropout(self, x: Tensor, train: bool, rng: np.random.Generator | None) -> Tensor:
        rate = self.config.dropout
        if not train or rate == 0.0:
            return x
        if rng is None:
            raise ValueError("training-mode forward needs an rng for dropout masks")
        keep = (rng.random(x.shape) >= rate).astype(np.float64)
        return T.dropout_mask_apply(x, keep, rate)

    def _ln(self, x: Tensor, name: str) -> Tensor:
        return T.layer_norm(x, self[f"{name}.g"], self[f"{name}.b"])

    def _dense(self, x: Tensor, name: str) -> Tensor:
        return T.linear(x, self[f"{name}.w"], self[f"{name}.b"])

    def _add_positions(self, h: Tensor) -> Tensor:
        n, t, d = h.shape
        if t > self.config.max_len:
            raise ValueError(f"sequence length {t} exceeds max_len {self.config.max_len}")
        return T.add(h, Tensor(np.broadcast_to(self._pos[:t], (n, t, d)).copy()))

    def attention(self, q_in: Tensor, kv_in: Tensor, mask: np.ndarray, name: str) -> Tensor:
        """Multi-head attention; ``mask`` broadcasts to (N, 1, Tq, Tk), True = attend."""
        n, tq, d = q_in.shape
        tk = kv_in.shape[1]
        h = self.config.n_heads
        dh = d // h
        q = T.transpose(T.reshape(self._dense(q_in, f"{name}.q"), (n, tq, h, dh)), (0, 2, 1, 3))
        k = T.transpose(T.reshape(self._dense(kv_in, f"{name}.k"), (n, tk, h, dh)), (0, 2, 3, 1))
        v = T.transpose(T.reshape(self._dense(kv_in, f"{name}.v"), (n, tk, h, dh)), (0, 2, 1, 3))
        scores = T.scale(T.matmul(q, k), 1.0 / math.sqrt(dh))
        probs = T.softmax(scores, axis=-1, mask=np.broadcast_to(mask, scores.shape))
        ctx = T.reshape(T.transpose(T.matmul(probs, v), (0, 2, 1, 3)), (n, tq, d))
        return self._dense(ctx, f"{name}.o")

    def _ffn(self, x: Tensor, name: str) -> Tensor:
        return self._dense(T.gelu(self._dense(x, f"{name}.fc1")), f"{name}.fc2")

    # -- speech / text front ends ----------------------------------------------

    def speech_lengths(self, speech_mask: np.ndarray) -> np.ndarray:
        return np.array([self.config.speech_out_len(int(n)) for n in speech_mask.sum(axis=1)])

    def speech_encode(
        self,
        speech: np.ndarray,
        speech_mask: np.ndarray | None = None,
        cutoff: CutoffSpec | None = None,
    ) -> tuple[Tensor, np.ndarray]:
        """Features (N, T_s, F) -> audio representation (N, T_a, d) and its mask.

        Pad frames are zeroed before each convolution so padded and
        unpadded inputs give identical valid outputs.
        """
        cfg = self.config
        speech = np.asarray(speech, dtype=np.float64)
        if speech.ndim == 2:
            speech = speech[None]
        n, t_s, f = speech.shape
        if f != cfg.feature_dim:
            raise ValueError(f"speech feature width {f} != config feature_dim {cfg.feature_dim}")
        if speech_mask is None:
            speech_mask = np.ones((n, t_s), dtype=bool)
        lengths = speech_mask.sum(axis=1)
        if lengths.min() < cfg.min_speech_frames:
            raise ValueError(f"speech input needs at least {cfg.min_speech_frames} frames, got {int(lengths.min())}")
        if not np.isfinite(speech).all():
            raise FloatingPointError("speech features are not finite")
        h = Tensor(speech * speech_mask[:, :, None])
        valid = lengths
        for i in (1, 2):
            h = T.conv1d(h, self[f"speech.conv{i}.w"], self[f"speech.conv{i}.b"], cfg.conv_stride, cfg.conv_pad)
            h = T.gelu(h)
            valid = np.array([T.conv1d_out_len(int(v), cfg.conv_kernel, cfg.conv_stride, cfg.conv_pad) for v in valid])
            m = np.arange(h.shape[1])[None, :] < valid[:, None]
            h = T.mul(h, Tensor(np.broadcast_to(m[:, :, None], h.shape).astype(np.float64)))
        a = self._ln(h, "speech.ln")
        a = T.mul(a, Tensor(np.broadcast_to(m[:, :, None], a.shape).astype(np.float64)))
        if cutoff is not None:
            a = apply_cutoff(a, m, cutoff)
        return a, m

    def embed_text(self, tokens: np.ndarray) -> Tensor:
        """Token ids (N, L) -> sqrt(d)-scaled embedding rows (N, L, d)."""
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim == 1:
            tokens = tokens[None]
        return T.scale(T.embedding_lookup(self["embed"], tokens), math.sqrt(self.config.d_model))

    def ctc_log_probs(self, audio: Tensor) -> Tensor:
        """Per-frame log-distribution over vocab + blank (blank is the last index)."""
        return T.log_softmax(self._dense(audio, "ctc.proj"), axis=-1)

    # -- Transformer ----------------------------------------------------------

    def encode(self, h_in: Tensor, pad_mask: np.ndarray, train: bool = False, rng=None) -> Tensor:
        pad_mask = np.asarray(pad_mask, dtype=bool)
        if pad_mask.shape != h_in.shape[:2]:
            raise ValueError(f"pad mask shape {pad_mask.shape} does not match input {h_in.shape[:2]}")
        if not pad_mask.any(axis=1).all():
            raise ValueError("encoder input has an all-pad sequence")
        h = self._dropout(self._add_positions(h_in), train, rng)
        key_mask = pad_mask[:, None, None, :]
        for i in range(self.config.n_enc_layers):
            name = f"enc.{i}"
            x = self._ln(h, f"{name}.ln1")
            h = T.add(h, self._dropout(self.attention(x, x, key_mask, f"{name}.self_attn"), train, rng))
            h = T.add(h, self._dropout(self._ffn(self._ln(h, f"{name}.ln2"), f"{name}.ffn"), train, rng))
        return self._ln(h, "enc.ln")

    def decode(
        self,
        prefix: np.ndarray,
        enc_states: Tensor,
        enc_mask: np.ndarray,
        train: bool = False,
        rng=None,
    ) -> Tensor:
        """Teacher-forced logits (N, L, V); position t sees prefix[:t+1]."""
        prefix = np.asarray(prefix, dtype=np.int64)
        if prefix.ndim == 1:
            prefix = prefix[None]
        if prefix.shape[1] == 0:
            raise ValueError("decoder prefix is empty; it must start with a BOS tag")
        n, length = prefix.shape
        h = self._dropout(self._add_positions(self.embed_text(prefix)), train, rng)
        causal = np.tril(np.ones((length, length), dtype=bool))[None, None]
        cross = np.asarray(enc_mask, dtype=bool)[:, None, None, :]
        for i in range(self.config.n_dec_layers):
            name = f"dec.{i}"
            x = self._ln(h, f"{name}.ln1")
            h = T.add(h, self._dropout(self.attention(x, x, causal, f"{name}.self_attn"), train, rng))
            h = T.add(h, self._dropout(self.attention(self._ln(h, f"{name}.ln2"), enc_states, cross, f"{name}.cross_attn"), train, rng))
            h = T.add(h, self._dropout(self._ffn(self._ln(h, f"{name}.ln3"), f"{name}.ffn"), train, rng))
        h = self._ln(h, "dec.ln")
        return T.matmul(h, T.transpose(self["embed"]))

    # -- convenience ----------------------------------------------------------

    def encode_speech(self, audio: Tensor, mask: np.ndarray, train: bool = False, rng=None) -> Tensor:
        return self.encode(audio, mask, train, rng)

    def encode_text(self, emb: Tensor, mask: np.ndarray, train: bool = False, rng=None) -> Tensor:
        return self.encode(emb, mask, train, rng)

    def representations(self, speech, speech_mask, text, text_mask, level: str) -> tuple[Tensor, Tensor]:
        """Pooled (u, v) for a batch, in eval mode."""
        a, a_mask = self.speech_encode(speech, speech_mask)
        e = self.embed_text(text)
        if level == "low":
            return pooled_representation(a, a_mask, "low"), pooled_representation(e, text_mask, "low")
        if level == "high":
            hs = self.encode(a, a_mask)
            hx = self.encode(e, text_mask)
            return pooled_representation(hs, a_mask, "high"), pooled_representation(hx, text_mask, "high")
        raise ValueError(f"level must be 'low' or 'high', got {level!r}")

    def step_fn(self, enc_states: Tensor, enc_mask: np.ndarray) -> Callable[[np.ndarray], np.ndarray]:
        """Next-token log-probabilities for a batch of prefixes over fixed encoder states."""

        def fn(prefixes: np.ndarray) -> np.ndarray:
            prefixes = np.asarray(prefixes, dtype=np.int64)
            k = prefixes.shape[0]
            states = Tensor(np.repeat(enc_states.data, k, axis=0))
            mask = np.repeat(enc_mask, k, axis=0)
            with T.no_grad():
                logits = self.decode(prefixes, states, mask)
                return T.log_softmax(logits, axis=-1).data[:, -1, :]

        return fn

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


# ----------------------------------------------------------------------------
# checkpoints


def _encode_array(a: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(a, dtype="<f8").tobytes()).decode("ascii")


def _decode_array(text: str, shape) -> np.ndarray:
    return np.frombuffer(base64.b64decode(text), dtype="<f8").reshape(shape).copy()


def save_checkpoint(path: str | Path, params: dict[str, Tensor], config: ModelConfig, step: int) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "step": int(step),
        "config": asdict(config),
        "params": {
            name: {"shape": list(t.shape), "data": _encode_array(t.data)} for name, t in sorted(params.items())
        },
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n", encoding="ascii")


def load_checkpoint(path: str | Path) -> tuple[dict[str, Tensor], ModelConfig, int]:
    doc = json.loads(Path(path).read_text(encoding="ascii"))
    if doc.get("format") != CHECKPOINT_FORMAT or doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: not a version-{CHECKPOINT_VERSION} {CHECKPOINT_FORMAT} file")
    config = ModelConfig.from_dict(doc["config"])
    params = {
        name: Tensor(_decode_array(entry["data"], entry["shape"]), requires_grad=True)
        for name, entry in doc["params"].items()
    }
    return params, config, int(doc["step"])
