"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line.

The heavy criteria share two sweeps run once per session through the CLI:
a contrast-level sweep at full default settings (criteria 4 to 7) and a
strategy-pair sweep with shorter runs (criterion 8). Run the fast ones only
with ``pytest -m "not slow" tests/test_acceptance.py``.
"""

import csv
import itertools
import json
import math
import time

import numpy as np
import pytest

from constlab import tensor as T
from constlab.augment import word_repetition
from constlab.cli import main, read_sweep_csv
from constlab.eval import bleu
from constlab.objective import contrastive_loss, cross_entropy, ctc_loss, ctc_min_frames, l2_loss
from constlab.tensor import Tensor, grad_check

from oracles import CtcEnumerator

INSTANCES = 20


@pytest.fixture
def report(capsys):
    def emit(number, passed, detail):
        with capsys.disabled():
            print(f"\nCRITERION {number}: {'PASS' if passed else 'FAIL'} | {detail}")
        return passed

    return emit


# ----------------------------------------------------------------------------
# 1. gradient correctness


def _rand(rng, shape):
    return Tensor(rng.uniform(-2.0, 2.0, size=shape))


def _weighted(fn, shape_out, rng):
    w = Tensor(rng.standard_normal(shape_out))
    return lambda *xs: T.sum_all(T.mul(fn(*xs), w))


def _mask(n, t):
    m = np.ones((n, t), dtype=bool)
    m[0, t - 2 :] = False
    return m


PRIMITIVES = {
    "add": (lambda a, b: T.add(a, b), [(3, 4), (3, 4)]),
    "add_bias": (lambda a, b: T.add(a, b), [(2, 3, 4), (4,)]),
    "sub": (lambda a, b: T.sub(a, b), [(3, 4), (3, 4)]),
    "mul": (lambda a, b: T.mul(a, b), [(3, 4), (3, 4)]),
    "scale": (lambda a: T.scale(a, 1.7), [(3, 4)]),
    "matmul": (lambda a, b: T.matmul(a, b), [(2, 3, 4), (2, 4, 3)]),
    "linear": (lambda x, w, b: T.linear(x, w, b), [(2, 3, 4), (4, 5), (5,)]),
    "conv1d": (lambda x, w, b: T.conv1d(x, w, b, stride=2, pad=2), [(2, 9, 3), (5, 3, 4), (4,)]),
    "gelu": (T.gelu, [(3, 5)]),
    "softmax": (lambda a: T.softmax(a, -1), [(3, 5)]),
    "softmax_masked": (lambda a: T.softmax(a, -1, np.array([True, True, False, True, False])), [(3, 5)]),
    "log_softmax": (lambda a: T.log_softmax(a, -1), [(3, 5)]),
    "layer_norm": (lambda x, g, b: T.layer_norm(x, g, b), [(3, 6), (6,), (6,)]),
    "mean_pool_time": (lambda a: T.mean_pool_time(a, _mask(2, 5)), [(2, 5, 3)]),
    "sum_all": (T.sum_all, [(3, 4)]),
    "mean_axis": (lambda a: T.mean_axis(a, 0), [(3, 4)]),
    "l2_normalize": (T.l2_normalize, [(3, 4)]),
    "concat": (lambda a, b: T.concat([a, b], 0), [(2, 3), (1, 3)]),
    "slice_axis": (lambda a: T.slice_axis(a, 1, 3, 1), [(2, 4)]),
    "transpose": (lambda a: T.transpose(a, (1, 0, 2)), [(2, 3, 4)]),
    "reshape": (lambda a: T.reshape(a, (4, 3)), [(2, 6)]),
    "pick": (lambda a: T.pick(a, np.array([[0, 2], [3, 1]])), [(2, 2, 4)]),
    "embedding_lookup": (lambda t: T.embedding_lookup(t, np.array([[1, 0, 3], [3, 3, 2]])), [(4, 5)]),
    "dropout_mask_apply": (lambda a: T.dropout_mask_apply(a, np.arange(12).reshape(3, 4) % 3 != 0, 0.3), [(3, 4)]),
}


def _relu_case(rng):
    x = rng.uniform(0.05, 2.0, (3, 4)) * rng.choice([-1.0, 1.0], (3, 4))  # keep away from the kink
    return [Tensor(x)]


def _loss_cases():
    """(name, factory(rng) -> (f, args)) for every loss."""

    def ce(rng):
        targets = rng.integers(0, 6, (2, 4))
        mask = np.ones((2, 4))
        mask[1, 3] = 0
        return (lambda z: cross_entropy(z, targets, mask, label_smoothing=0.1)), [_rand(rng, (2, 4, 6))]

    def ctr(tau):
        # operating point: training batch size 16, model width 64
        return lambda rng: ((lambda u, v: contrastive_loss(u, v, tau)), [_rand(rng, (16, 64)), _rand(rng, (16, 64))])

    def l2(rng):
        return l2_loss, [_rand(rng, (4, 8)), _rand(rng, (4, 8))]

    def ctc(rng):
        target = [int(t) for t in rng.integers(0, 4, int(rng.integers(1, 4)))]
        n_frames = ctc_min_frames(target) + int(rng.integers(0, 4))
        return (lambda z: ctc_loss(T.log_softmax(z, -1), target)), [_rand(rng, (n_frames, 5))]

    return {"ce_eps0.1": ce, "ctr_tau0.02": ctr(0.02), "ctr_tau1.0": ctr(1.0), "l2": l2, "ctc": ctc}


def test_criterion_01_gradient_correctness(report):
    start = time.perf_counter()
    worst = {}
    failures = {}
    rng = np.random.default_rng(2024)
    for name, (fn, shapes) in PRIMITIVES.items():
        for _ in range(INSTANCES):
            args = [_rand(rng, s) for s in shapes]
            f = _weighted(fn, fn(*args).shape, rng)
            r = grad_check(f, args, h=1e-5, tol=1e-4)
            worst[name] = max(worst.get(name, 0.0), r.worst)
            failures[name] = failures.get(name, 0) + (not r.passed)
    for _ in range(INSTANCES):
        args = _relu_case(rng)
        r = grad_check(_weighted(T.relu, (3, 4), rng), args, h=1e-5, tol=1e-4)
        worst["relu"] = max(worst.get("relu", 0.0), r.worst)
        failures["relu"] = failures.get("relu", 0) + (not r.passed)
    for name, factory in _loss_cases().items():
        for _ in range(INSTANCES):
            f, args = factory(rng)
            r = grad_check(f, args, h=1e-5, tol=1e-4)
            worst[name] = max(worst.get(name, 0.0), r.worst)
            failures[name] = failures.get(name, 0) + (not r.passed)
    elapsed = time.perf_counter() - start
    bad = {k: v for k, v in failures.items() if v}
    passed = not bad and elapsed < 120
    detail = f"{len(worst)} functions x {INSTANCES} instances in {elapsed:.1f}s; worst rel err {max(worst.values()):.2e}"
    if bad:
        detail += "; failing instances " + ", ".join(f"{k}: {v}/{INSTANCES} (worst {worst[k]:.2e})" for k, v in sorted(bad.items()))
    assert report(1, passed, detail), detail


# ----------------------------------------------------------------------------
# 2. CTC vs enumeration


def test_criterion_02_ctc_oracle(report):
    rng = np.random.default_rng(0)
    n = 0
    worst = 0.0
    for n_frames in range(1, 7):
        for v in range(1, 5):
            enum = CtcEnumerator(n_frames, v + 1)
            for length in range(4):
                for target in itertools.product(range(v), repeat=length):
                    if ctc_min_frames(target) > n_frames:
                        continue
                    z = rng.standard_normal((n_frames, v + 1))
                    lp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
                    worst = max(worst, abs(ctc_loss(Tensor(lp), target).item() - enum.loss(lp, target)))
                    n += 1
    passed = n >= 200 and worst < 1e-10
    assert report(2, passed, f"{n} instances (T<=6, |x|<=3, V<=4), max |DP - enumeration| = {worst:.2e}")


# ----------------------------------------------------------------------------
# 3. contrastive closed forms


def test_criterion_03_contrastive_closed_forms(report):
    rng = np.random.default_rng(0)
    single = contrastive_loss(Tensor(rng.standard_normal((1, 8))), Tensor(rng.standard_normal((1, 8))), 0.02).item()
    errs = []
    for tau in (1.0, 0.5, 0.1, 0.02):
        got = contrastive_loss(Tensor(np.eye(2)), Tensor(np.eye(2)), tau).item()
        errs.append(abs(got - math.log(1.0 + math.exp(-(1.0 - 0.0) / tau))))
    n = 8
    limit = contrastive_loss(Tensor(rng.standard_normal((n, 16))), Tensor(rng.standard_normal((n, 16))), 1e6).item()
    limit_err = abs(limit - math.log(n))
    passed = single == 0.0 and max(errs) < 1e-9 and limit_err < 1e-3
    assert report(3, passed, f"N=1 loss {single!r}; orthogonal 2-pair max err {max(errs):.1e}; |loss - ln N| at tau=1e6 {limit_err:.1e}")


# ----------------------------------------------------------------------------
# shared sweeps


@pytest.fixture(scope="session")
def contrast_sweep(tmp_path_factory):
    """Default settings: 2,000 triplets, vocab 40, d_model 64, 2,000 steps, lambda 1, tau 0.02."""
    out = tmp_path_factory.mktemp("contrast") / "sweep"
    code = main(["sweep", "--axis", "contrast-level", "--out", str(out)])
    assert code == 0
    return out


@pytest.fixture(scope="session")
def pair_sweep(tmp_path_factory):
    cfg = tmp_path_factory.mktemp("pairs") / "pairs.json"
    cfg.write_text(json.dumps({"train": {"max_steps": 600}}))
    out = cfg.parent / "sweep"
    code = main(["sweep", "--config", str(cfg), "--axis", "strategy-pairs", "--bleu-examples", "0", "--out", str(out)])
    assert code == 0
    return out


def _rows(sweep_dir):
    return {r["label"]: r for r in read_sweep_csv(sweep_dir / "sweep.csv")}


def _metrics(run_dir):
    with open(run_dir / "metrics.csv", newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.mark.slow
def test_criterion_04_learnability(report, contrast_sweep):
    run = contrast_sweep / "contrast_low"
    cfg = json.loads((run / "config.json").read_text())
    rows = _metrics(run)
    first, last = float(rows[0]["dev_loss"]), float(rows[-1]["dev_loss"])
    drop = 1.0 - last / first
    seconds = json.loads((run / "timing.json").read_text())["train_seconds"]
    setup_ok = (
        cfg["data"]["n_examples"] >= 500 and cfg["model"]["vocab_size"] >= 32 and cfg["model"]["d_model"] == 64
        and cfg["train"]["max_steps"] == 2000 and cfg["train"]["lam"] == 1.0 and cfg["train"]["tau"] == 0.02
    )
    passed = setup_ok and int(rows[-1]["step"]) == 2000 and drop >= 0.5 and seconds < 15 * 60
    assert report(4, passed, f"dev ST loss {first:.3f} -> {last:.3f} (drop {100 * drop:.1f}%), training wall-clock {seconds:.0f}s")


@pytest.mark.slow
def test_criterion_05_retrieval_direction(report, contrast_sweep):
    rows = _rows(contrast_sweep)
    ctr, base = rows["contrast_low"], rows["no_contrast"]
    gain = 100 * (ctr["r1_low"] - base["r1_low"])
    passed = gain >= 30 and ctr["r1_high"] >= base["r1_high"]
    detail = (
        f"low-level top-1 {100 * base['r1_low']:.1f}% (lambda=0) -> {100 * ctr['r1_low']:.1f}% (CTR), +{gain:.1f} points; "
        f"high-level {100 * base['r1_high']:.1f}% -> {100 * ctr['r1_high']:.1f}%"
    )
    assert report(5, passed, detail)


@pytest.mark.slow
def test_criterion_06_modality_gap(report, contrast_sweep):
    rows = _rows(contrast_sweep)
    ctr, base = rows["contrast_low"], rows["no_contrast"]
    diff = ctr["margin_low"] - base["margin_low"]
    passed = diff >= 0.2
    assert report(6, passed, f"low-level paired-minus-unpaired cosine margin {base['margin_low']:.3f} (lambda=0) vs {ctr['margin_low']:.3f} (CTR), difference {diff:.3f}")


@pytest.mark.slow
def test_criterion_07_contrast_level_table(report, contrast_sweep):
    rows = read_sweep_csv(contrast_sweep / "sweep.csv")
    by = {r["label"]: r for r in rows}
    low, high, none = by["contrast_low"], by["contrast_high"], by["no_contrast"]
    # each contrastive variant is compared with the baseline at the level it contrasts
    beats_low = low["margin_low"] > none["margin_low"]
    beats_high = high["margin_high"] > none["margin_high"]
    passed = len(rows) == 3 and beats_low and beats_high
    detail = (
        f"3 rows; margin at own level: low-CTR {low['margin_low']:.3f} vs none {none['margin_low']:.3f}, "
        f"high-CTR {high['margin_high']:.3f} vs none {none['margin_high']:.3f}; "
        f"BLEU (reported only) low {low['bleu']:.2f}, high {high['bleu']:.2f}, none {none['bleu']:.2f}"
    )
    assert report(7, passed, detail)


@pytest.mark.slow
def test_criterion_08_strategy_pairs(report, pair_sweep):
    rows = read_sweep_csv(pair_sweep / "sweep.csv")
    cells = [r for r in rows if r["label"] != "baseline"]
    base = next(r for r in rows if r["label"] == "baseline")
    below = [r["value"] for r in cells if r["margin_low"] < base["margin_low"]]
    svg = (pair_sweep / "sweep.svg").read_text()
    passed = len(cells) == 15 and not below and svg.count("<rect") >= 15
    worst = min(cells, key=lambda r: r["margin_low"])
    detail = f"{len(cells)} cells; baseline margin {base['margin_low']:.3f}; weakest cell {worst['value']} {worst['margin_low']:.3f}"
    if below:
        detail += f"; below baseline: {below}"
    assert report(8, passed, detail)


# ----------------------------------------------------------------------------
# 9-11


def test_criterion_09_word_repetition(report):
    rng = np.random.default_rng(0)
    x = rng.integers(4, 40, size=20_000)
    ratio = len(word_repetition(x, 1.0, rng)) / len(x)
    assert report(9, 1.95 <= ratio <= 2.05, f"{len(x)} tokens, mean copies per token {ratio:.4f}")


def test_criterion_10_bleu(report):
    ident = bleu([[4, 5, 6, 7, 8, 9]], [[4, 5, 6, 7, 8, 9]])
    short = bleu([["a", "b", "c", "d"]], [["a", "b", "c", "d", "e"]])
    passed = abs(ident - 100.0) < 0.01 and abs(short - 77.88) < 0.01
    assert report(10, passed, f"identity {ident:.4f}; 4-vs-5 tokens {short:.4f}")


def test_criterion_11_determinism(report, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({
        "data": {"n_examples": 60},
        "model": {"d_model": 16, "n_heads": 2, "n_enc_layers": 1, "n_dec_layers": 1, "ffn_dim": 32},
        "train": {"max_steps": 6, "batch_size": 8, "log_interval": 2, "checkpoint_interval": 3, "warmup_steps": 3,
                  "augment": [{"strategy": "original"}, {"strategy": "span_mask"}]},
        "decode": {"beam": 2, "max_len": 6},
    }))
    c = str(cfg)
    outputs = {}
    for rep in ("a", "b"):
        d = tmp_path / rep
        assert main(["gen", "--config", c, "--out", str(d / "corpus")]) == 0
        assert main(["train", "--config", c, "--corpus", str(d / "corpus"), "--out", str(d / "train")]) == 0
        assert main(["eval", "--checkpoint", str(d / "train" / "checkpoint_avg.json"), "--corpus", str(d / "corpus"), "--bleu-examples", "3", "--out", str(d / "eval")]) == 0
        assert main(["sweep", "--config", c, "--axis", "tau", "--values", "0.05,0.5", "--bleu-examples", "2", "--out", str(d / "sweep")]) == 0
        outputs[rep] = {
            p.relative_to(d).as_posix(): p.read_bytes()
            for p in sorted(d.rglob("*"))
            if p.suffix in (".csv", ".corpus") and p.is_file()
        }
    same = outputs["a"] == outputs["b"]
    assert report(11, same, f"{len(outputs['a'])} CSV/corpus files from gen, train, eval and sweep byte-identical across reruns: {same}")
