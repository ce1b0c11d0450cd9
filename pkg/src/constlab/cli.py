"""Command-line entry point: ``constlab {gen,train,eval,sweep}``.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import logging
import shutil
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

from .augment import SHORT_NAMES, STRATEGIES, AugmentSpec, parse_augment_list
from .data import Corpus, SyntheticLanguageSpec, generate_corpus, read_corpus, split_sizes, write_corpus
from .eval import DecodeConfig, corpus_bleu, gap_csv, gap_report, pca_csv, retrieval_csv, retrieve
from .nn import ConstModel, ModelConfig, load_checkpoint
from .plots import heatmap_svg, line_svg, scatter_svg, write_svg
from .train import TrainConfig, run_training

log = logging.getLogger("constlab")

CONFIG_VERSION = 1
SPLITS = ("train", "dev", "test")
SWEEP_AXES = ("tau", "lambda", "strategy-pairs", "contrast-level")
# Display order for the strategy heat map rows and columns.
PAIR_ORDER = ("original", "word_rep", "span_mask", "seq_cutoff", "feat_cutoff")


class UsageError(Exception):
    pass


def _strict(cls, d: dict, where: str):
    if not isinstance(d, dict):
        raise UsageError(f"{where} must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise UsageError(f"unknown keys in {where}: {sorted(unknown)}")
    return cls(**d)


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs/default"
    n_examples: int = 2000
    language: SyntheticLanguageSpec = field(default_factory=SyntheticLanguageSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)

    def to_dict(self) -> dict:
        return {
            "version": CONFIG_VERSION,
            "seed": self.seed,
            "out": self.out,
            "data": {"n_examples": self.n_examples, "language": asdict(self.language)},
            "model": asdict(self.model),
            "train": self.train.to_dict(),
            "decode": asdict(self.decode),
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        allowed = {"version", "seed", "out", "data", "model", "train", "decode"}
        unknown = set(d) - allowed
        if unknown:
            raise UsageError(f"unknown top-level config keys: {sorted(unknown)}")
        if d.get("version", CONFIG_VERSION) != CONFIG_VERSION:
            raise UsageError(f"unsupported config version {d.get('version')}")
        data = dict(d.get("data", {}))
        unknown = set(data) - {"n_examples", "language"}
        if unknown:
            raise UsageError(f"unknown keys in data: {sorted(unknown)}")
        base = cls()
        try:
            train_d = dict(d.get("train", {}))
            if "augment" in train_d:
                train_d["augment"] = [_strict(AugmentSpec, a, "train.augment[]") for a in train_d["augment"]]
            merged_train = {**base.train.to_dict(), **train_d}
            merged_train["augment"] = [a if isinstance(a, AugmentSpec) else AugmentSpec(**a) for a in merged_train["augment"]]
            return cls(
                seed=int(d.get("seed", base.seed)),
                out=str(d.get("out", base.out)),
                n_examples=int(data.get("n_examples", base.n_examples)),
                language=_strict(SyntheticLanguageSpec, {**asdict(base.language), **data.get("language", {})}, "data.language"),
                model=_strict(ModelConfig, {**asdict(base.model), **d.get("model", {})}, "model"),
                train=_strict(TrainConfig, merged_train, "train"),
                decode=_strict(DecodeConfig, {**asdict(base.decode), **d.get("decode", {})}, "decode"),
            )
        except (TypeError, ValueError) as exc:
            raise UsageError(f"invalid config: {exc}") from exc

    def check(self) -> None:
        if self.model.vocab_size != self.language.vocab_size:
            raise UsageError(f"model.vocab_size {self.model.vocab_size} != data.language.vocab_size {self.language.vocab_size}")
        if self.model.feature_dim != self.language.feature_dim:
            raise UsageError(f"model.feature_dim {self.model.feature_dim} != data.language.feature_dim {self.language.feature_dim}")


def load_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
    return RunConfig.from_dict(doc)


def apply_overrides(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    cfg = copy.deepcopy(cfg)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
        cfg.train = replace(cfg.train, seed=args.seed)
    if getattr(args, "out", None) is not None:
        cfg.out = args.out
    t = {}
    for flag, key in (("bridge", "bridge"), ("lam", "lam"), ("tau", "tau"), ("level", "level"), ("max_steps", "max_steps")):
        val = getattr(args, flag, None)
        if val is not None:
            t[key] = val
    if getattr(args, "augment", None):
        t["augment"] = parse_augment_list(args.augment)
    try:
        if t:
            cfg.train = replace(cfg.train, **t)
        d = {}
        if getattr(args, "beam", None) is not None:
            d["beam"] = args.beam
        if getattr(args, "alpha", None) is not None:
            d["alpha"] = args.alpha
        if d:
            cfg.decode = replace(cfg.decode, **d)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    cfg.check()
    return cfg


def prepare_out(out: Path, force: bool) -> None:
    if out.exists() and any(out.iterdir()):
        if not force:
            raise UsageError(f"output directory {out} is not empty (use --force)")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)


# ----------------------------------------------------------------------------
# corpus on disk


def write_corpus_dir(out: Path, corpus: Corpus, cfg: RunConfig) -> dict:
    spec = corpus.spec
    counts = {}
    for name in SPLITS:
        items = corpus.split(name)
        write_corpus(out / f"{name}.corpus", items, spec.vocab_size, spec.feature_dim)
        counts[name] = len(items)
    manifest = {
        "seed": cfg.seed,
        "n_examples": cfg.n_examples,
        "counts": counts,
        "language": asdict(spec),
        "files": {name: f"{name}.corpus" for name in SPLITS},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest


def read_corpus_dir(path: str | Path) -> Corpus:
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.is_file():
        raise FileNotFoundError(f"no corpus manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    spec = SyntheticLanguageSpec(**manifest["language"])
    splits = {}
    for name in SPLITS:
        header, items = read_corpus(path / manifest["files"][name])
        if items and (header["vocab_size"] != spec.vocab_size or header["feature_dim"] != spec.feature_dim):
            raise ValueError(f"{name} corpus header disagrees with the manifest")
        splits[name] = items
    return Corpus(spec, splits["train"], splits["dev"], splits["test"])


def _corpus_for(cfg: RunConfig, corpus_dir: str | None) -> Corpus:
    if corpus_dir is None:
        return generate_corpus(cfg.language, cfg.n_examples, cfg.seed)
    corpus = read_corpus_dir(corpus_dir)
    if corpus.spec.vocab_size != cfg.model.vocab_size or corpus.spec.feature_dim != cfg.model.feature_dim:
        raise UsageError("corpus vocabulary/feature width does not match the model config")
    return corpus


# ----------------------------------------------------------------------------
# commands


def cmd_gen(args) -> int:
    cfg = apply_overrides(load_config(args.config), args)
    out = Path(cfg.out)
    prepare_out(out, args.force)
    corpus = generate_corpus(cfg.language, cfg.n_examples, cfg.seed)
    manifest = write_corpus_dir(out, corpus, cfg)
    (out / "config.json").write_text(cfg.dumps(), encoding="utf-8")
    print(json.dumps(manifest["counts"], sort_keys=True))
    return 0


def _train_one(cfg: RunConfig, corpus: Corpus, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.dumps(), encoding="utf-8")
    return run_training(cfg.model, cfg.train, corpus, out)


def cmd_train(args) -> int:
    cfg = apply_overrides(load_config(args.config), args)
    if args.corpus is None:
        raise UsageError("train needs --corpus DIR (create one with `constlab gen`)")
    corpus = _corpus_for(cfg, args.corpus)
    out = Path(cfg.out)
    prepare_out(out, args.force)
    result = _train_one(cfg, corpus, out)
    final = result.log[-1] if result.log else {}
    summary = {"step": result.state.step}
    if final:
        summary.update({"dev_loss": final["dev_loss"], "dev_retrieval_acc": final["dev_retrieval_acc"]})
    print(json.dumps(summary, sort_keys=True))
    return 0


def evaluate_model(model: ConstModel, split, decode: DecodeConfig, bleu_examples: int | None = None) -> dict:
    reports = {lv: retrieve(model, split, lv) for lv in ("low", "high")}
    gaps = {lv: gap_report(model, split, lv) for lv in ("low", "high")}
    subset = split if bleu_examples is None else split[:bleu_examples]
    bleu_score = corpus_bleu(model, subset, decode, "st") if subset else None
    return {"retrieval": reports, "gap": gaps, "bleu": bleu_score}


def write_eval_outputs(out: Path, ev: dict, title: str = "") -> None:
    reports, gaps = ev["retrieval"], ev["gap"]
    (out / "retrieval.csv").write_text(retrieval_csv(list(reports.values())), encoding="utf-8")
    (out / "gap.csv").write_text(gap_csv(list(gaps.values())), encoding="utf-8")
    for lv, g in gaps.items():
        (out / f"pca_{lv}.csv").write_text(pca_csv(g), encoding="utf-8")
        svg = scatter_svg(
            {"speech": [tuple(p) for p in g.coords_speech], "text": [tuple(p) for p in g.coords_text]},
            f"{title}{lv}-level pooled representations (PCA)",
        )
        write_svg(out / f"pca_{lv}.svg", svg)
    summary = {
        "bleu": ev["bleu"],
        "retrieval": {lv: {"top1_accuracy": r.top1_accuracy, "margin": r.margin} for lv, r in reports.items()},
        "gap": {lv: {"paired_mean": g.paired_mean, "unpaired_mean": g.unpaired_mean, "margin": g.margin} for lv, g in gaps.items()},
    }
    (out / "report.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def cmd_eval(args) -> int:
    if not Path(args.checkpoint).is_file():
        raise FileNotFoundError(f"checkpoint {args.checkpoint} not found")
    params, ckpt_model, _ = load_checkpoint(args.checkpoint)
    cfg = load_config(args.config) if args.config else RunConfig(model=ckpt_model, language=replace(SyntheticLanguageSpec(), vocab_size=ckpt_model.vocab_size, feature_dim=ckpt_model.feature_dim))
    if args.config and cfg.model != ckpt_model:
        raise UsageError("model section of --config does not match the checkpoint's model config")
    cfg = apply_overrides(cfg, args)
    corpus = _corpus_for(cfg, args.corpus)
    split = corpus.split(args.split)
    out = Path(cfg.out)
    prepare_out(out, args.force)
    model = ConstModel(ckpt_model, params)
    ev = evaluate_model(model, split, cfg.decode, args.bleu_examples)
    write_eval_outputs(out, ev)
    (out / "config.json").write_text(cfg.dumps(), encoding="utf-8")
    print((out / "report.json").read_text(encoding="utf-8"), end="")
    return 0


# ----------------------------------------------------------------------------
# sweeps


@dataclass
class SweepRun:
    label: str
    value: str
    train: TrainConfig


def _parse_values(raw: Sequence[str] | None) -> list[str]:
    vals = []
    for chunk in raw or ():
        vals += [v.strip() for v in chunk.split(",") if v.strip()]
    return vals


def plan_sweep(cfg: RunConfig, axis: str, values: Sequence[str]) -> list[SweepRun]:
    base = cfg.train
    runs: list[SweepRun] = []
    if axis in ("tau", "lambda"):
        if len(values) < 2:
            raise UsageError(f"{axis} sweep needs at least 2 values")
        nums = [float(v) for v in values]
        if len(set(nums)) != len(nums):
            raise UsageError(f"duplicate {axis} values: {values}")
        for v in nums:
            tc = replace(base, tau=v, bridge="ctr") if axis == "tau" else replace(base, lam=v, bridge="ctr" if v > 0 else "none")
            runs.append(SweepRun(f"{axis}_{v:g}", repr(v), tc))
    elif axis == "contrast-level":
        if values:
            raise UsageError("contrast-level sweep has fixed rows; do not pass --values")
        runs.append(SweepRun("contrast_low", "low", replace(base, bridge="ctr", level="low")))
        runs.append(SweepRun("contrast_high", "high", replace(base, bridge="ctr", level="high")))
        runs.append(SweepRun("no_contrast", "none", replace(base, bridge="none", lam=0.0)))
    elif axis == "strategy-pairs":
        if values:
            raise UsageError("strategy-pairs sweep enumerates all 15 cells; do not pass --values")
        proto = base.augment[0] if base.augment else AugmentSpec()
        for i, a in enumerate(PAIR_ORDER):
            for j in range(i, len(PAIR_ORDER)):
                b = PAIR_ORDER[j]
                names = [a] if i == j else [a, b]
                specs = [replace(proto, strategy=n) for n in names]
                label = "+".join(SHORT_NAMES[n] for n in names)
                runs.append(SweepRun(f"cell_{i}{j}_{label}", label, replace(base, bridge="ctr", augment=specs)))
        runs.append(SweepRun("baseline", "baseline", replace(base, bridge="none", lam=0.0)))
    else:
        raise UsageError(f"unknown sweep axis {axis!r}")
    return runs


SWEEP_COLUMNS = (
    "label", "value", "bridge", "lam", "tau", "level", "augment", "final_dev_loss", "bleu",
    "r1_low", "r1_high", "margin_low", "margin_high",
)


def _execute_run(cfg: RunConfig, run: SweepRun, corpus: Corpus, out: Path, bleu_examples: int | None) -> dict:
    run_cfg = copy.deepcopy(cfg)
    run_cfg.train = run.train
    run_cfg.out = str(out / run.label)
    start = time.perf_counter()
    result = _train_one(run_cfg, corpus, out / run.label)
    train_seconds = time.perf_counter() - start
    ev = evaluate_model(result.state.model, corpus.test, run_cfg.decode, bleu_examples)
    write_eval_outputs(out / run.label, ev, f"{run.label}: ")
    # wall-clock lives outside the metrics CSVs so those stay byte-reproducible
    timing = {"train_seconds": train_seconds, "total_seconds": time.perf_counter() - start}
    (out / run.label / "timing.json").write_text(json.dumps(timing, indent=2) + "\n", encoding="utf-8")
    r, g = ev["retrieval"], ev["gap"]
    return {
        "label": run.label,
        "value": run.value,
        "bridge": run.train.bridge,
        "lam": run.train.lam,
        "tau": run.train.tau,
        "level": run.train.level,
        "augment": "+".join(a.strategy for a in run.train.augment),
        "final_dev_loss": result.log[-1]["dev_loss"] if result.log else float("nan"),
        "bleu": ev["bleu"] if ev["bleu"] is not None else float("nan"),
        "r1_low": r["low"].top1_accuracy,
        "r1_high": r["high"].top1_accuracy,
        "margin_low": g["low"].margin,
        "margin_high": g["high"].margin,
    }


def sweep_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for row in rows:
        w.writerow([repr(float(row[c])) if isinstance(row[c], float) else row[c] for c in SWEEP_COLUMNS])
    return buf.getvalue()


def read_sweep_csv(path: str | Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        for key in ("lam", "tau", "final_dev_loss", "bleu", "r1_low", "r1_high", "margin_low", "margin_high"):
            row[key] = float(row[key])
    return rows


def sweep_plot(axis: str, rows: Sequence[dict], level: str) -> str:
    if axis in ("tau", "lambda"):
        key = "tau" if axis == "tau" else "lam"
        series = {
            f"margin ({level})": [(r[key], r[f"margin_{level}"]) for r in rows],
            f"top-1 ({level})": [(r[key], r[f"r1_{level}"]) for r in rows],
        }
        return line_svg(series, f"{axis} sweep", axis, "metric", log_x=axis == "tau")
    if axis == "strategy-pairs":
        cells = {}
        for r in rows:
            if r["label"] == "baseline":
                continue
            i, j = int(r["label"][5]), int(r["label"][6])
            cells[(i, j)] = r[f"margin_{level}"]
        return heatmap_svg([SHORT_NAMES[n] for n in PAIR_ORDER], cells, f"retrieval margin ({level}) per strategy pair")
    series = {f"margin ({lv})": [(i, r[f"margin_{lv}"]) for i, r in enumerate(rows)] for lv in ("low", "high")}
    return line_svg(series, "contrast level: 0=low 1=high 2=none", "row", "margin")


def cmd_sweep(args) -> int:
    cfg = apply_overrides(load_config(args.config), args)
    values = _parse_values(args.values)
    runs = plan_sweep(cfg, args.axis, values)
    corpus = _corpus_for(cfg, args.corpus)
    out = Path(cfg.out)
    prepare_out(out, args.force)
    (out / "config.json").write_text(cfg.dumps(), encoding="utf-8")
    bleu_examples = args.bleu_examples
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            futures = [pool.submit(_execute_run, cfg, run, corpus, out, bleu_examples) for run in runs]
            rows = [f.result() for f in futures]
    else:
        rows = [_execute_run(cfg, run, corpus, out, bleu_examples) for run in runs]
    (out / "sweep.csv").write_text(sweep_csv(rows), encoding="utf-8")
    write_svg(out / "sweep.svg", sweep_plot(args.axis, rows, cfg.train.level))
    print(sweep_csv(rows), end="")
    return 0


# ----------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _common(p: argparse.ArgumentParser, train_flags: bool = True) -> None:
    p.add_argument("--config", help="run config JSON")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    if train_flags:
        p.add_argument("--bridge", choices=("ctr", "l2", "ctc", "none"))
        p.add_argument("--lambda", dest="lam", type=float)
        p.add_argument("--tau", type=float)
        p.add_argument("--level", choices=("low", "high"))
        p.add_argument("--augment", help="comma list, e.g. original,seq_cutoff")
        p.add_argument("--max-steps", dest="max_steps", type=int)
    p.add_argument("--beam", type=int)
    p.add_argument("--alpha", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="constlab", description="Cross-modal contrastive speech-translation lab")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen", help="generate a synthetic corpus")
    _common(p, train_flags=False)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train one model")
    _common(p)
    p.add_argument("--corpus", help="corpus directory written by `gen`")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _common(p, train_flags=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--split", choices=SPLITS, default="test")
    p.add_argument("--bleu-examples", dest="bleu_examples", type=int, help="decode only the first N examples")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="one training run per value along an axis")
    _common(p)
    p.add_argument("--axis", choices=SWEEP_AXES, required=True)
    p.add_argument("--values", nargs="*", help="values for tau/lambda axes (comma or space separated)")
    p.add_argument("--corpus", help="corpus directory; generated from the config when omitted")
    p.add_argument("--jobs", type=int, default=1, help="parallel runs (each its own process)")
    p.add_argument("--bleu-examples", dest="bleu_examples", type=int, help="decode only the first N test examples")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            raise UsageError("a command is required: gen, train, eval or sweep")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except UsageError as exc:
        print(f"constlab: usage error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, FloatingPointError, RuntimeError, KeyError) as exc:
        print(f"constlab: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
