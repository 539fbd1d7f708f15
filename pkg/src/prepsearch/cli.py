"""Experiment runner.

`run` executes one method on one dataset (CSV file or synthetic spec) and
writes line-delimited metrics plus a summary. `compare` executes several
methods on the same data and split and emits a comparison table.

Determinism contract: metrics.jsonl and pipeline.json depend only on the
configuration and seed (timing lives in timing.jsonl and summary.json, which
are excluded from byte-level reproducibility). Exit codes: 0 success,
2 invalid configuration, 3 diverged run.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, fields
from pathlib import Path

from .baselines import PlainResult, random_search, run_default
from .data import (
    DEFAULT_MISSING_TOKENS,
    FeatureMatrix,
    SplitSpec,
    encode,
    load_csv,
    split,
)
from .operators import CatalogConfig, build_catalog
from .pipeline import PipelineContext
from .search import (
    SearchConfig,
    SearchDiverged,
    SearchResult,
    export_pipelines,
    run_search,
)
from .synth import SynthSpec, generate
from .util import json_line, pyify

METHODS = ("diffprep-fix", "diffprep-flex", "default", "random-search")
SCHEMA_METRICS = "prepsearch.metrics/1"
SCHEMA_TIMING = "prepsearch.timing/1"
SCHEMA_SUMMARY = "prepsearch.summary/1"
SCHEMA_PIPELINE = "prepsearch.pipeline/1"
SCHEMA_COMPARE = "prepsearch.compare/1"


@dataclass
class RunConfig:
    data: str | None = None
    synth: str | None = None
    target: str | None = None
    method: str = "diffprep-fix"
    train_frac: float = 0.6
    val_frac: float = 0.2
    test_frac: float = 0.2
    seed: int = 0
    epochs: int = 1000
    batch_size: int = 512
    model: str = "logreg"
    lr1: float = 0.05
    lr2: float = 0.1
    trials: int = 20
    out: str = "runs/out"
    operators: str | None = None  # catalog config file
    ablation: str | None = None
    search_onehot: bool = False  # let one-hot columns join the later stages
    missing_tokens: tuple[str, ...] = DEFAULT_MISSING_TOKENS

    def validate(self) -> None:
        if (self.data is None) == (self.synth is None):
            raise ValueError("exactly one data source required: --data or --synth")
        if self.data is not None and self.target is None:
            raise ValueError("--target is required with --data")
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if self.trials < 1:
            raise ValueError("--trials must be at least 1")
        if self.method != "random-search" and self.trials != 20:
            raise ValueError("--trials only applies to random-search")
        if self.ablation is not None and not self.method.startswith("diffprep"):
            raise ValueError("--ablation only applies to diffprep methods")
        if self.model not in ("logreg", "mlp"):
            raise ValueError("model must be logreg or mlp")

    def search_config(self) -> SearchConfig:
        return SearchConfig(
            mode="flex" if self.method == "diffprep-flex" else "fix",
            ablation=self.ablation,
            model=self.model,
            lr_pipeline=self.lr1,
            lr_model=self.lr2,
            epochs=self.epochs,
            batch_size=self.batch_size,
            seed=self.seed,
            search_onehot=self.search_onehot,
        )

    def split_spec(self) -> SplitSpec:
        return SplitSpec(self.train_frac, self.val_frac, self.test_frac, self.seed)


def parse_synth_spec(text: str) -> SynthSpec:
    """Comma-separated key=value pairs, e.g.
    n=2000,d=10,k=2,sep=2.0,missing=0.2,scale0=1000,seed=0"""
    kwargs: dict = {}
    scales: dict[int, float] = {}
    for part in text.split(","):
        if not part.strip():
            continue
        key, _, value = part.partition("=")
        key = key.strip()
        value = value.strip()
        if key.startswith("scale"):
            scales[int(key[len("scale") :])] = float(value)
        elif key in ("n", "d", "k", "seed"):
            name = {"n": "n_rows", "d": "n_features", "k": "n_classes", "seed": "seed"}[key]
            kwargs[name] = int(value)
        elif key in ("sep", "missing", "outliers", "magnitude"):
            name = {
                "sep": "class_sep",
                "missing": "missing_rate",
                "outliers": "outlier_rate",
                "magnitude": "outlier_magnitude",
            }[key]
            kwargs[name] = float(value)
        else:
            raise ValueError(f"unknown synth key {key!r}")
    if scales:
        width = max(scales) + 1
        kwargs["scale_multipliers"] = tuple(scales.get(i, 1.0) for i in range(width))
    return SynthSpec(**kwargs)


def load_splits(config: RunConfig) -> tuple[FeatureMatrix, FeatureMatrix, FeatureMatrix, object]:
    if config.synth is not None:
        table, _ = generate(parse_synth_spec(config.synth))
    else:
        table = load_csv(config.data, config.target, missing_tokens=config.missing_tokens)
    tr, va, te = split(table, config.split_spec())
    return encode(tr, va, te)


def _epoch_records(epochs) -> list[dict]:
    return [
        {
            "schema": SCHEMA_METRICS,
            "epoch": e.epoch,
            "train_loss": e.train_loss,
            "val_loss": e.val_loss,
            "val_acc": e.val_acc,
            "fit_passes": e.fit_passes,
            "forward_passes": e.forward_passes,
            "backward_passes": e.backward_passes,
        }
        for e in epochs
    ]


def _timing_records(epochs) -> list[dict]:
    return [{"schema": SCHEMA_TIMING, "epoch": e.epoch, "wall_ms": e.wall_ms} for e in epochs]


def execute_method(config: RunConfig, fm_tr, fm_va, fm_te) -> dict:
    """Dispatch one method; returns records ready for writing."""
    catalog = build_catalog(
        CatalogConfig.from_json_file(config.operators) if config.operators else None
    )
    sc = config.search_config()
    out: dict = {"summary": {"schema": SCHEMA_SUMMARY, "method": config.method, "seed": config.seed}}
    if config.method == "default":
        res = run_default(sc, fm_tr, fm_va, fm_te)
        out["metrics"] = _epoch_records(res.epochs)
        out["timing"] = _timing_records(res.epochs)
        out["summary"].update(_plain_summary(res))
    elif config.method == "random-search":
        res = random_search(sc, fm_tr, fm_va, fm_te, config.trials, catalog)
        best = res.best
        out["metrics"] = _epoch_records(best.result.epochs)
        out["timing"] = _timing_records(best.result.epochs)
        out["summary"].update(_plain_summary(best.result))
        out["summary"]["trials"] = [
            {"index": t.index, "pipeline": t.labels, "val_acc": t.val_acc, "test_acc": t.test_acc}
            for t in res.trials
        ]
        out["summary"]["best_trial"] = best.index
        out["summary"]["wall_ms"] = res.wall_ms
    else:
        res = run_search(sc, fm_tr, fm_va, fm_te, catalog)
        out["metrics"] = _epoch_records(res.epochs)
        out["timing"] = _timing_records(res.epochs)
        out["summary"].update(
            {
                "best_epoch": res.best_epoch,
                "best_val_loss": res.best_val_loss,
                "val_acc": res.best_val_acc,
                "test_loss": res.test_loss,
                "test_acc": res.test_acc,
                "epochs": len(res.epochs),
                "iterations": res.n_iterations,
                "d3_skips": res.d3_skips,
                "wall_ms": res.wall_ms,
                **res.counts.as_dict(),
            }
        )
        ctx = PipelineContext.for_matrix(res.plan, fm_tr)
        out["pipeline"] = {
            "schema": SCHEMA_PIPELINE,
            **export_pipelines(res, ctx, sc),
            "raw_params": {
                "impute_logits": res.best_params.impute_logits,
                "stage_logits": res.best_params.stage_logits,
                "group_logits": res.best_params.group_logits,
                "order_potentials": res.best_params.order_potentials,
            },
        }
    return out


def _plain_summary(res: PlainResult) -> dict:
    return {
        "best_epoch": res.best_epoch,
        "best_val_loss": res.best_val_loss,
        "val_acc": res.best_val_acc,
        "test_loss": res.test_loss,
        "test_acc": res.test_acc,
        "epochs": len(res.epochs),
        "iterations": res.n_iterations,
        "wall_ms": res.wall_ms,
        **res.counts.as_dict(),
    }


def write_outputs(config: RunConfig, result: dict, encoder) -> None:
    out_dir = Path(config.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg_record = {"schema": "prepsearch.config/1"}
    cfg_record.update({f.name: getattr(config, f.name) for f in fields(RunConfig)})
    cfg_record["missing_tokens"] = list(config.missing_tokens)
    (out_dir / "config.json").write_text(json.dumps(pyify(cfg_record), indent=2))
    with open(out_dir / "metrics.jsonl", "w", encoding="utf-8") as fh:
        for rec in result["metrics"]:
            fh.write(json_line(rec))
    with open(out_dir / "timing.jsonl", "w", encoding="utf-8") as fh:
        for rec in result["timing"]:
            fh.write(json_line(rec))
    (out_dir / "summary.json").write_text(json.dumps(pyify(result["summary"]), indent=2))
    if "pipeline" in result:
        (out_dir / "pipeline.json").write_text(json.dumps(pyify(result["pipeline"]), indent=2))
    if encoder is not None:
        (out_dir / "encoder.json").write_text(encoder.to_json())


def run(config: RunConfig) -> int:
    try:
        config.validate()
    except ValueError as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return 2
    try:
        fm_tr, fm_va, fm_te, encoder = load_splits(config)
        result = execute_method(config, fm_tr, fm_va, fm_te)
    except SearchDiverged as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return 3
    except (ValueError, OSError) as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return 2
    write_outputs(config, result, encoder)
    s = result["summary"]
    print(
        f"{config.method}: val_acc={s['val_acc']:.4f} test_acc={s['test_acc']:.4f} "
        f"best_epoch={s['best_epoch']} wall={s['wall_ms'] / 1000.0:.1f}s -> {config.out}"
    )
    return 0


def compare(base: RunConfig, methods: list[str]) -> int:
    """Run several methods on identical data and splits; report accuracy,
    wall-clock and slowdown relative to the default method."""
    if len(methods) < 2:
        print("compare needs at least two methods", file=sys.stderr)
        return 2
    rows = []
    for method in methods:
        cfg = RunConfig(**{f.name: getattr(base, f.name) for f in fields(RunConfig)})
        cfg.method = method
        cfg.ablation = base.ablation if method.startswith("diffprep") else None
        cfg.trials = base.trials if method == "random-search" else 20
        cfg.out = str(Path(base.out) / method)
        code = run(cfg)
        if code != 0:
            return code
        summary = json.loads((Path(cfg.out) / "summary.json").read_text())
        rows.append(summary)
    default_wall = next((r["wall_ms"] for r in rows if r["method"] == "default"), None)
    table = []
    for r in rows:
        table.append(
            {
                "method": r["method"],
                "val_acc": r["val_acc"],
                "test_acc": r["test_acc"],
                "wall_ms": r["wall_ms"],
                "slowdown_vs_default": (r["wall_ms"] / default_wall) if default_wall else None,
            }
        )
    doc = {"schema": SCHEMA_COMPARE, "rows": table}
    out_dir = Path(base.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "compare.json").write_text(json.dumps(pyify(doc), indent=2))
    header = f"{'method':<16} {'val_acc':>8} {'test_acc':>9} {'wall_s':>8} {'slowdown':>9}"
    print(header)
    for r in table:
        slow = f"{r['slowdown_vs_default']:.1f}x" if r["slowdown_vs_default"] else "-"
        print(
            f"{r['method']:<16} {r['val_acc']:>8.4f} {r['test_acc']:>9.4f} "
            f"{r['wall_ms'] / 1000.0:>8.1f} {slow:>9}"
        )
    return 0


def _add_common_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", help="CSV file with a header row")
    p.add_argument("--synth", help="synthetic spec, e.g. n=2000,d=10,k=2,sep=2,missing=0.2")
    p.add_argument("--target", help="label column name (CSV input)")
    p.add_argument("--split", help="train,val,test fractions, e.g. 0.6,0.2,0.2")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--model", choices=("logreg", "mlp"))
    p.add_argument("--lr1", type=float, help="pipeline-parameter learning rate (Adam)")
    p.add_argument("--lr2", type=float, help="model learning rate (SGD)")
    p.add_argument("--trials", type=int, help="random-search trials")
    p.add_argument("--out", help="output directory")
    p.add_argument("--operators", help="operator catalog config file (JSON)")
    p.add_argument("--ablation", choices=("no-feature-wise", "train-only"))
    p.add_argument("--missing-tokens", dest="missing_tokens", help="comma-separated missing markers")
    p.add_argument("--config", help="JSON config file mirroring the flags; flags override it")


def _build_config(args: argparse.Namespace) -> RunConfig:
    values: dict = {}
    if args.config:
        values.update(json.loads(Path(args.config).read_text()))
        values.pop("schema", None)  # emitted config.json files round-trip
    for name in (
        "data",
        "synth",
        "target",
        "seed",
        "epochs",
        "batch_size",
        "model",
        "lr1",
        "lr2",
        "trials",
        "out",
        "operators",
        "ablation",
    ):
        v = getattr(args, name, None)
        if v is not None:
            values[name] = v
    if getattr(args, "method", None):
        values["method"] = args.method
    if getattr(args, "split", None):
        parts = [float(x) for x in args.split.split(",")]
        if len(parts) != 3:
            raise ValueError("--split needs three comma-separated fractions")
        values["train_frac"], values["val_frac"], values["test_frac"] = parts
    if getattr(args, "missing_tokens", None) is not None:
        values["missing_tokens"] = tuple(args.missing_tokens.split(","))
    known = {f.name for f in fields(RunConfig)}
    unknown = set(values) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    if "missing_tokens" in values:
        values["missing_tokens"] = tuple(values["missing_tokens"])
    return RunConfig(**values)


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="prepsearch", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run one method")
    p_run.add_argument("--method", choices=METHODS)
    _add_common_flags(p_run)
    p_cmp = sub.add_parser("compare", help="run several methods on shared data")
    p_cmp.add_argument("--methods", required=True, help="comma-separated method list")
    _add_common_flags(p_cmp)
    args = parser.parse_args(argv)
    try:
        config = _build_config(args)
    except (ValueError, OSError, json.JSONDecodeError) as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return 2
    if args.command == "run":
        return run(config)
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    for m in methods:
        if m not in METHODS:
            print(f"invalid configuration: unknown method {m!r}", file=sys.stderr)
            return 2
    return compare(config, methods)


if __name__ == "__main__":
    sys.exit(main())
