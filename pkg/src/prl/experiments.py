"""Experiment harness: paired model comparisons across seeds, trace
ablations, dataset-size sweeps, and the oracle accuracy-vs-perplexity
curve.

Every matrix cell trains one (variant, seed) pair on the same corpus and
evaluates the best checkpoint on the validation split. Aggregates report
mean +/- standard error over seeds; a variant "beats" the baseline when
its mean validation PPL is lower and the gap exceeds the sum of the two
standard errors over at least 3 seeds. Cells can run in parallel worker
processes; a failed cell is recorded, not fatal.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from .corpus import TaggedCorpus, truncate_corpus
from .errors import ValidationError
from .evaluation import EvalReport, evaluate_model, mean_stderr
from .model import ModelConfig, init_model
from .training import TrainConfig, TrainLog, train

__all__ = [
    "VariantSpec",
    "CellResult",
    "AggregateRow",
    "ExperimentMatrix",
    "run_comparison",
    "dataset_size_sweep",
    "oracle_curve",
    "OracleCurveResult",
    "epochs_to_reach",
    "DEFAULT_VARIANTS",
]


@dataclass(frozen=True)
class VariantSpec:
    """One model variant of the comparison; fields override the base config."""

    name: str
    head_kind: str = "q"
    use_trace: bool = True
    oracle_mode: bool = False
    aux_hidden: int | None = None

    def apply(self, base: ModelConfig) -> ModelConfig:
        cfg = replace(
            base,
            head_kind=self.head_kind,
            use_trace=self.use_trace if self.head_kind != "none" else True,
            oracle_mode=self.oracle_mode,
        )
        if self.aux_hidden is not None:
            cfg = replace(cfg, aux_hidden=self.aux_hidden)
        return cfg


DEFAULT_VARIANTS = (
    VariantSpec(name="baseline", head_kind="none"),
    VariantSpec(name="prl-p", head_kind="p"),
    VariantSpec(name="prl-q", head_kind="q"),
)


@dataclass
class CellResult:
    variant: str
    seed: int
    status: str  # "ok" or "failed"
    error: str | None = None
    report: EvalReport | None = None
    train_log: TrainLog | None = None

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "seed": self.seed,
            "status": self.status,
            "error": self.error,
            "report": self.report.to_dict() if self.report else None,
            "train_log": self.train_log.to_json_dict() if self.train_log else None,
        }


@dataclass
class AggregateRow:
    variant: str
    n_seeds: int
    ppl_mean: float
    ppl_stderr: float | None
    acc_mean: float | None
    acc_stderr: float | None
    delta_ppl: float | None = None  # baseline mean - variant mean (positive = better)
    percent_change: float | None = None  # 100 * delta / baseline mean
    beats_baseline: bool | None = None

    CSV_FIELDS = (
        "variant",
        "n_seeds",
        "ppl_mean",
        "ppl_stderr",
        "acc_mean",
        "acc_stderr",
        "delta_ppl",
        "percent_change",
        "beats_baseline",
    )

    def to_dict(self) -> dict:
        return {f: getattr(self, f) for f in self.CSV_FIELDS}


@dataclass
class ExperimentMatrix:
    kind: str
    cells: list[CellResult] = field(default_factory=list)
    aggregates: list[AggregateRow] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def all_failed(self) -> bool:
        return bool(self.cells) and all(c.status != "ok" for c in self.cells)

    def completed(self, variant: str) -> list[CellResult]:
        return [c for c in self.cells if c.variant == variant and c.status == "ok"]

    def to_json(self, path) -> None:
        doc = {
            "kind": self.kind,
            "meta": self.meta,
            "aggregates": [a.to_dict() for a in self.aggregates],
            "cells": [c.to_dict() for c in self.cells],
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=1)
            fh.write("\n")

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(",".join(AggregateRow.CSV_FIELDS) + "\n")
            for a in self.aggregates:
                fh.write(
                    ",".join("" if v is None else str(v) for v in
                             (getattr(a, f) for f in AggregateRow.CSV_FIELDS))
                    + "\n"
                )


def _run_cell(args) -> CellResult:
    (variant, seed, train_corpus, valid_corpus, base_model, train_config, out_dir) = args
    try:
        cfg = variant.apply(base_model)
        model = init_model(cfg, train_corpus.vocab, train_corpus.tags, seed=seed)
        config = replace(train_config, seed=seed)
        log = train(model, train_corpus, config, valid_corpus=valid_corpus)
        report = evaluate_model(
            model,
            valid_corpus,
            gamma_trace=config.gamma_trace,
            trace_mode=config.eval_trace_mode,
            batch_size=config.eval_batch_size,
            bptt_len=config.bptt_len,
        )
        report.model_id = variant.name
        report.split = "valid"
        report.seed = seed
        if out_dir is not None:
            cell_dir = Path(out_dir) / f"{variant.name}-s{seed}"
            cell_dir.mkdir(parents=True, exist_ok=True)
            log.to_csv(cell_dir / "trainlog.csv")
            with open(cell_dir / "trainlog.json", "w", encoding="utf-8") as fh:
                json.dump(log.to_json_dict(), fh, indent=1)
            report.to_json(cell_dir / "eval.json")
        return CellResult(variant.name, seed, "ok", report=report, train_log=log)
    except Exception as exc:  # failed cells are data, not crashes
        return CellResult(variant.name, seed, "failed", error=f"{type(exc).__name__}: {exc}")


def _execute_cells(cell_args, jobs: int) -> list[CellResult]:
    if jobs <= 1 or len(cell_args) <= 1:
        return [_run_cell(a) for a in cell_args]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_cell, cell_args))


def _aggregate(matrix: ExperimentMatrix, variants, baseline_name: str | None) -> None:
    rows = {}
    for v in variants:
        done = matrix.completed(v.name)
        if not done:
            continue
        ppl_mean, ppl_se = mean_stderr([c.report.ppl for c in done])
        accs = [c.report.tag_accuracy for c in done if c.report.tag_accuracy is not None]
        acc_mean, acc_se = mean_stderr(accs) if accs else (None, None)
        rows[v.name] = AggregateRow(
            variant=v.name,
            n_seeds=len(done),
            ppl_mean=ppl_mean,
            ppl_stderr=ppl_se,
            acc_mean=acc_mean,
            acc_stderr=acc_se,
        )
    base = rows.get(baseline_name) if baseline_name else None
    for name, row in rows.items():
        if base is not None and name != base.variant:
            row.delta_ppl = base.ppl_mean - row.ppl_mean
            row.percent_change = 100.0 * row.delta_ppl / base.ppl_mean
            if row.n_seeds >= 3 and base.n_seeds >= 3 and row.ppl_stderr is not None:
                row.beats_baseline = (
                    row.ppl_mean < base.ppl_mean
                    and row.delta_ppl > row.ppl_stderr + base.ppl_stderr
                )
    matrix.aggregates = list(rows.values())


def run_comparison(
    train_corpus: TaggedCorpus,
    valid_corpus: TaggedCorpus,
    variants,
    seeds,
    base_model: ModelConfig,
    train_config: TrainConfig,
    out_dir=None,
    jobs: int = 1,
    baseline_name: str | None = "baseline",
) -> ExperimentMatrix:
    """Train every variant on every seed and aggregate validation metrics."""
    seeds = list(seeds)
    if len(seeds) < 2:
        raise ValidationError("run_comparison needs at least 2 seeds for standard errors")
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    cell_args = [
        (v, s, train_corpus, valid_corpus, base_model, train_config, out_dir)
        for v in variants
        for s in seeds
    ]
    matrix = ExperimentMatrix(kind="comparison")
    matrix.cells = _execute_cells(cell_args, jobs)
    names = {v.name for v in variants}
    _aggregate(matrix, variants, baseline_name if baseline_name in names else None)
    matrix.meta = {
        "seeds": seeds,
        "variants": [v.name for v in variants],
        "model": base_model.to_dict(),
        "train": train_config.to_dict(),
    }
    if out_dir is not None:
        matrix.to_json(Path(out_dir) / "matrix.json")
        matrix.to_csv(Path(out_dir) / "matrix.csv")
    return matrix


def epochs_to_reach(log: TrainLog, target_ppl: float) -> int | None:
    """First epoch whose validation PPL is <= target; None if never."""
    for r in log.records:
        if r.valid_ppl <= target_ppl:
            return r.epoch
    return None


def dataset_size_sweep(
    train_corpus: TaggedCorpus,
    valid_corpus: TaggedCorpus,
    sizes,
    variants,
    seeds,
    base_model: ModelConfig,
    train_config: TrainConfig,
    out_dir=None,
    jobs: int = 1,
) -> ExperimentMatrix:
    """Comparison per training-stream truncation size; validation fixed.

    percent_change per size follows the positive-is-better convention:
    100 * (baseline - variant) / baseline.
    """
    total = sum(t.size for t, _ in train_corpus.sentences)
    for size in sizes:
        if size > total:
            raise ValidationError(f"sweep size {size} exceeds corpus ({total} word tokens)")
    matrix = ExperimentMatrix(kind="size-sweep")
    per_size_aggs = []
    for size in sizes:
        sub = truncate_corpus(train_corpus, size)
        sub_dir = None if out_dir is None else Path(out_dir) / f"size-{size}"
        sub_matrix = run_comparison(
            sub, valid_corpus, variants, seeds, base_model, train_config,
            out_dir=sub_dir, jobs=jobs,
        )
        for cell in sub_matrix.cells:
            cell.variant = f"{cell.variant}@{size}"
        matrix.cells.extend(sub_matrix.cells)
        for agg in sub_matrix.aggregates:
            agg.variant = f"{agg.variant}@{size}"
            per_size_aggs.append(agg)
    matrix.aggregates = per_size_aggs
    matrix.meta = {"sizes": list(sizes), "seeds": list(seeds)}
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        matrix.to_json(Path(out_dir) / "matrix.json")
        matrix.to_csv(Path(out_dir) / "matrix.csv")
    return matrix


@dataclass
class OracleCurveResult:
    """(aux size, seed) -> accuracy/PPL points plus per-seed monotonicity."""

    points: list[dict] = field(default_factory=list)  # aux_hidden, seed, oracle, acc, ppl
    spearman_by_seed: dict[int, float] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def to_json(self, path) -> None:
        doc = {
            "points": self.points,
            "spearman_by_seed": {str(k): v for k, v in self.spearman_by_seed.items()},
            "meta": self.meta,
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=1)
            fh.write("\n")

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("aux_hidden,seed,oracle,tag_accuracy,ppl\n")
            for p in self.points:
                fh.write(
                    f"{p['aux_hidden']},{p['seed']},{int(p['oracle'])},"
                    f"{p['tag_accuracy']},{p['ppl']}\n"
                )


def oracle_curve(
    train_corpus: TaggedCorpus,
    valid_corpus: TaggedCorpus,
    aux_sizes,
    seeds,
    base_model: ModelConfig,
    train_config: TrainConfig,
    head_kind: str = "q",
    include_non_oracle: bool = True,
    out_dir=None,
    jobs: int = 1,
) -> OracleCurveResult:
    """Short oracle-mode runs across auxiliary hidden sizes.

    Reports one (tag accuracy, PPL) point per size per seed and the
    Spearman correlation between them per seed (negative = higher tag
    accuracy comes with lower perplexity). Optionally adds a non-oracle
    companion at the largest size for the oracle-advantage check.
    """
    aux_sizes = sorted(aux_sizes)
    if len(aux_sizes) < 3:
        raise ValidationError("oracle_curve needs at least 3 auxiliary sizes")
    variants = [
        VariantSpec(name=f"oracle-{h}", head_kind=head_kind, oracle_mode=True, aux_hidden=h)
        for h in aux_sizes
    ]
    if include_non_oracle:
        variants.append(
            VariantSpec(name=f"plain-{aux_sizes[-1]}", head_kind=head_kind, aux_hidden=aux_sizes[-1])
        )
    cell_args = [
        (v, s, train_corpus, valid_corpus, base_model, train_config,
         None if out_dir is None else Path(out_dir) / "cells")
        for v in variants
        for s in seeds
    ]
    cells = _execute_cells(cell_args, jobs)
    result = OracleCurveResult()
    for cell, (v, s, *_rest) in zip(cells, cell_args):
        if cell.status != "ok":
            result.points.append(
                {"aux_hidden": v.aux_hidden, "seed": s, "oracle": v.oracle_mode,
                 "tag_accuracy": None, "ppl": None, "error": cell.error}
            )
            continue
        result.points.append(
            {
                "aux_hidden": v.aux_hidden,
                "seed": s,
                "oracle": v.oracle_mode,
                "tag_accuracy": cell.report.tag_accuracy,
                "ppl": cell.report.ppl,
            }
        )
    for s in seeds:
        pts = [
            p for p in result.points
            if p["seed"] == s and p["oracle"] and p["tag_accuracy"] is not None
        ]
        if len(pts) >= 3:
            rho = spearmanr([p["tag_accuracy"] for p in pts], [p["ppl"] for p in pts]).statistic
            result.spearman_by_seed[s] = float(rho)
    result.meta = {
        "aux_sizes": aux_sizes,
        "seeds": list(seeds),
        "head_kind": head_kind,
        "epochs": train_config.epochs,
    }
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        result.to_json(Path(out_dir) / "oracle_curve.json")
        result.to_csv(Path(out_dir) / "oracle_curve.csv")
    return result
