"""Command-line entry point: corpus generation, training, evaluation, and
the experiment harness.

Subcommands: gen-corpus, train, eval, experiment. Exit codes: 0 success,
2 usage/config error, 3 data error, 4 numeric divergence. The output
root defaults to ./runs and can be overridden by --out-dir or the
PRL_RUN_DIR environment variable. Flags override config-file values; the
run manifest records the fully resolved result.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields as dc_fields
from pathlib import Path

from .corpus import HmmSpec, generate_hmm_corpus, load_conll, save_conll, split_corpus
from .errors import (
    ContractError,
    InputError,
    NumericError,
    ParseError,
    PrlError,
    SchemaError,
    TrainingDiverged,
    ValidationError,
)
from .evaluation import evaluate_model
from .experiments import (
    DEFAULT_VARIANTS,
    VariantSpec,
    dataset_size_sweep,
    oracle_curve,
    run_comparison,
)
from .model import ModelConfig, init_model, load_checkpoint, save_checkpoint
from .runs import RunManifest, file_checksum, resolve_run_root, run_dir_name
from .training import TrainConfig, train

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4

_MODEL_KEYS = {
    "d_embed",
    "lm_hidden",
    "aux_hidden",
    "head_kind",
    "use_trace",
    "oracle_mode",
    "tie_weights",
}
_TRAIN_KEYS = {f.name for f in dc_fields(TrainConfig)}


def _load_json(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise InputError(f"file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: invalid JSON ({exc})") from None


# ---------------------------------------------------------------------------
# gen-corpus
# ---------------------------------------------------------------------------


def cmd_gen_corpus(args) -> int:
    spec = HmmSpec.from_json(args.spec)
    corpus, report = generate_hmm_corpus(spec)
    save_conll(corpus, args.out)
    report_path = args.report or (str(args.out) + ".floors.json")
    with open(report_path, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=1)
        fh.write("\n")
    print(
        f"wrote {corpus.num_tokens - 1} word tokens to {args.out}; "
        f"tag-oracle PPL {report.tag_oracle_ppl:.4f}, filter PPL {report.filter_ppl:.4f}"
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def _resolve_train_setup(args) -> tuple[dict, dict, dict]:
    """Merge config file and CLI flags into (data, model, train) dicts."""
    doc = _load_json(args.config) if args.config else {}
    data = dict(doc.get("data", {}))
    model = dict(doc.get("model", {}))
    train_cfg = dict(doc.get("train", {}))
    for key in model:
        if key not in _MODEL_KEYS:
            raise SchemaError(f"unknown model config key {key!r}")
    for key in train_cfg:
        if key not in _TRAIN_KEYS:
            raise SchemaError(f"unknown train config key {key!r}")

    if args.corpus:
        data["corpus"] = args.corpus
    if args.valid_corpus:
        data["valid_corpus"] = args.valid_corpus
    if args.head is not None:
        model["head_kind"] = args.head
    if args.no_trace:
        model["use_trace"] = False
    if args.oracle:
        model["oracle_mode"] = True
    if args.tie_weights:
        model["tie_weights"] = True
    for flag, key in (
        ("d_embed", "d_embed"),
        ("aux_hidden", "aux_hidden"),
        ("lm_hidden", "lm_hidden"),
    ):
        val = getattr(args, flag)
        if val is not None:
            model[key] = val
    for flag, key in (
        ("lr", "lr"),
        ("gamma_q", "gamma_q"),
        ("gamma_trace", "gamma_trace"),
        ("epochs", "epochs"),
        ("seed", "seed"),
        ("batch_size", "batch_size"),
        ("bptt", "bptt_len"),
        ("dropout", "dropout"),
        ("clip", "clip_norm"),
        ("ratio", "alternation_ratio"),
        ("trace_mode", "eval_trace_mode"),
        ("eval_batch_size", "eval_batch_size"),
    ):
        val = getattr(args, flag)
        if val is not None:
            train_cfg[key] = val
    if "corpus" not in data:
        raise ValidationError("no corpus given (config data.corpus or --corpus)")
    return data, model, train_cfg


def cmd_train(args) -> int:
    data, model_doc, train_doc = _resolve_train_setup(args)
    corpus = load_conll(data["corpus"])
    if data.get("valid_corpus"):
        valid = load_conll(data["valid_corpus"], vocab=corpus.vocab, tags=corpus.tags)
    else:
        n_words = sum(t.size for t, _ in corpus.sentences)
        frac = float(data.get("valid_fraction", 0.1))
        corpus, valid = split_corpus(corpus, max(1, int(n_words * frac)))
    if "lm_hidden" in model_doc:
        model_doc["lm_hidden"] = tuple(model_doc["lm_hidden"])
    config = ModelConfig(vocab_size=len(corpus.vocab), tag_size=len(corpus.tags), **model_doc)
    train_config = TrainConfig(**train_doc)

    resolved = {"data": data, "model": config.to_dict(), "train": train_config.to_dict()}
    root = resolve_run_root(args.out_dir)
    run_dir = root / run_dir_name(resolved, train_config.seed)
    run_dir.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(
        config=resolved,
        seed=train_config.seed,
        corpus_checksum=file_checksum(data["corpus"]),
        valid_corpus_checksum=(
            file_checksum(data["valid_corpus"]) if data.get("valid_corpus") else None
        ),
    )
    manifest.write(run_dir / "manifest.json")

    model = init_model(config, corpus.vocab, corpus.tags, seed=train_config.seed)
    try:
        log = train(model, corpus, train_config, valid_corpus=valid)
    except TrainingDiverged as exc:
        partial = getattr(exc, "log", None)
        if partial is not None:
            partial.to_csv(run_dir / "trainlog.csv")
            with open(run_dir / "trainlog.json", "w", encoding="utf-8") as fh:
                json.dump(partial.to_json_dict(), fh, indent=1)
        print(f"training diverged: {exc}", file=sys.stderr)
        print(f"partial logs in {run_dir}", file=sys.stderr)
        return EXIT_DIVERGED
    log.to_csv(run_dir / "trainlog.csv")
    with open(run_dir / "trainlog.json", "w", encoding="utf-8") as fh:
        json.dump(log.to_json_dict(), fh, indent=1)
    save_checkpoint(
        model,
        run_dir / "best.prl",
        extra={"train": train_config.to_dict(), "best_epoch": log.best_epoch},
    )
    import time

    manifest.finished_at = time.time()
    manifest.write(run_dir / "manifest.json")
    best = log.records[log.best_epoch - 1]
    print(
        f"run {run_dir}: best epoch {log.best_epoch}, valid PPL {best.valid_ppl:.4f}"
        + (f", tag acc {best.valid_tag_accuracy:.4f}" if best.valid_tag_accuracy is not None else "")
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def cmd_eval(args) -> int:
    model, extra = load_checkpoint(args.checkpoint)
    corpus = load_conll(args.corpus, vocab=model.vocab, tags=model.tags)
    saved = extra.get("train", {})
    report = evaluate_model(
        model,
        corpus,
        gamma_trace=float(saved.get("gamma_trace", 0.0)),
        trace_mode=args.trace_mode or saved.get("eval_trace_mode", "gold"),
        batch_size=args.batch_size or int(saved.get("eval_batch_size", 10)),
        bptt_len=args.bptt or int(saved.get("bptt_len", 32)),
    )
    report.model_id = Path(args.checkpoint).stem
    report.corpus_id = str(args.corpus)
    report.split = args.split
    print(json.dumps(report.to_dict(), indent=1))
    out = args.out or (str(Path(args.checkpoint).with_suffix("")) + f".eval-{report.trace_mode}.json")
    report.to_json(out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# experiment
# ---------------------------------------------------------------------------


def _variants_from_doc(doc_variants) -> list[VariantSpec]:
    out = []
    for v in doc_variants:
        out.append(
            VariantSpec(
                name=v["name"],
                head_kind=v.get("head_kind", "q"),
                use_trace=v.get("use_trace", True),
                oracle_mode=v.get("oracle_mode", False),
                aux_hidden=v.get("aux_hidden"),
            )
        )
    return out


def cmd_experiment(args) -> int:
    doc = _load_json(args.matrix)
    kind = doc.get("type", "comparison")
    data = doc.get("data", {})
    if "corpus" not in data:
        raise ValidationError("matrix config needs data.corpus")
    corpus = load_conll(data["corpus"])
    if data.get("valid_corpus"):
        valid = load_conll(data["valid_corpus"], vocab=corpus.vocab, tags=corpus.tags)
    else:
        valid_tokens = int(data.get("valid_tokens", 0))
        if valid_tokens <= 0:
            n_words = sum(t.size for t, _ in corpus.sentences)
            valid_tokens = max(1, n_words // 10)
        corpus, valid = split_corpus(corpus, valid_tokens)

    model_doc = dict(doc.get("model", {}))
    if "lm_hidden" in model_doc:
        model_doc["lm_hidden"] = tuple(model_doc["lm_hidden"])
    base_model = ModelConfig(
        vocab_size=len(corpus.vocab), tag_size=len(corpus.tags), **model_doc
    )
    train_config = TrainConfig(**doc.get("train", {}))
    seeds = doc.get("seeds", [1, 2, 3])
    out_dir = Path(args.out_dir) if args.out_dir else resolve_run_root(None) / f"experiment-{kind}"
    jobs = args.jobs

    if kind == "comparison":
        variants = (
            _variants_from_doc(doc["variants"]) if doc.get("variants") else list(DEFAULT_VARIANTS)
        )
        matrix = run_comparison(
            corpus, valid, variants, seeds, base_model, train_config, out_dir=out_dir, jobs=jobs
        )
    elif kind == "trace-ablation":
        variants = (
            _variants_from_doc(doc["variants"])
            if doc.get("variants")
            else [
                VariantSpec(name="prl-q", head_kind="q", use_trace=True),
                VariantSpec(name="prl-q-no-trace", head_kind="q", use_trace=False),
            ]
        )
        matrix = run_comparison(
            corpus, valid, variants, seeds, base_model, train_config,
            out_dir=out_dir, jobs=jobs, baseline_name=variants[0].name,
        )
    elif kind == "size-sweep":
        sizes = doc.get("sizes")
        if not sizes:
            raise ValidationError("size-sweep matrix needs a sizes list")
        variants = (
            _variants_from_doc(doc["variants"]) if doc.get("variants") else list(DEFAULT_VARIANTS)
        )
        matrix = dataset_size_sweep(
            corpus, valid, sizes, variants, seeds, base_model, train_config,
            out_dir=out_dir, jobs=jobs,
        )
    elif kind == "oracle-curve":
        aux_sizes = doc.get("aux_sizes")
        if not aux_sizes:
            raise ValidationError("oracle-curve matrix needs an aux_sizes list")
        curve = oracle_curve(
            corpus, valid, aux_sizes, seeds, base_model, train_config,
            head_kind=doc.get("head_kind", "q"), out_dir=out_dir, jobs=jobs,
        )
        bad = [p for p in curve.points if p["tag_accuracy"] is None]
        print(f"oracle curve: {len(curve.points)} points -> {out_dir}")
        for s, rho in curve.spearman_by_seed.items():
            print(f"  seed {s}: spearman(acc, ppl) = {rho:+.3f}")
        return EXIT_DATA if bad and len(bad) == len(curve.points) else EXIT_OK
    else:
        raise ValidationError(f"unknown experiment type {kind!r}")

    print(f"experiment {kind}: {len(matrix.cells)} cells -> {out_dir}")
    for row in matrix.aggregates:
        extra = ""
        if row.delta_ppl is not None:
            extra = f"  delta={row.delta_ppl:+.3f} ({row.percent_change:+.2f}%)"
            if row.beats_baseline is not None:
                extra += f" beats_baseline={row.beats_baseline}"
        se = f" +/- {row.ppl_stderr:.3f}" if row.ppl_stderr is not None else ""
        print(f"  {row.variant}: PPL {row.ppl_mean:.3f}{se}{extra}")
    return EXIT_DATA if matrix.all_failed else EXIT_OK


# ---------------------------------------------------------------------------
# parser / main
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="prl", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", help="sample a tagged corpus from an HMM spec")
    p.add_argument("spec", help="HMM spec JSON (states, emissions, transitions, seed, length)")
    p.add_argument("out", help="output corpus file (token<TAB>tag lines)")
    p.add_argument("--report", help="analytic floor report path (default: <out>.floors.json)")
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("train", help="train one model")
    p.add_argument("config", nargs="?", help="config JSON with data/model/train sections")
    p.add_argument("--corpus")
    p.add_argument("--valid-corpus", dest="valid_corpus")
    p.add_argument("--head", choices=["p", "q", "none"])
    p.add_argument("--no-trace", action="store_true")
    p.add_argument("--oracle", action="store_true")
    p.add_argument("--tie-weights", action="store_true", dest="tie_weights")
    p.add_argument("--d-embed", type=int, dest="d_embed")
    p.add_argument("--lm-hidden", type=int, nargs=3, dest="lm_hidden")
    p.add_argument("--aux-hidden", type=int, dest="aux_hidden")
    p.add_argument("--lr", type=float)
    p.add_argument("--gamma-q", type=float, dest="gamma_q")
    p.add_argument("--gamma-trace", type=float, dest="gamma_trace")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--bptt", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--clip", type=float)
    p.add_argument("--ratio", type=int, help="LM windows per auxiliary update")
    p.add_argument("--trace-mode", choices=["gold", "self"], dest="trace_mode")
    p.add_argument("--eval-batch-size", type=int, dest="eval_batch_size")
    p.add_argument("--out-dir", dest="out_dir")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a corpus")
    p.add_argument("checkpoint")
    p.add_argument("corpus")
    p.add_argument("--trace-mode", choices=["gold", "self"], dest="trace_mode")
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--bptt", type=int)
    p.add_argument("--split", default="eval")
    p.add_argument("--out", help="report path (default: next to the checkpoint)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("experiment", help="run a matrix of training runs")
    p.add_argument("matrix", help="matrix config JSON")
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    p.add_argument("--out-dir", dest="out_dir")
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValidationError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (InputError, ParseError, SchemaError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDiverged as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except PrlError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
