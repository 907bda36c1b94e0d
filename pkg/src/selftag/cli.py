"""Command-line surface: corpus synthesis, K-shot splitting, training,
self-training, evaluation, selection analysis and embedding export.

Settings resolve as defaults < --config file < explicit flags; the resolved
configuration is echoed into the run directory for provenance.
"""

from __future__ import annotations

import argparse
import logging
import os
import statistics
import sys

from .data import (
    LabelScheme,
    SynthSpec,
    greedy_kshot_split,
    load_split,
    parse_conll,
    save_split,
    serialize_conll,
    synth_corpus,
    synth_scheme,
)
from .evaluate import corpus_spans, entity_f1, export_embeddings, selection_error_rates
from .model import load_checkpoint
from .selftrain import (
    ConfigError,
    TrainingConfig,
    read_metrics,
    run_experiment,
    write_metrics,
)
from .uncertainty import mc_predict, write_selection_reports

logger = logging.getLogger(__name__)

CONFIG_FLAGS = {
    # flag dest -> TrainingConfig field
    "seed": "seed",
    "mode": "mode",
    "head": "head",
    "rho": "rho",
    "t_passes": "t_passes",
    "tau": "tau",
    "lam": "lam",
    "k_perturb": "k_perturb",
    "learning_rate": "learning_rate",
    "batch_size": "batch_size",
    "teacher_epochs": "teacher_epochs",
    "student_epochs": "student_epochs",
    "max_iterations": "max_iterations",
    "patience": "patience",
    "dropout": "dropout",
    "embed_dim": "embed_dim",
    "hidden_dim": "hidden_dim",
    "selection_mode": "selection_mode",
    "loss_kind": "loss_kind",
    "max_length": "max_length",
}


def _add_config_flags(parser):
    parser.add_argument("--config", help="key = value configuration file")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--seeds", nargs="?", const="12,21,42,87,100",
                        help="comma-separated training-seed sweep "
                             "(bare flag uses 12,21,42,87,100)")
    parser.add_argument("--mode", choices=("sequst", "sst", "supervised_only"))
    parser.add_argument("--head", choices=("softmax", "crf"))
    parser.add_argument("--rho", type=float)
    parser.add_argument("--t-passes", dest="t_passes", type=int)
    parser.add_argument("--tau", type=float)
    parser.add_argument("--lambda", dest="lam", type=float)
    parser.add_argument("--k-perturb", dest="k_perturb", type=int)
    parser.add_argument("--learning-rate", dest="learning_rate", type=float)
    parser.add_argument("--batch-size", dest="batch_size", type=int)
    parser.add_argument("--teacher-epochs", dest="teacher_epochs", type=int)
    parser.add_argument("--student-epochs", dest="student_epochs", type=int)
    parser.add_argument("--max-iterations", dest="max_iterations", type=int)
    parser.add_argument("--patience", type=int)
    parser.add_argument("--dropout", type=float)
    parser.add_argument("--embed-dim", dest="embed_dim", type=int)
    parser.add_argument("--hidden-dim", dest="hidden_dim", type=int)
    parser.add_argument("--selection-mode", dest="selection_mode",
                        choices=("weighted", "top"))
    parser.add_argument("--loss-kind", dest="loss_kind",
                        choices=("phce", "cross_entropy"))
    parser.add_argument("--max-length", dest="max_length", type=int)


def _resolve_config(args, forced_mode=None):
    mapping = {}
    if args.config:
        base = TrainingConfig.from_file(args.config)
        mapping.update({k: getattr(base, k) for k in CONFIG_FLAGS.values()})
    for dest, field in CONFIG_FLAGS.items():
        value = getattr(args, dest, None)
        if value is not None:
            mapping[field] = value
    if forced_mode is not None:
        mapping["mode"] = forced_mode
    return TrainingConfig.from_mapping(mapping)


def cmd_synth(args):
    spec = SynthSpec(num_classes=args.classes, vocab_size=args.vocab,
                     corpus_size=args.size, min_length=args.min_len,
                     max_length=args.max_len, lexicon_size=args.lexicon,
                     max_span_length=args.max_span, entity_rate=args.entity_rate)
    corpus = synth_corpus(spec, args.seed)
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(serialize_conll(corpus))
    print(f"wrote {len(corpus)} sentences ({len(synth_scheme(spec))} tags) to {args.out}")
    return 0


def cmd_split(args):
    with open(args.input, encoding="utf-8") as fh:
        text = fh.read()
    scheme = LabelScheme.from_tag_set(
        {line.split()[1] for line in text.splitlines() if line.strip()})
    corpus = parse_conll(text, scheme, max_length=args.max_length)
    split = greedy_kshot_split(corpus, scheme, args.shots, args.seed)
    save_split(split, scheme, args.out)
    n_l, n_v, n_u = split.sizes()
    print(f"split {args.input}: labeled={n_l} validation={n_v} unlabeled={n_u} -> {args.out}")
    return 0


def _run_with_seeds(args, forced_mode=None):
    split, scheme = load_split(args.split)
    config = _resolve_config(args, forced_mode=forced_mode)
    if not args.seeds:
        _, records, metrics = run_experiment(split, scheme, config, args.out)
        print(f"mode={config.mode} best_val_f1={metrics['best_val_f1'] * 100:.2f} "
              f"({len(records)} iterations) -> {args.out}")
        return 0
    seeds = [int(s) for s in args.seeds.split(",")]
    scores = []
    import dataclasses
    for seed in seeds:
        run_config = dataclasses.replace(config, seed=seed)
        out = os.path.join(args.out, f"seed_{seed}")
        _, _, metrics = run_experiment(split, scheme, run_config, out)
        scores.append(metrics["best_val_f1"])
        print(f"seed={seed} best_val_f1={metrics['best_val_f1'] * 100:.2f}")
    summary = {
        "mode": config.mode,
        "seeds": ",".join(str(s) for s in seeds),
        "mean_val_f1": statistics.fmean(scores),
        "stdev_val_f1": statistics.stdev(scores) if len(scores) > 1 else 0.0,
    }
    write_metrics(summary, os.path.join(args.out, "summary.txt"))
    print(f"mean_val_f1={summary['mean_val_f1'] * 100:.2f} "
          f"± {summary['stdev_val_f1'] * 100:.2f}")
    return 0


def cmd_train(args):
    return _run_with_seeds(args, forced_mode="supervised_only")


def cmd_selftrain(args):
    return _run_with_seeds(args)


def cmd_evaluate(args):
    with open(args.gold, encoding="utf-8") as fh:
        gold_text = fh.read()
    scheme = LabelScheme.from_tag_set(
        {line.split()[1] for line in gold_text.splitlines() if line.strip()})
    gold = parse_conll(gold_text, scheme, max_length=args.max_length)
    if args.pred:
        with open(args.pred, encoding="utf-8") as fh:
            pred = parse_conll(fh.read(), scheme, max_length=args.max_length)
        if len(pred) != len(gold):
            raise ValueError("gold and pred files have different sentence counts")
        pred_tags = [s.gold_tags for s in pred]
    elif args.checkpoint:
        model = load_checkpoint(args.checkpoint)
        pred_tags = [model.predict_tags(s) for s in gold]
    else:
        raise ConfigError("pred", "evaluate needs --pred or --checkpoint")
    report = entity_f1(corpus_spans([s.gold_tags for s in gold]),
                       corpus_spans(pred_tags))
    print(f"precision = {report.precision * 100:.2f}")
    print(f"recall = {report.recall * 100:.2f}")
    print(f"F1 = {report.f1 * 100:.2f}")
    for label, (p, r, f1) in sorted(report.per_class.items()):
        print(f"  {label}: P={p * 100:.2f} R={r * 100:.2f} F1={f1 * 100:.2f}")
    if args.out:
        metrics = {"precision": report.precision, "recall": report.recall,
                   "f1": report.f1}
        for label, (p, r, f1) in report.per_class.items():
            metrics[f"f1.{label}"] = f1
        write_metrics(metrics, args.out)
    return 0


def cmd_analyze(args):
    split, scheme = load_split(args.split)
    model = load_checkpoint(args.checkpoint)
    config = _resolve_config(args)
    mc_rng_seed = config.seed
    from .numerics import rng_stream

    mc_rng = rng_stream(mc_rng_seed, "mc-seeds", "analyze")
    mcs, reports = [], []
    for sentence in split.unlabeled:
        mc = mc_predict(model, sentence, config.t_passes,
                        int(mc_rng.integers(0, 2**32)))
        mcs.append(mc)
    gold_indices = [
        [scheme.index(t) for t in tags]
        for tags in split.unlabeled_gold_tags_for_analysis()
    ]
    rates = selection_error_rates(mcs, gold_indices, config.rho, config.seed,
                                  mode=config.selection_mode)
    os.makedirs(args.out, exist_ok=True)
    write_metrics({f"error_rate.{k}": v for k, v in rates.items()},
                  os.path.join(args.out, "error_rates.txt"))
    from .uncertainty import build_selection_report

    select_rng = rng_stream(config.seed, "select-seeds", "analyze")
    for mc in mcs:
        reports.append(build_selection_report(
            mc, config.rho, int(select_rng.integers(0, 2**32)),
            mode=config.selection_mode))
    write_selection_reports(os.path.join(args.out, "selection.tsv"),
                            split.unlabeled, reports, scheme)
    for strategy in ("none", "confidence", "certainty", "both"):
        print(f"error_rate[{strategy}] = {rates[strategy] * 100:.2f}")
    return 0


def cmd_export_embeddings(args):
    model = load_checkpoint(args.checkpoint)
    with open(args.input, encoding="utf-8") as fh:
        sentences = parse_conll(fh.read(), model.scheme, max_length=args.max_length)
    export_embeddings(model, sentences, args.out)
    print(f"wrote embeddings for {len(sentences)} sentences to {args.out}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="selftag",
        description="uncertainty-aware self-training for sequence labeling")
    parser.add_argument("--verbose", action="store_true", help="info-level logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic gold-tagged corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=5)
    p.add_argument("--vocab", type=int, default=100)
    p.add_argument("--size", type=int, default=2000)
    p.add_argument("--min-len", dest="min_len", type=int, default=5)
    p.add_argument("--max-len", dest="max_len", type=int, default=15)
    p.add_argument("--lexicon", type=int, default=8)
    p.add_argument("--max-span", dest="max_span", type=int, default=3)
    p.add_argument("--entity-rate", dest="entity_rate", type=float, default=0.25)
    p.add_argument("--seed", type=int, default=42)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("split", help="greedy per-class K-shot split")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--shots", type=int, default=10)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--max-length", dest="max_length", type=int, default=64)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="supervised-only training on the labeled shots")
    p.add_argument("--split", required=True)
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("selftrain", help="the full self-training loop")
    p.add_argument("--split", required=True)
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_selftrain)

    p = sub.add_parser("evaluate", help="entity F1 of predictions against a gold file")
    p.add_argument("--gold", required=True)
    p.add_argument("--pred")
    p.add_argument("--checkpoint")
    p.add_argument("--out")
    p.add_argument("--max-length", dest="max_length", type=int, default=64)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("analyze", help="selection error rates per strategy")
    p.add_argument("--split", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("export-embeddings", help="per-token hidden states as text")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--max-length", dest="max_length", type=int, default=64)
    p.set_defaults(func=cmd_export_embeddings)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ValueError, RuntimeError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: missing file: {exc.filename}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
