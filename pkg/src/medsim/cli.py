"""Command-line entry point: task construction, training, evaluation,
probing, corpus stats, and the HTTP service."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import corpus, evaluation, taskgen
from .corpus import CorpusError
from .encoder import EncoderConfig, TinyTransformerEncoder, Vocab
from .evaluation import EvalError
from .faqmatch import FAQError
from .model import (
    PairClassifier,
    TrainConfig,
    TrainingError,
    double_finetune,
    finetune,
    load_checkpoint,
    save_checkpoint,
)

logger = logging.getLogger(__name__)


class CLIError(ValueError):
    """Invalid arguments or inputs; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage errors; our contract reserves 2 for runtime
    # failures, so route usage problems through the validation path instead.
    def error(self, message: str):
        raise CLIError(f"{self.prog}: {message}\n{self.format_usage().rstrip()}")


def _print_config(command: str, args: argparse.Namespace) -> None:
    resolved = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    print(json.dumps({"command": command, "config": resolved}, sort_keys=True, default=str))


def _write_manifest(out_path: str, command: str, args: argparse.Namespace) -> None:
    resolved = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    manifest = {"command": command, "config": resolved, "output": str(out_path)}
    Path(f"{out_path}.manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, default=str, indent=2) + "\n", encoding="utf-8"
    )


def _read_exclusions(path: str | None) -> frozenset[str]:
    if not path:
        return frozenset()
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return frozenset(line.strip() for line in lines if line.strip())


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--patience", type=int, default=None)
    p.add_argument("--lr", type=float, default=None, help="defaults to the training-config default")
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--max-tokens", type=int, default=200)
    p.add_argument("--width", type=int, default=32)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--ffn-width", type=int, default=64)
    p.add_argument("--pooling", choices=["cls", "mean"], default="cls")


def _train_config(args: argparse.Namespace, epochs=None, patience=None) -> TrainConfig:
    kwargs = dict(
        rng_seed=args.seed,
        max_tokens=args.max_tokens,
        batch_size=args.batch,
        epochs=epochs,
        early_stop_patience=patience,
    )
    if args.lr is not None:
        kwargs["learning_rate"] = args.lr
    try:
        return TrainConfig(**kwargs)
    except TrainingError as exc:
        # a bad flag combination is a validation error, not a training failure
        raise CLIError(str(exc)) from None


def _encoder_config(args: argparse.Namespace) -> EncoderConfig:
    return EncoderConfig(
        width=args.width,
        layers=args.layers,
        heads=args.heads,
        ffn_width=args.ffn_width,
        max_len=args.max_tokens,
        pooling=args.pooling,
    )


def _fresh_model(args: argparse.Namespace, texts) -> PairClassifier:
    vocab = Vocab.build(texts)
    encoder = TinyTransformerEncoder(vocab, _encoder_config(args), rng_seed=args.seed)
    return PairClassifier(encoder, rng_seed=args.seed)


def _pair_texts(*pair_lists) -> list[str]:
    texts: list[str] = []
    for pairs in pair_lists:
        for p in pairs:
            texts.append(p.text_a)
            texts.append(p.text_b)
    return texts


def cmd_stats(args: argparse.Namespace) -> int:
    pairs = corpus.load_pairs(args.inp, fmt=args.fmt)
    questions = corpus.questions_from_pairs(pairs)
    stats = corpus.compute_stats(questions, pair_count=len(pairs))
    print(json.dumps(dataclasses.asdict(stats), sort_keys=True))
    return 0


def cmd_build_tasks(args: argparse.Namespace) -> int:
    cfg = taskgen.TaskGenConfig(rng_seed=args.seed, negatives_per_positive=args.negatives)
    excluded = _read_exclusions(args.exclude)
    if args.task == "qq":
        pairs = taskgen.passthrough_qq(corpus.load_pairs(args.inp))
    else:
        records = corpus.load_qa_corpus(args.inp)
        if args.task == "qa":
            pairs = taskgen.build_qa_pairs(records, cfg, excluded_ids=excluded)
        elif args.task == "aa":
            pairs = taskgen.build_aa_pairs(
                [a for _, a in records], cfg, excluded_ids=excluded
            )
        else:
            pairs = taskgen.build_qc_pairs(
                [q for q, _ in records], cfg, excluded_ids=excluded
            )
    corpus.write_pairs(args.out, pairs)
    _write_manifest(args.out, "build-tasks", args)
    print(f"wrote {len(pairs)} pairs to {args.out}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    final = corpus.load_pairs(args.final)
    dev = corpus.load_pairs(args.dev) if args.dev else None
    intermediate = corpus.load_pairs(args.intermediate) if args.intermediate else None
    texts = _pair_texts(final, intermediate or [], dev or [])
    model = _fresh_model(args, texts)
    if intermediate:
        mid_epochs = args.mid_epochs if args.mid_epochs is not None else args.epochs
        cfg_mid = _train_config(args, epochs=mid_epochs)
        cfg_final = _train_config(args, epochs=args.epochs, patience=args.patience)
        trained, report = double_finetune(
            model, intermediate, final, cfg_mid, cfg_final, final_dev=dev
        )
    else:
        cfg_final = _train_config(args, epochs=args.epochs, patience=args.patience)
        trained, report = finetune(model, final, dev, cfg_final)
    save_checkpoint(trained, args.out)
    _write_manifest(args.out, "train", args)
    print(json.dumps(dataclasses.asdict(report), sort_keys=True))
    return 0


def _parse_arm(spec: str) -> tuple[str, str | None]:
    name, sep, path = spec.partition("=")
    if not name:
        raise CLIError(f"bad arm spec {spec!r}; expected NAME or NAME=INTERMEDIATE_PATH")
    return name, (path if sep else None)


def cmd_eval(args: argparse.Namespace) -> int:
    dataset = corpus.load_pairs(args.data)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
    arms = [_parse_arm(spec) for spec in args.arm] or [("baseline", None)]

    def make_trainer(intermediate_path: str | None):
        intermediate = corpus.load_pairs(intermediate_path) if intermediate_path else None

        def trainer(train, dev, test, seed):
            ns = argparse.Namespace(**vars(args))
            ns.seed = seed
            model = _fresh_model(ns, _pair_texts(train, dev, test, intermediate or []))
            cfg = _train_config(ns, epochs=ns.epochs, patience=ns.patience)
            if intermediate:
                mid = _train_config(ns, epochs=ns.mid_epochs if ns.mid_epochs is not None else ns.epochs)
                trained, _ = double_finetune(model, intermediate, train, mid, cfg, final_dev=dev)
            else:
                trained, _ = finetune(model, train, dev, cfg)
            preds = [
                label
                for label, _ in trained.predict_batch(
                    [(p.text_a, p.text_b) for p in test], ns.max_tokens
                )
            ]
            return evaluation.accuracy(preds, [p.label for p in test])

        return trainer

    reports = []
    for name, intermediate_path in arms:
        report = evaluation.run_splits(
            make_trainer(intermediate_path),
            dataset,
            k=args.k,
            seeds=seeds,
            model_tag=name,
            split_seed=args.split_seed,
        )
        reports.append(report)
    comparisons = [
        evaluation.compare(reports[i], reports[j])
        for i in range(len(reports))
        for j in range(i + 1, len(reports))
    ]
    print(evaluation.format_table(reports))
    for c in comparisons:
        print(f"{c.tag_a} vs {c.tag_b}: t={c.t_statistic:.3f} p={c.p_value:.4f}")
    if args.out:
        payload = {
            "arms": {r.runs[0].model_tag: evaluation.report_to_dict(r) for r in reports},
            "comparisons": [dataclasses.asdict(c) for c in comparisons],
        }
        Path(args.out).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        _write_manifest(args.out, "eval", args)
    return 0


def cmd_probe(args: argparse.Namespace) -> int:
    models = [load_checkpoint(p) for p in args.models]
    pairs = corpus.load_pairs(args.data)
    if args.edits:
        edits = [l for l in Path(args.edits).read_text(encoding="utf-8").splitlines() if l.strip()]
        verdicts = evaluation.probe_with_edits(
            models, pairs[args.pair_index], edits, args.max_tokens
        )
    else:
        verdicts = evaluation.consistency_analysis(models, pairs, args.max_tokens)
    for v in verdicts:
        print(json.dumps({"pair_id": v.pair_id, "verdict": v.verdict.value, "votes": v.votes}))
    return 0


def cmd_serve(args: argparse.Namespace) -> int:
    from .service import ServiceConfig, apply_env_overrides, run_service

    config = ServiceConfig(
        host=args.host,
        port=args.port,
        model_path=args.model,
        faq_path=args.faqs,
        replacement_path=args.replacements,
        filter_threshold=args.filter_t,
        decision_threshold=args.decision_t,
        max_results=args.max_results,
        static_dir=args.static,
    )
    apply_env_overrides(config)
    run_service(config)
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="medsim", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("stats", help="print corpus statistics for a pair file")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--fmt", choices=["jsonl", "csv"], default="jsonl")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("build-tasks", help="construct an intermediate-task pair dataset")
    p.add_argument("--task", choices=["qa", "aa", "qc", "qq"], required=True)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--negatives", type=int, default=1)
    p.add_argument("--exclude", default=None, help="file of question ids to leave out")
    p.set_defaults(func=cmd_build_tasks)

    p = sub.add_parser("train", help="train a pair classifier, optionally in two stages")
    p.add_argument("--final", required=True, help="final-task training pairs (JSONL)")
    p.add_argument("--intermediate", default=None, help="intermediate-task pairs (JSONL)")
    p.add_argument("--dev", default=None)
    p.add_argument("--out", required=True, help="checkpoint path (.zip)")
    p.add_argument("--mid-epochs", type=int, default=None)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="k-split evaluation with paired significance tests")
    p.add_argument("--data", required=True)
    p.add_argument("--arm", action="append", default=[], help="NAME or NAME=INTERMEDIATE_PATH; repeatable")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--seeds", default=None, help="comma-separated, one per split")
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--mid-epochs", type=int, default=None)
    p.add_argument("--out", default=None, help="write a JSON report here")
    _add_train_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("probe", help="committee consistency analysis and edit probes")
    p.add_argument("--models", nargs="+", required=True, help="4+ checkpoints")
    p.add_argument("--data", required=True)
    p.add_argument("--edits", default=None, help="file of rewrites of the second question")
    p.add_argument("--pair-index", type=int, default=0)
    p.add_argument("--max-tokens", type=int, default=200)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("serve", help="run the FAQ-matching HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8080)
    p.add_argument("--model", default=None)
    p.add_argument("--faqs", default=None)
    p.add_argument("--replacements", default=None)
    p.add_argument("--filter-t", type=float, default=0.2)
    p.add_argument("--decision-t", type=float, default=0.5)
    p.add_argument("--max-results", type=int, default=5)
    p.add_argument("--static", default=None)
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        _print_config(args.command, args)
        return args.func(args)
    except (CLIError, CorpusError, FAQError, EvalError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except TrainingError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # anything unanticipated is a runtime failure
        logger.exception("unhandled failure")
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
