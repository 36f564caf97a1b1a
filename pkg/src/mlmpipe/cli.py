"""Command-line entry point.

Subcommands: pack, pmi-build, mask, stats, ppl, pll, metric. Exit codes:
0 success, 1 usage/configuration error, 2 data or integrity error,
3 infeasible request. All diagnostics go to stderr; data goes to files or
stdout. Every output artifact starts with its fully resolved run
configuration so it can be regenerated from the artifact alone.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import analysis, corpus, masking, pmi
from .errors import ConfigError, PipelineError
from .rng import substream

_STRATEGY_ALIASES = {"uniform": "uniform", "wholeword": "whole_word",
                     "whole_word": "whole_word", "span": "span", "pmi": "pmi"}


def _add_vocab_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--vocab-size", type=int, required=True)
    p.add_argument("--mask-id", type=int, required=True)
    p.add_argument("--pad-id", type=int, required=True)
    p.add_argument("--sep-id", type=int, required=True)


def _add_masking_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--strategy", default="uniform",
                   choices=sorted(set(_STRATEGY_ALIASES)))
    p.add_argument("--mask-rate", type=float, default=0.15)
    p.add_argument("--corruption-rate", type=float, default=None)
    p.add_argument("--prediction-rate", type=float, default=None)
    p.add_argument("--p-mask", type=float, default=1.0)
    p.add_argument("--p-rand", type=float, default=0.0)
    p.add_argument("--p-same", type=float, default=0.0)
    p.add_argument("--extra-same", type=float, default=0.0)
    p.add_argument("--pmi-vocab", default=None, help="PMI vocabulary TSV")
    p.add_argument("--mean-span", type=float, default=3.0)
    p.add_argument("--policy-sampling", default="exact", choices=["exact", "bernoulli"])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mlmpipe")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--threads", type=int, default=1)
    parser.add_argument("--config", default=None,
                        help="JSON file whose keys mirror flags; flags win")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("pack", help="pack a tokenized corpus into fixed windows")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--seq-len", type=int, default=128)
    _add_vocab_flags(p)

    p = sub.add_parser("pmi-build", help="mine a PMI n-gram vocabulary")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--vocab-size", type=int, required=True)
    p.add_argument("--n-max", type=int, default=5)
    p.add_argument("--min-count", type=int, default=10)
    p.add_argument("--size-cap", type=int, default=10000)

    p = sub.add_parser("mask", help="produce masked examples from a packed corpus")
    p.add_argument("--input", required=True, help="packed dataset from `pack`")
    p.add_argument("--output", required=True)
    p.add_argument("--epochs", type=int, default=1)
    _add_masking_flags(p)

    p = sub.add_parser("stats", help="masking statistics (coverage or span lengths)")
    p.add_argument("kind", choices=["coverage", "spans"])
    p.add_argument("--input", required=True, help="packed dataset from `pack`")
    p.add_argument("--output", required=True, help="CSV destination")
    _add_masking_flags(p)

    p = sub.add_parser("ppl", help="masked validation perplexity")
    p.add_argument("--input", required=True, help="packed dataset from `pack`")
    p.add_argument("--scorer", default="unigram",
                   help="uniform | unigram | extern:<command>")
    _add_masking_flags(p)

    p = sub.add_parser("pll", help="pseudo-log-likelihood minimal-pair accuracy")
    p.add_argument("--pairs", required=True,
                   help='JSONL with lines {"good": [...], "bad": [...]}')
    p.add_argument("--scorer", default="uniform")
    p.add_argument("--corpus", default=None,
                   help="packed dataset (needed by the unigram scorer)")
    _add_vocab_flags(p)

    p = sub.add_parser("metric", help="normalized / relative performance metrics")
    p.add_argument("kind", choices=["normalize", "relative"])
    p.add_argument("--baseline", type=float, required=True)
    p.add_argument("--values", required=True, help="JSON object: rate -> value")
    p.add_argument("--output", default=None, help="CSV destination (default stdout)")

    return parser


def _apply_config_file(args: argparse.Namespace, argv: list[str]) -> None:
    """Fill unset flags from the JSON config file; explicit flags win."""
    if not args.config:
        return
    try:
        with open(args.config, "r", encoding="utf-8") as fh:
            overrides = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config file {args.config}: {exc}") from exc
    if not isinstance(overrides, dict):
        raise ConfigError("config file must hold a JSON object")
    explicit = set()
    for tok in argv:
        if tok.startswith("--"):
            explicit.add(tok[2:].split("=", 1)[0].replace("-", "_"))
    for key, value in overrides.items():
        attr = key.replace("-", "_")
        if attr in ("subcommand", "kind", "func", "config"):
            continue
        if not hasattr(args, attr):
            raise ConfigError(f"config file key {key!r} matches no flag")
        if attr not in explicit:
            setattr(args, attr, value)


def _resolved_config(args: argparse.Namespace) -> dict:
    # threads never changes output bytes and the artifact knows its own
    # path, so neither belongs in the provenance header
    return {k: v for k, v in vars(args).items()
            if k not in ("config", "threads", "output")}


def _vocab_from_args(args) -> corpus.Vocab:
    return corpus.Vocab(size=args.vocab_size, mask_id=args.mask_id,
                        pad_id=args.pad_id, sep_id=args.sep_id)


def _masking_config(args) -> masking.MaskingConfig:
    for name in ("mask_rate", "corruption_rate", "prediction_rate",
                 "p_mask", "p_rand", "p_same", "extra_same"):
        v = getattr(args, name)
        if v is not None and not 0.0 <= v <= 1.0:
            raise ConfigError(f"--{name.replace('_', '-')}={v} outside [0, 1]")
    return masking.MaskingConfig(
        strategy=_STRATEGY_ALIASES[args.strategy],
        m=args.mask_rate,
        m_corr=args.corruption_rate,
        m_pred=args.prediction_rate,
        policy=(args.p_mask, args.p_rand, args.p_same),
        extra_same=args.extra_same,
        mean_span=args.mean_span,
        seed=args.seed,
        policy_sampling=args.policy_sampling,
    )


def _load_pmi_vocab(args, config: masking.MaskingConfig) -> pmi.PmiVocabulary | None:
    if config.strategy == "pmi" and not args.pmi_vocab:
        raise ConfigError("--strategy pmi requires --pmi-vocab")
    return pmi.PmiVocabulary.load_tsv(args.pmi_vocab) if args.pmi_vocab else None


# ---------------------------------------------------------------------------
# subcommands


def _cmd_pack(args) -> int:
    vocab = _vocab_from_args(args)
    docs = corpus.load_tokens(args.input, vocab)
    ds = corpus.pack_sequences(docs, args.seq_len, vocab)
    corpus.save_packed(ds, args.output, header=_resolved_config(args))
    return 0


def _cmd_pmi_build(args) -> int:
    docs = corpus.load_tokens(args.input, args.vocab_size)
    counts = pmi.count_ngrams(docs, args.n_max)
    vocab = pmi.build_vocab(counts, size_cap=args.size_cap, min_count=args.min_count)
    vocab.save_tsv(args.output,
                   header=json.dumps(_resolved_config(args), separators=(",", ":")))
    return 0


def _example_line(example: masking.MaskedExample) -> str:
    rec = {"seq": example.corrupted_ids,
           "targets": [[p, o] for p, o in example.targets],
           "dup": example.duplicate_index,
           "src": example.source_sequence}
    return json.dumps(rec, separators=(",", ":"))


def _cmd_mask(args) -> int:
    config = _masking_config(args)
    pmi_vocab = _load_pmi_vocab(args, config)
    ds = corpus.load_packed(args.input)

    def window_lines(epoch: int, idx: int) -> str:
        rng = substream(config.seed, epoch, idx)
        plans = masking.plan_window(ds.sequences[idx], ds.vocab, config, rng,
                                    pmi_vocab, source_sequence=idx)
        examples = [masking.materialize(ds.sequences[idx], p, ds.vocab) for p in plans]
        return "".join(_example_line(e) + "\n" for e in examples)

    with open(args.output, "w", encoding="utf-8") as out:
        out.write(json.dumps({"_config": _resolved_config(args)},
                             separators=(",", ":")) + "\n")
        for epoch in range(args.epochs):
            order = substream(config.seed, epoch).permutation(len(ds.sequences))
            if args.threads <= 1:
                for idx in order:
                    out.write(window_lines(epoch, int(idx)))
            else:
                with ThreadPoolExecutor(max_workers=args.threads) as ex:
                    for chunk in ex.map(lambda i: window_lines(epoch, int(i)), order):
                        out.write(chunk)
    return 0


def _cmd_stats(args) -> int:
    config = _masking_config(args)
    pmi_vocab = _load_pmi_vocab(args, config)
    ds = corpus.load_packed(args.input)
    plans = masking.generate_plans(ds, config, pmi_vocab)
    header = "# " + json.dumps(_resolved_config(args), separators=(",", ":"))
    with open(args.output, "w", encoding="utf-8") as out:
        out.write(header + "\n")
        if args.kind == "coverage":
            if pmi_vocab is None:
                raise ConfigError("stats coverage requires --pmi-vocab")
            report = analysis.pmi_coverage(plans, pmi_vocab, ds,
                                           masking_rate=config.m,
                                           strategy=config.strategy)
            emit_coverage_csv(report, out)
        else:
            hist = analysis.span_histogram(plans)
            emit_spans_csv(hist, config.strategy, config.m, out)
    return 0


def emit_coverage_csv(report: analysis.CoverageReport, out) -> None:
    out.write("strategy,masking_rate,ngram_len,coverage\n")
    for n in sorted(report.by_length):
        cell = report.by_length[n]
        out.write(f"{report.strategy},{report.masking_rate:g},{n},"
                  f"{cell.probability:.9g}\n")


def emit_spans_csv(hist: analysis.SpanLengthHistogram, strategy: str,
                   masking_rate: float, out) -> None:
    out.write("strategy,masking_rate,span_len,count\n")
    for length in sorted(hist.counts):
        out.write(f"{strategy},{masking_rate:g},{length},{hist.counts[length]}\n")


def emit_metric_csv(values: dict[float, float], column: str, out) -> None:
    out.write(f"masking_rate,{column}\n")
    for rate in sorted(values):
        out.write(f"{rate:g},{values[rate]:.9g}\n")


def _cmd_ppl(args) -> int:
    config = _masking_config(args)
    pmi_vocab = _load_pmi_vocab(args, config)
    ds = corpus.load_packed(args.input)
    scorer = analysis.make_scorer(args.scorer, ds=ds, vocab_size=ds.vocab.size)
    try:
        ppl = analysis.masked_perplexity(ds, config, scorer, pmi_vocab)
    finally:
        if isinstance(scorer, analysis.ExternScorer):
            scorer.close()
    print(json.dumps({"_config": _resolved_config(args), "perplexity": ppl}))
    return 0


def _cmd_pll(args) -> int:
    vocab = _vocab_from_args(args)
    ds = corpus.load_packed(args.corpus) if args.corpus else None
    scorer = analysis.make_scorer(args.scorer, ds=ds, vocab_size=vocab.size)
    pairs = []
    with open(args.pairs, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip() or line.startswith("#"):
                continue
            rec = json.loads(line)
            if "good" not in rec or "bad" not in rec:
                raise ConfigError(f"pairs line {lineno}: needs 'good' and 'bad'")
            pairs.append(([int(t) for t in rec["good"]],
                          [int(t) for t in rec["bad"]]))
    try:
        accuracy = analysis.minimal_pair_accuracy(pairs, scorer, vocab)
    finally:
        if isinstance(scorer, analysis.ExternScorer):
            scorer.close()
    print(json.dumps({"_config": _resolved_config(args),
                      "accuracy": accuracy, "pairs": len(pairs)}))
    return 0


def _cmd_metric(args) -> int:
    try:
        with open(args.values, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
        values = {float(k): float(v) for k, v in raw.items()}
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read values file {args.values}: {exc}") from exc
    if args.kind == "normalize":
        result = analysis.normalized_performance(values, args.baseline)
        column = "normalized_value"
    else:
        result = analysis.relative_metric(values, args.baseline)
        column = "relative_value"
    header = "# " + json.dumps(_resolved_config(args), separators=(",", ":"))
    if args.output:
        with open(args.output, "w", encoding="utf-8") as out:
            out.write(header + "\n")
            emit_metric_csv(result, column, out)
    else:
        sys.stdout.write(header + "\n")
        emit_metric_csv(result, column, sys.stdout)
    return 0


_DISPATCH = {
    "pack": _cmd_pack,
    "pmi-build": _cmd_pmi_build,
    "mask": _cmd_mask,
    "stats": _cmd_stats,
    "ppl": _cmd_ppl,
    "pll": _cmd_pll,
    "metric": _cmd_metric,
}


def run(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    try:
        _apply_config_file(args, argv)
        return _DISPATCH[args.subcommand](args)
    except PipelineError as exc:
        print(f"mlmpipe: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"mlmpipe: error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
