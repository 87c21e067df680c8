"""Command-line entry points.

Subcommands: generate-data, train, decode, evaluate, sweep, write-config.
All of them are driven by an experiment config file; `--set section.key=value`
overrides individual keys. Relative output paths resolve under
$ITERPL_OUTPUT_ROOT when that is set, else under the working directory.
Exit status is 0 iff the command emitted no error records.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import os
import sys
import traceback
from pathlib import Path

from . import trainer as trainer_mod
from .config import (
    ConfigError,
    apply_overrides,
    default_config,
    load_config,
    parse_config,
    save_config,
    write_config,
)
from .ctc import (
    InvalidInputError,
    TokenSeq,
    beam_search_decode,
    greedy_decode,
    train_ngram_lm,
)
from .data import generate_corpus, load_corpus, save_corpus
from .metrics import error_rate
from .model import forward, load_model
from .plots import plot_learning_curve, plot_sweep_summary

OUTPUT_ROOT_ENV = "ITERPL_OUTPUT_ROOT"


def _out_path(p) -> Path:
    p = Path(p)
    if p.is_absolute():
        return p
    return Path(os.environ.get(OUTPUT_ROOT_ENV, ".")) / p


def _load_cfg(args):
    cfg = load_config(args.config) if args.config else default_config()
    return apply_overrides(cfg, args.set or [])


def _split_refs(corpus, split_name):
    """References for a split, falling back to held-out ones so that decoding
    the unlabeled split can still be scored."""
    utts = corpus.split(split_name)
    if not utts:
        raise InvalidInputError(f"split {split_name!r} is empty")
    refs = []
    for u in utts:
        refs.append(u.reference if u.reference is not None
                    else corpus.oracle_reference(u.id))
    return utts, refs


# ---------------------------------------------------------------- subcommands

def cmd_write_config(args) -> int:
    text = write_config(_load_cfg(args))
    if args.out:
        out = _out_path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)
        print(f"wrote {out}")
    else:
        sys.stdout.write(text)
    return 0


def cmd_generate_data(args) -> int:
    cfg = _load_cfg(args)
    task = cfg.task_config()
    t = cfg["task"]
    corpus = generate_corpus(
        task,
        num_labeled=t["num_labeled"],
        num_unlabeled=t["num_unlabeled"],
        num_dev=t["num_dev"],
        num_test=t["num_test"],
        seed=t["corpus_seed"],
    )
    out = _out_path(args.out or cfg["run"]["corpus_file"])
    out.parent.mkdir(parents=True, exist_ok=True)
    save_corpus(corpus, task, t["corpus_seed"], out)
    print(
        f"wrote {out}: labeled={len(corpus.labeled)} unlabeled={len(corpus.unlabeled)} "
        f"dev={len(corpus.dev)} test={len(corpus.test)}"
    )
    return 0


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    train_cfg = cfg.train_config()
    corpus, _, _ = load_corpus(_out_path(args.corpus or cfg["run"]["corpus_file"]))

    if args.run_dir:
        run_dir = _out_path(args.run_dir)
    else:
        name = f"{train_cfg.variant}-seed{train_cfg.seed}"
        run_dir = _out_path(cfg["run"]["output_dir"]) / name
    run_dir.mkdir(parents=True, exist_ok=True)

    if args.resume:
        result = trainer_mod.resume(_out_path(args.resume), corpus, run_dir)
    else:
        save_config(cfg, run_dir / "experiment.cfg")
        result = trainer_mod.run(train_cfg, cfg.model_config(), corpus, run_dir)

    plot_learning_curve(result.records, run_dir / "learning_curve.png")
    print(f"run_dir={run_dir}")
    print(f"done_reason={result.done_reason} updates={result.total_updates}")
    print(f"final_dev_ter={result.final_dev_ter:.4f} best_dev_ter={result.best_dev_ter:.4f}")
    if result.diverged:
        print(f"divergence_flags={sum(result.divergence_flags)} "
              f"sustained={result.sustained_divergence}")
    return 0


def cmd_decode(args) -> int:
    cfg = _load_cfg(args)
    model = load_model(_out_path(args.model))
    corpus, _, _ = load_corpus(_out_path(args.corpus or cfg["run"]["corpus_file"]))
    utts, refs = _split_refs(corpus, args.split)

    lm = None
    if cfg["decode"]["lm_weight"] != 0.0:
        lm_corpus = [list(u.reference) for u in corpus.labeled]
        lm = train_ngram_lm(lm_corpus, cfg["decode"]["lm_order"], cfg["decode"]["lm_delta"])
    dec_cfg = cfg.decoder_config(lm=lm)
    dec_cfg.validate()

    greedy_hyps, beam_hyps = [], []
    for u in utts:
        lp, _ = forward(model, u.features, mode="eval")
        greedy_hyps.append(greedy_decode(lp))
        beam_hyps.append(beam_search_decode(lp, dec_cfg))

    greedy_ter = error_rate(greedy_hyps, refs)
    beam_ter = error_rate(beam_hyps, refs)

    out = _out_path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w") as fh:
        fh.write("utt_id\tgreedy\tbeam\n")
        for u, g, b in zip(utts, greedy_hyps, beam_hyps):
            fh.write(f"{u.id}\t{' '.join(map(str, g))}\t{' '.join(map(str, b))}\n")
    print(f"wrote {out} ({len(utts)} utterances)")
    print(f"greedy_ter={greedy_ter:.4f}")
    print(f"beam_ter={beam_ter:.4f}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _load_cfg(args)
    corpus, _, _ = load_corpus(_out_path(args.corpus or cfg["run"]["corpus_file"]))
    utts, refs = _split_refs(corpus, args.split)
    ref_by_id = {u.id: r for u, r in zip(utts, refs)}

    hyps, matched_refs = [], []
    with open(_out_path(args.hyps)) as fh:
        header = fh.readline().rstrip("\n").split("\t")
        if args.field not in header:
            raise InvalidInputError(f"hypotheses file has no {args.field!r} column")
        col = header.index(args.field)
        for line in fh:
            parts = line.rstrip("\n").split("\t")
            utt_id = parts[0]
            if utt_id not in ref_by_id:
                raise InvalidInputError(f"unknown utterance id {utt_id!r} in hypotheses")
            hyps.append(TokenSeq([int(tok) for tok in parts[col].split()]))
            matched_refs.append(ref_by_id[utt_id])
    if not hyps:
        raise InvalidInputError("hypotheses file has no rows")
    print(f"ter={error_rate(hyps, matched_refs):.4f} ({len(hyps)} utterances)")
    return 0


def _cell_label(assignment) -> str:
    return " ".join(f"{key.split('.')[-1]}={val}" for key, val in assignment)


def cmd_sweep(args) -> int:
    base = _load_cfg(args)
    base_text = write_config(base)
    corpus, _, _ = load_corpus(_out_path(args.corpus or base["run"]["corpus_file"]))
    sweep_dir = _out_path(args.out)
    sweep_dir.mkdir(parents=True, exist_ok=True)

    axes = []
    for vary in args.vary or []:
        key, sep, vals = vary.partition("=")
        if not sep or not vals:
            raise ConfigError(f"--vary {vary!r} is not of the form section.key=v1,v2,...")
        axes.append([(key.strip(), v.strip()) for v in vals.split(",")])
    grid = list(itertools.product(*axes)) if axes else [()]

    rows, failures = [], 0
    for i, assignment in enumerate(grid):
        cell_cfg = apply_overrides(
            parse_config(base_text), [f"{k}={v}" for k, v in assignment]
        )
        label = _cell_label(assignment) or "base"
        cell_dir = sweep_dir / f"cell_{i:03d}"
        t = cell_cfg["train"]
        row = {
            "cell": cell_dir.name,
            "variant": t["variant"],
            "dropout": t["dropout_after_pretrain"],
            "C": t["cache_size"],
            "p": t["replace_prob"],
            "M": "auto" if t["pretrain_updates"] is None else t["pretrain_updates"],
            "lambda": t["unlabeled_updates_per_round"] / t["labeled_updates_per_round"],
            "label": label,
        }
        try:
            cell_dir.mkdir(parents=True, exist_ok=True)
            save_config(cell_cfg, cell_dir / "experiment.cfg")
            result = trainer_mod.run(
                cell_cfg.train_config(), cell_cfg.model_config(), corpus, cell_dir
            )
            row.update(TER=result.final_dev_ter, status="ok", ter=result.final_dev_ter)
            print(f"{cell_dir.name} [{label}]: ter={result.final_dev_ter:.4f}")
        except Exception as e:  # cell failures are recorded, the sweep goes on
            failures += 1
            row.update(TER="", status=f"failed: {e}", ter=None)
            print(f"{cell_dir.name} [{label}]: failed: {e}", file=sys.stderr)
        rows.append(row)

    summary = sweep_dir / "summary.csv"
    with open(summary, "w", newline="") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["cell", "variant", "dropout", "C", "p", "M", "lambda",
                            "TER", "status"],
            extrasaction="ignore",
        )
        writer.writeheader()
        writer.writerows(rows)
    plot_sweep_summary(rows, sweep_dir / "sweep_summary.png")
    print(f"wrote {summary} ({len(rows)} cells, {failures} failed)")
    return 1 if failures else 0


# --------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="iterpl",
        description="Semi-supervised sequence transcription on a synthetic task.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_corpus=False):
        p.add_argument("--config", help="experiment config file (defaults otherwise)")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                       help="override a config key (repeatable)")
        if needs_corpus:
            p.add_argument("--corpus", help="corpus file (default: run.corpus_file)")

    p = sub.add_parser("write-config", help="emit a config file with every key")
    common(p)
    p.add_argument("--out", help="destination (stdout if omitted)")
    p.set_defaults(func=cmd_write_config)

    p = sub.add_parser("generate-data", help="render a synthetic corpus file")
    common(p)
    p.add_argument("--out", help="corpus file (default: run.corpus_file)")
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("train", help="run the training loop")
    common(p, needs_corpus=True)
    p.add_argument("--run-dir", help="output directory (default: run.output_dir/<variant>-seed<seed>)")
    p.add_argument("--resume", metavar="CHECKPOINT", help="continue from a run checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("decode", help="decode a split with a trained model")
    common(p, needs_corpus=True)
    p.add_argument("--model", required=True, help="model checkpoint file")
    p.add_argument("--split", default="dev", choices=["labeled", "unlabeled", "dev", "test"])
    p.add_argument("--out", required=True, help="hypotheses TSV to write")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("evaluate", help="score a hypotheses file against references")
    common(p, needs_corpus=True)
    p.add_argument("--hyps", required=True, help="hypotheses TSV from decode")
    p.add_argument("--split", default="dev", choices=["labeled", "unlabeled", "dev", "test"])
    p.add_argument("--field", default="beam", help="hypothesis column to score")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="train a grid of config cells")
    common(p, needs_corpus=True)
    p.add_argument("--vary", action="append", metavar="SECTION.KEY=V1,V2,...",
                   help="axis of the grid (repeatable; Cartesian product)")
    p.add_argument("--out", required=True, help="sweep directory")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as e:
        if os.environ.get("ITERPL_DEBUG"):
            traceback.print_exc()
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
