"""Command line front end.

Subcommands cover the whole pipeline: gen-data makes a synthetic corpus,
train runs the two-stage schedule, align writes TextGrids plus attention
CSVs for a trained checkpoint, eval scores predicted boundaries against a
reference corpus, gradcheck verifies the backward pass, and ablate trains
a baseline/variant pair.  Exit codes: 0 success, 1 validation failure
(bad arguments, malformed files, missing inputs), 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .data import (
    SyntheticSpec,
    export_textgrid,
    generate_synthetic_corpus,
    load_alignments,
    load_corpus,
    save_alignments,
    save_corpus,
)
from .errors import (
    CheckpointFormatError,
    ConfigurationError,
    CorpusFormatError,
    DimensionError,
    InputError,
    TrainingDivergence,
)
from .gradcheck import gradient_suite, micro_model_check
from .model import NeuFAConfig, load_checkpoint
from .training import (
    ABLATION_VARIANTS,
    TrainSchedule,
    align_corpus,
    evaluate,
    render_report,
    run_ablation,
    train_run,
)

VALIDATION_ERRORS = (
    ConfigurationError,
    InputError,
    CorpusFormatError,
    DimensionError,
    CheckpointFormatError,
    FileNotFoundError,
    IsADirectoryError,
    NotADirectoryError,
)


class _ArgumentError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits with code 2 on bad arguments; remap to validation (1)."""

    def error(self, message):
        raise _ArgumentError(message)


def _load_json(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: not valid JSON ({exc})") from None


def _load_train_config(path):
    raw = _load_json(path)
    if not isinstance(raw, dict):
        raise ConfigurationError(f"{path}: expected an object with model/schedule")
    unknown = set(raw) - {"model", "schedule"}
    if unknown:
        raise ConfigurationError(f"{path}: unknown sections {sorted(unknown)}")
    config = NeuFAConfig.from_dict(raw.get("model", {}))
    schedule = TrainSchedule.from_dict(raw.get("schedule", {}))
    return config, schedule


def _cmd_gen_data(args):
    spec_dict = _load_json(args.spec)
    if not isinstance(spec_dict, dict):
        raise ConfigurationError(f"{args.spec}: expected an object of corpus fields")
    spec = SyntheticSpec.from_dict(spec_dict)
    corpus = generate_synthetic_corpus(spec, frame_shift_ms=args.frame_shift)
    save_corpus(corpus, args.out)
    print(f"wrote {len(corpus)} utterances to {args.out}")
    return 0


def _cmd_train(args):
    config, schedule = _load_train_config(args.config)
    corpus = load_corpus(args.corpus)
    os.makedirs(args.out, exist_ok=True)
    _, _, history = train_run(config, schedule, corpus, out_dir=args.out)
    if history:
        last = history[-1]
        terms = "  ".join(f"{k} {last[k]:.4f}" for k in ("total",) if k in last)
        print(f"finished step {last['step']} of stage {last['stage']}: {terms}")
    print(f"checkpoint and history written to {args.out}")
    return 0


def _cmd_align(args):
    model, _, _ = load_checkpoint(args.ckpt)
    corpus = load_corpus(args.corpus)
    os.makedirs(args.out, exist_ok=True)
    aligned = align_corpus(model, corpus)
    boundary_sets = {}
    for utt in corpus:
        bounds, w_tts, w_asr = aligned[utt.id]
        boundary_sets[utt.id] = bounds
        export_textgrid(utt, bounds, os.path.join(args.out, f"{utt.id}.TextGrid"))
        np.savetxt(os.path.join(args.out, f"{utt.id}.w_tts.csv"), w_tts,
                   delimiter=",", fmt="%.17g")
        np.savetxt(os.path.join(args.out, f"{utt.id}.w_asr.csv"), w_asr,
                   delimiter=",", fmt="%.17g")
    save_alignments(boundary_sets, os.path.join(args.out, "alignments.jsonl"))
    print(f"aligned {len(corpus)} utterances into {args.out}")
    return 0


def _cmd_eval(args):
    pred_path = args.pred
    if os.path.isdir(pred_path):
        pred_path = os.path.join(pred_path, "alignments.jsonl")
    predictions = load_alignments(pred_path)
    references = {u.id: u.gt_boundaries for u in load_corpus(args.ref)}
    report = evaluate(predictions, references)
    with open(args.report, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, sort_keys=True, indent=2)
        fh.write("\n")
    print(render_report({"model": report}), end="")
    print(f"report written to {args.report}")
    return 0


def _cmd_gradcheck(args):
    results = gradient_suite(seeds_per_op=args.seeds)
    ok = True
    for name, err in results.items():
        passed = err < 1e-4
        ok = ok and passed
        print(f"{name:28s} {err:.3e}  {'pass' if passed else 'FAIL'}")
    micro = micro_model_check()
    passed = micro < 1e-3
    ok = ok and passed
    print(f"{'end_to_end_micro':28s} {micro:.3e}  {'pass' if passed else 'FAIL'}")
    return 0 if ok else 2


def _cmd_ablate(args):
    config, schedule = _load_train_config(args.config)
    train_corpus = load_corpus(args.corpus)
    eval_corpus = load_corpus(args.eval_corpus) if args.eval_corpus else train_corpus
    seeds = tuple(int(s) for s in args.seeds.split(","))
    result = run_ablation(config, schedule, train_corpus, eval_corpus, args.variant, seeds)
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump(result, fh, sort_keys=True, indent=2)
        fh.write("\n")
    rows = {}
    for pair in result["per_seed"]:
        rows[f"baseline seed {pair['seed']}"] = pair["baseline"]
        rows[f"{args.variant} seed {pair['seed']}"] = pair["variant"]
    print(render_report(rows), end="")
    print(f"ablation report written to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="neufa", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic corpus")
    p.add_argument("--spec", required=True, help="JSON file of corpus fields")
    p.add_argument("--out", required=True, help="corpus file to write")
    p.add_argument("--frame-shift", type=float, default=10.0, help="frame shift in ms")
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="run the two-stage training schedule")
    p.add_argument("--config", required=True, help='JSON file: {"model": ..., "schedule": ...}')
    p.add_argument("--corpus", required=True, help="training corpus file")
    p.add_argument("--out", required=True, help="directory for checkpoint and history")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("align", help="write TextGrids, attention CSVs, alignments.jsonl")
    p.add_argument("--ckpt", required=True, help="trained checkpoint file")
    p.add_argument("--corpus", required=True, help="corpus file to align")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_align)

    p = sub.add_parser("eval", help="score predicted boundaries against a reference corpus")
    p.add_argument("--pred", required=True,
                   help="alignments.jsonl file, or an align output directory")
    p.add_argument("--ref", required=True, help="reference corpus file")
    p.add_argument("--report", required=True, help="JSON report file to write")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference verification of the backward pass")
    p.add_argument("--seeds", type=int, default=20, help="seeds per operation check")
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("ablate", help="train a baseline/variant pair and compare")
    p.add_argument("--variant", required=True, choices=sorted(ABLATION_VARIANTS))
    p.add_argument("--config", required=True, help='JSON file: {"model": ..., "schedule": ...}')
    p.add_argument("--corpus", required=True, help="training corpus file")
    p.add_argument("--eval-corpus", default=None, help="held-out corpus (default: training corpus)")
    p.add_argument("--out", required=True, help="JSON report file to write")
    p.add_argument("--seeds", default="0", help="comma-separated seed list")
    p.set_defaults(func=_cmd_ablate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except _ArgumentError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (TrainingDivergence, RuntimeError, OSError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
