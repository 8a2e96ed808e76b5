"""Command-line surface: train, caption, eval, gradcheck, datagen.

Exit codes: 0 success, 2 usage error, 1 runtime error. All randomness
flows from ``--seed`` through named sub-streams, so identical invocations
produce identical artifacts.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import data, decoding, gradcheck, metrics, model, training

VARIANTS = [v.value for v in model.ModelVariant]

_DIM_KEYS = ("embed_dim", "encoder_dim", "decoder_dim", "align_dim",
             "readout_dim", "tanh_on_cell_output")
_CFG_KEYS = tuple(f.name for f in dataclasses.fields(training.TrainingConfig))


class UsageError(Exception):
    pass


def _parse_value(raw: str):
    lowered = raw.lower()
    if lowered in ("true", "false"):
        return lowered == "true"
    for cast in (int, float):
        try:
            return cast(raw)
        except ValueError:
            pass
    return raw


def _parse_overrides(pairs: list[str]) -> tuple[dict, dict]:
    dim_over, cfg_over = {}, {}
    for pair in pairs:
        if "=" not in pair:
            raise UsageError(f"--set expects key=value, got {pair!r}")
        key, raw = pair.split("=", 1)
        value = _parse_value(raw)
        if key in _DIM_KEYS:
            dim_over[key] = value
        elif key in _CFG_KEYS:
            cfg_over[key] = value
        else:
            raise UsageError(f"unknown --set key {key!r}")
    return dim_over, cfg_over


def cmd_train(args) -> int:
    dim_over, cfg_over = _parse_overrides(args.set or [])
    manifest = data.load_manifest(args.manifest)
    cfg = training.TrainingConfig(optimizer=args.optimizer, seed=args.seed, **cfg_over)
    dims = model.ModelDims(feature_dim=manifest.feature_dim, **dim_over)
    result = training.train_loop(manifest, model.ModelVariant(args.variant), cfg, dims)
    out = Path(args.out)
    model.save_weights(out, result.model, result.vocab)
    history_path = Path(args.history) if args.history else Path(str(out) + ".history.jsonl")
    with open(history_path, "w") as f:
        for entry in result.history:
            f.write(json.dumps(entry) + "\n")
    print(f"wrote {out}, {model.sidecar_path(out)}, {history_path}")
    return 0


def cmd_caption(args) -> int:
    params, vocab = model.load_weights(args.model)
    if vocab is None:
        raise ValueError(f"{args.model}: sidecar has no vocabulary")
    manifest = data.load_manifest(args.manifest)
    if manifest.feature_dim != params.dims.feature_dim:
        raise ValueError(
            f"manifest feature_dim {manifest.feature_dim} != model feature_dim "
            f"{params.dims.feature_dim}"
        )
    if args.day:
        days = [d for d in manifest.days if d.id == args.day]
        if not days:
            raise ValueError(f"day {args.day!r} not found in manifest")
    else:
        days = manifest.split_days(args.split)
    cfg = decoding.DecodeConfig(beam_size=args.beam, max_length=args.max_length)
    lines = []
    for day in days:
        for cap in decoding.caption_day(params, day, cfg, vocab):
            lines.append(json.dumps({
                "day_id": cap.day_id, "event_id": cap.event_id,
                "caption": cap.text, "logprob": cap.logprob,
            }))
    text = "\n".join(lines) + ("\n" if lines else "")
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_eval(args) -> int:
    manifest = data.load_manifest(args.manifest)
    hyps: dict[str, list[str]] = {}
    with open(args.hyp) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            doc = json.loads(line)
            hyps[doc["event_id"]] = data.tokenize(doc["caption"])
    if not hyps:
        raise ValueError(f"{args.hyp}: no hypothesis lines")
    corpus: metrics.EvalCorpus = {}
    missing = []
    for day in manifest.split_days(args.split):
        for ev in day.events:
            if ev.id not in hyps:
                missing.append(ev.id)
                continue
            corpus[ev.id] = (hyps[ev.id], [data.tokenize(c) for c in ev.captions])
    if missing:
        raise ValueError(f"missing hypotheses for events: {', '.join(missing)}")
    report = metrics.evaluate_corpus(corpus)
    print(json.dumps({
        "bleu4": report.bleu4,
        "cider": report.cider,
        "per_sentence_cider": report.per_sentence_cider,
    }, indent=1))
    return 0


def cmd_gradcheck(args) -> int:
    variants = (list(model.ModelVariant) if args.variant == "all"
                else [model.ModelVariant(args.variant)])
    worst = 0.0
    for variant in variants:
        config = gradcheck.GradCheckConfig(variant=variant, seed=args.seed, eps=args.eps)
        report = gradcheck.finite_diff_report(config)
        print(f"variant={variant.value} eps={args.eps:g}")
        for group, err in report.items():
            label = "full model" if group == "all" else group
            print(f"  {label:<24} max_rel_err={err:.3e}")
        worst = max(worst, report["all"])
    print(f"worst={worst:.3e} threshold=1e-04 {'OK' if worst < 1e-4 else 'FAIL'}")
    return 0 if worst < 1e-4 else 1


def cmd_datagen(args) -> int:
    manifest = data.synth_generate(
        args.out, seed=args.seed, n_days=args.days,
        events_per_day=args.events_per_day, feature_dim=args.feature_dim,
        n_activities=args.activities,
    )
    stats = data.corpus_stats(manifest)
    cols = ("train", "val", "test", "total")
    print(f"{'':<14}" + "".join(f"{c:>10}" for c in cols))
    for row in ("days", "images", "events", "captions"):
        print(f"#{row:<13}" + "".join(f"{stats[c][row]:>10}" for c in cols))
    print(f"manifest: {Path(args.out) / 'manifest.json'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tma",
        description="Temporally-linked multi-input attention captioner",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a variant and write TMAW weights")
    p.add_argument("--manifest", required=True)
    p.add_argument("--variant", required=True, choices=VARIANTS)
    p.add_argument("--optimizer", default="adadelta", choices=["adadelta", "adam"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--history", default=None,
                   help="history JSONL path (default: <out>.history.jsonl)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a training or dimension setting")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("caption", help="chained beam decoding over days")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--split", choices=list(data.SPLITS))
    group.add_argument("--day")
    p.add_argument("--beam", type=int, default=10)
    p.add_argument("--max-length", type=int, default=30)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_caption)

    p = sub.add_parser("eval", help="score hypotheses with BLEU-4 and CIDEr")
    p.add_argument("--hyp", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", required=True, choices=list(data.SPLITS))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    p.add_argument("--variant", default="all", choices=VARIANTS + ["all"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eps", type=float, default=1e-5)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("datagen", help="generate a synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--days", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--activities", type=int, default=8)
    p.add_argument("--feature-dim", type=int, default=16)
    p.add_argument("--events-per-day", type=int, default=8)
    p.set_defaults(func=cmd_datagen)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (data.ManifestError, data.FeatureFileError, model.WeightFileError,
            training.TrainingDiverged, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
