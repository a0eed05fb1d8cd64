"""Command-line entry point: ``sspo <subcommand> [flags]``.

Subcommands: gen-data, clean, sft, sspo, eval, score-trace, inspect.
Every subcommand that writes files also writes ``<name>_manifest.json`` next
to them. Errors go to stderr as ``error[<class>]: message``.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
import time
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .cleaning import RestructureError, clean_records, parse_field_map, read_raw, write_clean
from .judge import JudgeError, judge_request, mean_scores
from .model import ModelConfig, PolicyParams, load_checkpoint, save_checkpoint
from .rewards import composite_reward
from .synth import QUERY, SynthRecord, TaskSpec, generate_dataset, read_jsonl, vocabulary_texts, write_jsonl
from .tokenizer import Tokenizer
from .trace import make_label_set, parse_trace
from .train import TrainConfig, greedy_decode, make_examples, train_sft, train_sspo
from .metrics import set_metrics, ssv_metric

log = logging.getLogger("sspo")


class CLIError(Exception):
    kind = "runtime"


class InputError(CLIError):
    kind = "input"


class ConfigError(CLIError):
    kind = "config"


class NumericError(CLIError):
    kind = "numeric"


# ---------------------------------------------------------------- helpers


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_jsonl(path: Path, rows) -> None:
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def _manifest(args, outputs: list[Path], inputs: list[Path], started: float) -> None:
    config = {k: v for k, v in vars(args).items() if k not in ("func",)}
    manifest = {
        "subcommand": args.command,
        "config": config,
        "seed": args.seed,
        "inputs": {str(p): _sha256(p) for p in inputs if p.is_file()},
        "outputs": {str(p.name): _sha256(p) for p in outputs},
        "version": __version__,
        "started_at": started,
        "finished_at": time.time(),
    }
    _write_json(Path(args.out_dir) / f"{args.command.replace('-', '_')}_manifest.json", manifest)


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _train_config(args, **over) -> TrainConfig:
    fields = {f.name for f in dataclasses.fields(TrainConfig)}
    values = {k: getattr(args, k) for k in fields if getattr(args, k, None) is not None}
    values.update(over)
    try:
        return TrainConfig(**values)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _load_task(data_dir: Path) -> tuple[TaskSpec, dict[str, list[SynthRecord]]]:
    task_path = data_dir / "task.json"
    if not task_path.is_file():
        raise InputError(f"{task_path} not found (run gen-data first)")
    spec = TaskSpec.from_json(json.loads(task_path.read_text()))
    splits = {}
    for split in ("train", "val", "test"):
        p = data_dir / f"{split}.jsonl"
        splits[split] = read_jsonl(p) if p.is_file() else []
    return spec, splits


def _tokenizer_extra(tok: Tokenizer, spec: TaskSpec, cfg: TrainConfig | None) -> dict:
    return {
        "words": [w for w in tok.pieces if w.isalpha()],
        "query": QUERY,
        "labels": list(spec.labels),
        "train_config": dataclasses.asdict(cfg) if cfg else None,
    }


def _load_policy(path: Path) -> tuple[PolicyParams, Tokenizer, dict]:
    if not path.is_file():
        raise InputError(f"checkpoint {path} not found")
    try:
        params, extra = load_checkpoint(path)
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read checkpoint {path}: {exc}") from None
    return params, Tokenizer(extra["words"]), extra


def evaluate_texts(texts: Sequence[str], records: Sequence[SynthRecord], labels, judge: str | None = None) -> dict:
    traces = [parse_trace(t, labels) for t in texts]
    pairs = [(r.truth, t.answer_set) for r, t in zip(records, traces)]
    rewards = [composite_reward(t, r.truth) for r, t in zip(records, traces)]
    m = set_metrics(pairs)
    report = {
        "n": len(records),
        **m.summary(),
        "ssv": ssv_metric(traces),
        "mean_structure": float(np.mean([r.structure for r in rewards])),
        "mean_dice": float(np.mean([r.diagnosis for r in rewards])),
        "mean_total": float(np.mean([r.total for r in rewards])),
        "per_label": {k: dataclasses.asdict(v) for k, v in m.per_label.items()},
    }
    if judge:
        report["judge"] = mean_scores(judge_request(t, r.truth, judge) for r, t in zip(records, traces))
    return report


def _decode_split(params, tok, extra, records, max_new) -> list[str]:
    return greedy_decode(params, [r.signal for r in records], tok.encode(extra["query"]), tok, max_new=max_new)


# ------------------------------------------------------------ subcommands


def cmd_gen_data(args) -> int:
    started = time.time()
    labels = tuple(l.strip() for l in args.labels.split(",") if l.strip())
    spec = TaskSpec(
        labels=labels,
        activation_prob=args.activation_prob,
        noise_sigma=args.noise_sigma,
        min_labels=args.min_labels,
        max_labels=args.max_labels,
        n_train=args.n_train,
        n_val=args.n_val,
        n_test=args.n_test,
        seed=args.seed,
    )
    try:
        data = generate_dataset(spec)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    out = _out_dir(args)
    outputs = []
    for split, recs in data.items():
        p = out / f"{split}.jsonl"
        write_jsonl(p, recs)
        outputs.append(p)
    task = out / "task.json"
    _write_json(task, spec.to_json())
    outputs.append(task)
    _manifest(args, outputs, [], started)
    print(" ".join(f"{k}={len(v)}" for k, v in data.items()))
    return 0


def cmd_clean(args) -> int:
    started = time.time()
    src = Path(args.input)
    try:
        records = read_raw(src)
    except (OSError, ValueError, KeyError) as exc:
        raise InputError(f"cannot read {src}: {exc}") from None
    try:
        field_map = parse_field_map(args.alias or [])
        rows, report = clean_records(records, field_map)
    except RestructureError as exc:
        raise InputError(str(exc)) from None
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    out = _out_dir(args)
    clean_path = out / "clean.jsonl"
    report_path = out / "clean_report.json"
    write_clean(clean_path, rows)
    _write_json(report_path, report.to_json())
    print(report.describe(), file=sys.stderr)
    _manifest(args, [clean_path, report_path], [src], started)
    return 0


def _model_config(args, vocab_size: int, spec: TaskSpec) -> ModelConfig:
    try:
        return ModelConfig(
            vocab_size=vocab_size,
            channels=spec.n_channels,
            patch_len=args.patch_len,
            enc_layers=args.enc_layers,
            enc_dim=args.enc_dim,
            dec_layers=args.dec_layers,
            dec_dim=args.dec_dim,
            heads=args.heads,
            max_seq=args.max_seq,
            seed=args.seed,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def cmd_sft(args) -> int:
    started = time.time()
    data_dir = Path(args.data_dir)
    spec, splits = _load_task(data_dir)
    if not splits["train"]:
        raise InputError(f"{data_dir}/train.jsonl is missing or empty")
    cfg = _train_config(args)
    tok = Tokenizer.from_texts(vocabulary_texts(spec))
    params = PolicyParams.init(_model_config(args, len(tok), spec))
    examples = make_examples(splits["train"], tok, QUERY)
    out = _out_dir(args)
    try:
        params, history = train_sft(examples, cfg, params)
    except FloatingPointError as exc:
        raise NumericError(str(exc)) from None
    ckpt = out / "sft.ckpt"
    extra = _tokenizer_extra(tok, spec, cfg)
    save_checkpoint(ckpt, params, extra)
    log_path = out / "sft_log.jsonl"
    _write_jsonl(log_path, history)
    outputs = [ckpt, log_path]
    if splits["val"] and not args.skip_eval:
        texts = _decode_split(params, tok, extra, splits["val"], cfg.max_new)
        report = evaluate_texts(texts, splits["val"], spec.label_vocab)
        eval_path = out / "sft_eval.json"
        _write_json(eval_path, report)
        outputs.append(eval_path)
        print(f"val: mean_structure={report['mean_structure']:.4f} sample_f1={report['sample_f1']:.4f} "
              f"micro_f1={report['micro_f1']:.4f} ssv={report['ssv']:.2f}")
    print(f"sft: final loss {history[-1]['loss']:.4f} -> {ckpt}")
    _manifest(args, outputs, [data_dir / "train.jsonl"], started)
    return 0


def cmd_sspo(args) -> int:
    started = time.time()
    data_dir = Path(args.data_dir)
    spec, splits = _load_task(data_dir)
    if not splits["train"]:
        raise InputError(f"{data_dir}/train.jsonl is missing or empty")
    cfg = _train_config(args)
    sft_path = Path(args.sft_checkpoint)
    params, tok, extra = _load_policy(sft_path)
    examples = make_examples(splits["train"], tok, extra["query"])
    out = _out_dir(args)
    try:
        params, history = train_sspo(examples, cfg, params, tok, spec.label_vocab)
    except FloatingPointError as exc:
        raise NumericError(str(exc)) from None
    ckpt = out / "sspo.ckpt"
    save_checkpoint(ckpt, params, {**extra, "train_config": dataclasses.asdict(cfg)})
    log_path = out / "sspo_log.jsonl"
    _write_jsonl(log_path, history)
    outputs = [ckpt, log_path]
    if splits["val"] and not args.skip_eval:
        texts = _decode_split(params, tok, extra, splits["val"], cfg.max_new)
        report = evaluate_texts(texts, splits["val"], spec.label_vocab)
        eval_path = out / "sspo_eval.json"
        _write_json(eval_path, report)
        outputs.append(eval_path)
        print(f"val: mean_dice={report['mean_dice']:.4f} ssv={report['ssv']:.2f} micro_f1={report['micro_f1']:.4f}")
    if history:
        print(f"sspo: {len(history)} steps, last mean_total {history[-1]['mean_total']:.4f} -> {ckpt}")
    else:
        print(f"sspo: no optimizer steps -> {ckpt}")
    _manifest(args, outputs, [data_dir / "train.jsonl", sft_path], started)
    return 0


def cmd_eval(args) -> int:
    started = time.time()
    data_dir = Path(args.data_dir)
    spec, splits = _load_task(data_dir)
    records = splits[args.split]
    if not records:
        raise InputError(f"split {args.split!r} is empty")
    if args.replay_teacher:
        texts = [r.teacher_trace for r in records]
        inputs = [data_dir / f"{args.split}.jsonl"]
    else:
        if not args.checkpoint:
            raise InputError("eval needs --checkpoint or --replay-teacher")
        ckpt = Path(args.checkpoint)
        params, tok, extra = _load_policy(ckpt)
        texts = _decode_split(params, tok, extra, records, args.max_new)
        inputs = [data_dir / f"{args.split}.jsonl", ckpt]
    try:
        report = evaluate_texts(texts, records, spec.label_vocab, judge=args.judge)
    except JudgeError as exc:
        raise CLIError(f"judge: {exc}") from None
    report["split"] = args.split
    out = _out_dir(args)
    report_path = out / "eval_report.json"
    _write_json(report_path, report)
    pred_path = out / "eval_traces.jsonl"
    _write_jsonl(pred_path, ({"id": r.id, "labels": sorted(r.truth), "output": t} for r, t in zip(records, texts)))
    print(f"{args.split}: n={report['n']}")
    print(f"micro  P={report['micro_precision']:.4f} R={report['micro_recall']:.4f} F1={report['micro_f1']:.4f}")
    print(f"macro  F1={report['macro_f1']:.4f}  sample F1={report['sample_f1']:.4f}")
    print(f"SSV={report['ssv']:.2f}  reward structure={report['mean_structure']:.4f} "
          f"dice={report['mean_dice']:.4f} total={report['mean_total']:.4f}")
    if "judge" in report:
        print("judge " + " ".join(f"{k}={v:.2f}" for k, v in report["judge"].items()))
    _manifest(args, [report_path, pred_path], inputs, started)
    return 0


def cmd_score_trace(args) -> int:
    if args.trace_file and args.trace_file != "-":
        try:
            text = Path(args.trace_file).read_text()
        except OSError as exc:
            raise InputError(str(exc)) from None
    else:
        text = sys.stdin.read()
    truth = make_label_set(args.truth.split(","))
    vocab = make_label_set(args.labels.split(",")) | truth
    r = composite_reward(parse_trace(text, vocab), truth)
    print(f"structure {r.structure:.4f}")
    print(f"diagnosis {r.diagnosis:.4f}")
    print(f"total {r.total:.4f}")
    return 0


def cmd_inspect(args) -> int:
    path = Path(args.path)
    if path.is_dir():
        spec, splits = _load_task(path)
        print(json.dumps({k: len(v) for k, v in splits.items()}))
        print(json.dumps({"labels": list(spec.labels), "noise_sigma": spec.noise_sigma, "seed": spec.seed}))
        return 0
    params, tok, extra = _load_policy(path)
    print(json.dumps(dataclasses.asdict(params.cfg), sort_keys=True))
    print(f"parameters: {len(params)}  vocabulary: {len(tok)}  sha256: {_sha256(path)}")
    return 0


# ----------------------------------------------------------------- parser


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--patch-len", dest="patch_len", type=int, default=16)
    p.add_argument("--enc-layers", dest="enc_layers", type=int, default=2)
    p.add_argument("--enc-dim", dest="enc_dim", type=int, default=32)
    p.add_argument("--dec-layers", dest="dec_layers", type=int, default=2)
    p.add_argument("--dec-dim", dest="dec_dim", type=int, default=32)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--max-seq", dest="max_seq", type=int, default=96)


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    # flag names mirror TrainConfig fields
    for f in dataclasses.fields(TrainConfig):
        if f.name == "seed":
            continue
        p.add_argument(f"--{f.name.replace('_', '-')}", dest=f.name, type=type(f.default), default=None)
    p.add_argument("--epochs", type=int, default=None, help="alias for --sft-epochs / --rl-epochs")
    p.add_argument("--skip-eval", dest="skip_eval", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out-dir", dest="out_dir", default=".")
    common.add_argument("--config", default=None, help="key=value file overriding flag defaults")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="sspo", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="write a synthetic dataset")
    p.add_argument("--labels", default="NORM,MI,STTC,CD,HYP")
    p.add_argument("--n-train", dest="n_train", type=int, default=2000)
    p.add_argument("--n-val", dest="n_val", type=int, default=200)
    p.add_argument("--n-test", dest="n_test", type=int, default=200)
    p.add_argument("--noise-sigma", dest="noise_sigma", type=float, default=TaskSpec.noise_sigma)
    p.add_argument("--activation-prob", dest="activation_prob", type=float, default=TaskSpec.activation_prob)
    p.add_argument("--min-labels", dest="min_labels", type=int, default=1)
    p.add_argument("--max-labels", dest="max_labels", type=int, default=3)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("clean", parents=[common], help="clean raw analysis records")
    p.add_argument("--input", required=True)
    p.add_argument("--alias", action="append", help="field alias, e.g. waveform=morphology")
    p.set_defaults(func=cmd_clean)

    p = sub.add_parser("sft", parents=[common], help="cold-start supervised tuning")
    p.add_argument("--data-dir", dest="data_dir", required=True)
    _add_model_flags(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_sft)

    p = sub.add_parser("sspo", parents=[common], help="group-relative RL from an SFT checkpoint")
    p.add_argument("--data-dir", dest="data_dir", required=True)
    p.add_argument("--sft-checkpoint", dest="sft_checkpoint", required=True)
    _add_train_flags(p)
    p.set_defaults(func=cmd_sspo)

    p = sub.add_parser("eval", parents=[common], help="greedy-decode a split and report metrics")
    p.add_argument("--data-dir", dest="data_dir", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--replay-teacher", dest="replay_teacher", action="store_true")
    p.add_argument("--judge", default=None, help="stub, tcp://host:port or http(s) URL")
    p.add_argument("--max-new", dest="max_new", type=int, default=TrainConfig.max_new)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("score-trace", parents=[common], help="reward one trace")
    p.add_argument("--trace-file", dest="trace_file", default="-")
    p.add_argument("--truth", required=True, help="comma-separated labels")
    p.add_argument("--labels", default="NORM,MI,STTC,CD,HYP", help="label vocabulary")
    p.set_defaults(func=cmd_score_trace)

    p = sub.add_parser("inspect", parents=[common], help="summarize a checkpoint or data dir")
    p.add_argument("path")
    p.set_defaults(func=cmd_inspect)
    return parser


def _read_config(path: str) -> dict[str, str]:
    values = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise InputError(f"cannot read config {path}: {exc}") from None
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise InputError(f"{path}:{n}: expected key=value")
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def _parse(parser: argparse.ArgumentParser, argv: Sequence[str] | None) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if not args.config:
        return args
    overrides = _read_config(args.config)
    sub = parser._subparsers._group_actions[0].choices[args.command]  # type: ignore[union-attr]
    known = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, raw in overrides.items():
        if key not in known:
            raise InputError(f"{args.config}: unknown key {key!r} for {args.command}")
        action = known[key]
        conv = action.type or (lambda s: s.lower() in ("1", "true", "yes") if isinstance(action.default, bool) else s)
        defaults[key] = conv(raw)
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = _parse(parser, argv)
        if getattr(args, "epochs", None) is not None:
            if args.command == "sft" and args.sft_epochs is None:
                args.sft_epochs = args.epochs
            if args.command == "sspo" and args.rl_epochs is None:
                args.rl_epochs = args.epochs
        logging.basicConfig(
            level=logging.INFO if args.verbose else logging.WARNING,
            format="%(levelname)s %(name)s: %(message)s",
        )
        return args.func(args)
    except CLIError as exc:
        print(f"error[{exc.kind}]: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
