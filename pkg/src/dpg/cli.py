"""Command-line entry point.

Commands: synth, train, eval, pseudo-inspect, validate, ablate. Every run
echoes its fully resolved configuration beside the outputs, and every output
file is a pure function of (config, input files, seed): running a command
twice produces byte-identical files.

Config files are flat ``key = value`` text ('#' starts a comment). Keys
mirror the config dataclasses; unknown keys are rejected. List values are
comma-separated, booleans are true/false, and "none" clears an optional key.
"""

from __future__ import annotations

import argparse
import configparser
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace

from . import __version__
from .data import (DomainKind, EmbeddingSet, Label, SynthConfig, concat_sets,
                   read_embeddings, synth_generate, write_embeddings)
from .errors import ConfigError, EngineError
from .metrics import compute_report, emit_report, score_set
from .model import load_checkpoint
from .pseudo import build_bank, generate_pseudo_labels
from .trainer import TrainConfig, train

_SYNTH_KINDS = {
    "dim": "int", "n_source_per_class": "int", "n_target_per_class": "int",
    "n_eval_per_class": "int", "n_domains": "int", "class_separation": "float",
    "domain_shift": "floats", "noise": "float", "hard_fake_fraction": "float",
    "seed": "int",
}

_TRAIN_KINDS = {
    "epochs_phase1": "int", "epochs_phase2": "int", "batch_source": "int",
    "batch_target": "int", "lr": "float", "weight_decay": "float",
    "align_weight": "float", "source_cls_weight": "float",
    "source_align_weight": "float", "distill_weight": "float",
    "bank_threshold": "float", "curriculum_start": "float",
    "curriculum_end": "float", "tau": "float", "real_weight": "float",
    "seed": "int", "use_text_alignment": "bool", "use_pseudo_labels": "bool",
    "use_distill": "bool", "threshold_rule": "str", "bank_rule": "str",
    "anchor_file": "optional_str",
}


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {raw!r}")


def _coerce(kind: str, raw: str, key: str):
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            return _parse_bool(raw)
        if kind == "floats":
            return tuple(float(part) for part in raw.split(",") if part.strip())
        if kind == "optional_str":
            return None if raw.lower() == "none" else raw
        return raw
    except ValueError as exc:
        raise ConfigError(f"invalid value for {key}: {raw!r}") from exc


def _read_config_file(path, kinds: dict) -> dict:
    parser = configparser.ConfigParser()
    with open(path, "r", encoding="utf-8") as fh:
        parser.read_string("[config]\n" + fh.read(), source=str(path))
    out = {}
    for key, raw in parser.items("config"):
        if key not in kinds:
            raise ConfigError(f"unknown config key {key!r} in {path}")
        out[key] = _coerce(kinds[key], raw, key)
    return out


def _apply_sets(values: dict, sets, kinds: dict) -> None:
    for item in sets or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        key = key.strip()
        if key not in kinds:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _coerce(kinds[key], raw, key)


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "none"
    if isinstance(value, (tuple, list)):
        return ", ".join(repr(float(v)) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_resolved(values: dict, path) -> None:
    lines = [f"{key} = {_format_value(values[key])}" for key in sorted(values)]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def _thread_cap() -> int:
    raw = os.environ.get("DPG_THREADS")
    if raw is None:
        return os.cpu_count() or 1
    try:
        cap = int(raw)
    except ValueError as exc:
        raise ConfigError(f"DPG_THREADS must be an integer, got {raw!r}") from exc
    if cap < 1:
        raise ConfigError("DPG_THREADS must be >= 1")
    return cap


def _build_synth_config(args) -> SynthConfig:
    values = {}
    if args.config:
        values.update(_read_config_file(args.config, _SYNTH_KINDS))
    _apply_sets(values, getattr(args, "set", None), _SYNTH_KINDS)
    if args.seed is not None:
        values["seed"] = args.seed
    try:
        cfg = SynthConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    cfg.validate()
    return cfg


def _build_train_config(args) -> TrainConfig:
    values = {}
    if args.config:
        values.update(_read_config_file(args.config, _TRAIN_KINDS))
    _apply_sets(values, getattr(args, "set", None), _TRAIN_KINDS)
    if args.seed is not None:
        values["seed"] = args.seed
    if getattr(args, "toggle_tca", None) is not None:
        values["use_text_alignment"] = _parse_bool(args.toggle_tca)
    if getattr(args, "toggle_cpg", None) is not None:
        values["use_pseudo_labels"] = _parse_bool(args.toggle_cpg)
    if getattr(args, "toggle_cd", None) is not None:
        values["use_distill"] = _parse_bool(args.toggle_cd)
    if getattr(args, "threshold_rule", None):
        values["threshold_rule"] = args.threshold_rule
    if getattr(args, "bank_rule", None):
        values["bank_rule"] = args.bank_rule
    if getattr(args, "anchors", None):
        values["anchor_file"] = args.anchors
    try:
        cfg = TrainConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    cfg.validate()
    return cfg


def _load_many(paths) -> EmbeddingSet:
    return concat_sets([read_embeddings(p) for p in paths])


def _cmd_synth(args) -> int:
    cfg = _build_synth_config(args)
    os.makedirs(args.out, exist_ok=True)
    result = synth_generate(cfg)
    write_embeddings(result.source, os.path.join(args.out, "source.dpge"))
    for k, (tgt, ev) in enumerate(zip(result.targets, result.evals)):
        write_embeddings(tgt, os.path.join(args.out, f"target_{k}.dpge"))
        write_embeddings(ev, os.path.join(args.out, f"eval_{k}.dpge"))
    _write_resolved(cfg.__dict__ | {"domain_shift": cfg.shifts()},
                    os.path.join(args.out, "synth.resolved.cfg"))
    print(f"wrote source ({len(result.source)} records) and "
          f"{cfg.n_domains} target/eval domains to {args.out}")
    return 0


def _cmd_train(args) -> int:
    cfg = _build_train_config(args)
    source = read_embeddings(args.source)
    target = _load_many(args.target) if args.target else None
    evals = [read_embeddings(p) for p in args.eval]
    os.makedirs(args.out, exist_ok=True)
    _write_resolved(cfg.resolved_dict(), os.path.join(args.out, "train.resolved.cfg"))
    result = train(cfg, source, target, evals, out_dir=args.out,
                   resume_from=args.resume, stop_after_epoch=args.stop_after_epoch)
    if result.report is not None:
        print(f"mean target frame AUC {result.report.mean_frame_auc:.6f} "
              f"(overall {result.report.overall.frame_auc:.6f})")
    else:
        print(f"stopped after {result.state.epoch} epochs (checkpoint saved)")
    return 0


def _cmd_eval(args) -> int:
    state, config_hash, _ = load_checkpoint(args.checkpoint)
    samples = []
    for path in args.data:
        samples.extend(score_set(state, read_embeddings(path)))
    report = compute_report(samples, config_hash, args.seed)
    os.makedirs(args.out, exist_ok=True)
    emit_report(report, args.out)
    print(f"mean target frame AUC {report.mean_frame_auc:.6f} "
          f"(overall {report.overall.frame_auc:.6f})")
    return 0


def _cmd_pseudo_inspect(args) -> int:
    state, _, _ = load_checkpoint(args.checkpoint)
    target = _load_many(args.target)
    bank = build_bank(state, target, args.bank_threshold)
    decisions = generate_pseudo_labels(state, target, bank, args.lt_threshold,
                                       threshold_rule=args.threshold_rule,
                                       bank_rule=args.bank_rule)
    lines = [json.dumps(d.to_dict(), sort_keys=True) for d in decisions]
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")
    else:
        for line in lines:
            print(line)
    return 0


def _cmd_validate(args) -> int:
    status = 0
    for path in args.paths:
        try:
            eset = read_embeddings(path)
        except EngineError as exc:
            print(f"{path}: INVALID: {exc}")
            status = 1
            continue
        kinds = {k.name.lower(): 0 for k in DomainKind}
        labels = {"real": 0, "fake": 0, "unknown": 0}
        tags = set()
        for rec in eset.records:
            kinds[rec.domain_kind.name.lower()] += 1
            labels[Label(rec.label).name.lower()] += 1
            tags.add(rec.dataset_tag)
        kind_summary = " ".join(f"{k}={v}" for k, v in kinds.items())
        label_summary = " ".join(f"{k}={v}" for k, v in labels.items())
        print(f"{path}: OK dim={eset.dim} records={len(eset)} {kind_summary} "
              f"{label_summary} tags={','.join(sorted(tags))}")
    return status


_ABLATE_COMBOS = [(bool(i & 4), bool(i & 2), bool(i & 1)) for i in range(8)]


def _cmd_ablate(args) -> int:
    base = _build_train_config(args)
    source = read_embeddings(args.source)
    target = _load_many(args.target)
    evals = [read_embeddings(p) for p in args.eval]
    os.makedirs(args.out, exist_ok=True)
    _write_resolved(base.resolved_dict(), os.path.join(args.out, "ablate.resolved.cfg"))

    def run_combo(combo):
        tca, cpg, cd = combo
        cfg = replace(base, use_text_alignment=tca, use_pseudo_labels=cpg, use_distill=cd)
        return train(cfg, source, target, evals).report

    with ThreadPoolExecutor(max_workers=min(len(_ABLATE_COMBOS), _thread_cap())) as pool:
        reports = list(pool.map(run_combo, _ABLATE_COMBOS))

    tags = sorted(reports[0].per_tag)
    header = ["tca", "cpg", "cd", "mean_frame_auc"] + [f"frame_auc_{t}" for t in tags]
    rows = [",".join(header)]
    for (tca, cpg, cd), report in zip(_ABLATE_COMBOS, reports):
        cells = [str(int(tca)), str(int(cpg)), str(int(cd)),
                 f"{report.mean_frame_auc:.6f}"]
        cells += [f"{report.per_tag[t].frame_auc:.6f}" for t in tags]
        rows.append(",".join(cells))
        combo_dir = os.path.join(args.out, f"combo_tca{int(tca)}_cpg{int(cpg)}_cd{int(cd)}")
        emit_report(report, combo_dir)
    with open(os.path.join(args.out, "ablate.csv"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(rows) + "\n")
    print(f"wrote {len(_ABLATE_COMBOS)} ablation rows to {os.path.join(args.out, 'ablate.csv')}")
    return 0


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("--toggle-tca", metavar="BOOL", help="text-guided alignment component")
    p.add_argument("--toggle-cpg", metavar="BOOL", help="curriculum pseudo-labeling component")
    p.add_argument("--toggle-cd", metavar="BOOL", help="cross-domain distillation component")
    p.add_argument("--threshold-rule", choices=["ge", "paper-le"],
                   help="accept when confidence >= (ge) or <= (paper-le) the threshold")
    p.add_argument("--bank-rule", choices=["paper", "nearest"],
                   help="fake-distance cutoff rule or nearest sub-bank rule")
    p.add_argument("--anchors", help="anchor-initialization DPGE file")
    p.add_argument("--source", required=True)
    p.add_argument("--target", nargs="+", default=[])
    p.add_argument("--eval", nargs="+", default=[])
    p.add_argument("--out", required=True)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dpg",
                                     description="deterministic domain-adaptation engine "
                                                 "over embedding vectors")
    parser.add_argument("--version", action="version", version=f"dpg {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic benchmark files")
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("train", help="run the two-phase training pipeline")
    _add_train_flags(p)
    p.add_argument("--resume", help="continue from a checkpoint")
    p.add_argument("--stop-after-epoch", type=int, default=None)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="score labeled embedding files with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", nargs="+", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("pseudo-inspect", help="dump pseudo-label decisions as JSON lines")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--target", nargs="+", required=True)
    p.add_argument("--bank-threshold", type=float, default=0.9)
    p.add_argument("--lt-threshold", type=float, default=0.85)
    p.add_argument("--threshold-rule", choices=["ge", "paper-le"], default="ge")
    p.add_argument("--bank-rule", choices=["paper", "nearest"], default="paper")
    p.add_argument("--out")
    p.set_defaults(func=_cmd_pseudo_inspect)

    p = sub.add_parser("validate", help="check DPGE files and print a summary")
    p.add_argument("paths", nargs="+")
    p.set_defaults(func=_cmd_validate)

    p = sub.add_parser("ablate", help="run the 2^3 component-toggle grid")
    _add_train_flags(p)
    p.set_defaults(func=_cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (EngineError, OSError) as exc:
        payload = {"error": type(exc).__name__, "message": str(exc)}
        print(json.dumps(payload, sort_keys=True), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
