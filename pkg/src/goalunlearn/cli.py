"""``goalunlearn`` command line: every subcommand writes into ``--out`` with a manifest."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import typing
from dataclasses import fields, replace
from pathlib import Path

from .corpus import write_jsonl
from .harness import (
    Bundle,
    ExperimentConfig,
    StageError,
    _csv,
    _json,
    ablate_layers,
    build_corpora,
    emit_plot_data,
    evaluate,
    load_or_pretrain,
    load_run,
    parse_groups,
    pretrain_base,
    probe_analysis,
    read_csv_rows,
    run_experiment,
    stage,
)
from .metrics import metric_report
from .model import load_checkpoint, save_checkpoint
from .probes import load_probe_bundle, save_probe_bundle, train_layer_probes

log = logging.getLogger("goalunlearn")


def _int_list(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def _parser_for(hint) -> typing.Callable[[str], object]:
    args = [a for a in typing.get_args(hint) if a is not type(None)]
    base = args[0] if args else hint
    if typing.get_origin(base) is list:
        return _int_list
    return {bool: _bool, int: int, float: float, str: str}[base]


def add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON config; explicit flags override it")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    hints = typing.get_type_hints(ExperimentConfig)
    for f in fields(ExperimentConfig):
        p.add_argument(f"--{f.name.replace('_', '-')}", dest=f.name, type=_parser_for(hints[f.name]),
                       default=None, help=f"default: {f.default!r}")


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    doc = json.loads(args.config.read_text()) if args.config else {}
    for f in fields(ExperimentConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            doc[f.name] = v
    return ExperimentConfig.from_dict(doc)


def cmd_gen_data(args) -> None:
    cfg = config_from_args(args).resolved()
    with stage("generate"):
        c = build_corpora(cfg)
    b = Bundle(args.out)
    b.write_text("config.json", _json(cfg.to_dict()))
    write_jsonl(b.add("facts.jsonl"), "fact", c.records)
    write_jsonl(b.add("forget_mcq.jsonl"), "mcq", c.forget_mcq)
    write_jsonl(b.add("utility_mcq.jsonl"), "mcq", c.utility_mcq)
    write_jsonl(b.add("toxicity.jsonl"), "sentence", c.pretrain_sentences)
    write_jsonl(b.add("forget_toxic.jsonl"), "sentence", c.forget_toxic)
    write_jsonl(b.add("probe_sentences.jsonl"), "sentence", c.probe_sentences)
    write_jsonl(b.add("prompts.jsonl"), "tokens", c.prompts)
    write_jsonl(b.add("retain.jsonl"), "tokens", c.retain)
    b.write_text("vocab.json", _json({"tokens": c.vocab.tokens, "groups": c.vocab.groups}))
    b.write_manifest()


def cmd_pretrain(args) -> None:
    cfg = config_from_args(args).resolved()
    with stage("generate"):
        c = build_corpora(cfg)
    with stage("pretrain"):
        model, history = pretrain_base(cfg, c)
    b = Bundle(args.out)
    b.write_text("config.json", _json(cfg.to_dict()))
    save_checkpoint(model, b.add("base.json"))
    b.write_text("pretrain_losses.csv", _csv(("epoch", "loss"), [{"epoch": i + 1, "loss": l} for i, l in enumerate(history)]))
    with stage("evaluate"):
        counts = {"knowledge": cfg.n_forget_facts, "toxicity": cfg.n_prompts}
        base_eval = {g: metric_report(evaluate(model, replace(cfg, goal=g, method=None), c), cfg.r0, n, cfg.seed)
                     for g, n in counts.items()}
    b.write_text("base_metrics.json", _json(base_eval))
    b.write_manifest()


def cmd_unlearn(args) -> None:
    cfg = config_from_args(args)
    rep = run_experiment(cfg, out=args.out, save_model=args.save_model)
    print(json.dumps(rep.metrics(), sort_keys=True))


def cmd_probe_train(args) -> None:
    cfg = config_from_args(args).resolved()
    layers = args.probe_layers if args.probe_layers is not None else list(range(cfg.n_layers))
    with stage("generate"):
        c = build_corpora(cfg)
    with stage("pretrain"):
        base = load_or_pretrain(cfg, c)
    with stage("probes"):
        probes = train_layer_probes(base, c.probe_sentences, layers, cfg.probe_l2, cfg.seed)
    b = Bundle(args.out)
    b.write_text("config.json", _json(cfg.to_dict()))
    save_probe_bundle(probes, b.add("probes.json"))
    b.write_manifest()
    for p in probes:
        print(f"layer {p.layer}: held-out AUC {p.train_auc:.4f}")


def cmd_probe_analyze(args) -> None:
    with stage("probe-analyze"):
        probes = load_probe_bundle(args.probes)
        b = Bundle(args.out)
        probe_analysis(probes, b, args.bins)
        b.write_manifest()


def cmd_eval(args) -> None:
    cfg = config_from_args(args).resolved()
    with stage("generate"):
        c = build_corpora(cfg)
    with stage("evaluate"):
        model = load_checkpoint(args.model)
        result = evaluate(model, cfg, c)
    n = cfg.n_forget_facts if cfg.goal == "knowledge" else cfg.n_prompts
    b = Bundle(args.out)
    b.write_text("metrics.json", _json(metric_report(result, cfg.r0, n, cfg.seed)))
    b.write_manifest()
    print(json.dumps(metric_report(result, cfg.r0, n, cfg.seed), sort_keys=True))


def cmd_ablate(args) -> None:
    cfg = config_from_args(args)
    rows = ablate_layers(cfg, parse_groups(args.groups), out=args.out)
    for r in rows:
        print(r)


def cmd_report(args) -> None:
    with stage("report"):
        runs = [load_run(d) for d in args.runs]
        ablation = read_csv_rows(args.ablation) if args.ablation else None
        probes = load_probe_bundle(args.probes) if args.probes else None
        emit_plot_data(runs, args.out, ablation, probes)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="goalunlearn", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, fn, help_ in (
        ("gen-data", cmd_gen_data, "write the synthetic corpora as JSONL"),
        ("pretrain", cmd_pretrain, "pretrain a base model and save its checkpoint"),
        ("unlearn", cmd_unlearn, "run one unlearning experiment"),
        ("eval", cmd_eval, "evaluate a saved model checkpoint"),
        ("ablate", cmd_ablate, "run one unlearning experiment per layer group"),
    ):
        p = sub.add_parser(name, help=help_)
        add_config_flags(p)
        p.set_defaults(func=fn)
        if name == "unlearn":
            p.add_argument("--save-model", action="store_true", help="also write model.json")
        if name == "eval":
            p.add_argument("--model", type=Path, required=True, help="checkpoint to evaluate")
        if name == "ablate":
            p.add_argument("--groups", required=True, help='layer groups, e.g. "0;4;8;0,1,3,4,5,7,8,9,11"')

    probe = sub.add_parser("probe", help="toxicity probes")
    psub = probe.add_subparsers(dest="probe_command", required=True)
    pt = psub.add_parser("train", help="train per-layer probes on the frozen base model")
    add_config_flags(pt)
    pt.add_argument("--probe-layers", type=_int_list, default=None, help="default: all layers")
    pt.set_defaults(func=cmd_probe_train)
    pa = psub.add_parser("analyze", help="similarity matrix and weight histograms")
    pa.add_argument("--probes", type=Path, required=True)
    pa.add_argument("--out", type=Path, required=True)
    pa.add_argument("--bins", type=int, default=20)
    pa.set_defaults(func=cmd_probe_analyze)

    rp = sub.add_parser("report", help="collect run directories into plot-ready data")
    rp.add_argument("runs", nargs="+", type=Path, help="run directories written by 'unlearn'")
    rp.add_argument("--ablation", type=Path, help="ablation.csv to include")
    rp.add_argument("--probes", type=Path, help="probes.json for the similarity matrix")
    rp.add_argument("--out", type=Path, required=True)
    rp.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with stage(args.command if args.command != "probe" else f"probe {args.probe_command}"):
            args.func(args)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
