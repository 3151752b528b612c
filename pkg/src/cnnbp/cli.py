"""Command-line interface.

Subcommands cover the pipeline stages: gen (synthetic traces), sim
(baseline only), screen, train, deploy, eval, crossval, report.
Exit codes: 0 success, 2 completed-but-empty result, 1 failure.
"""

from __future__ import annotations

import argparse
import sys
from datetime import datetime, timezone
from pathlib import Path

from . import synth
from .baselines import (
    H2pScreenConfig,
    PerceptronConfig,
    PerceptronPredictor,
    TageLite,
    TageLiteConfig,
    read_stats_csv,
    screen_h2ps,
    simulate_baseline,
    write_stats_csv,
)
from .cnn import TrainConfig, init_model, load_model, save_model, train
from .deploy import DeployedHelper, load_helper, save_helper
from .encoder import EncoderConfig, collect_training_set
from .harness import (
    emit_report,
    eval_deployed_on_trace,
    eval_fp_on_trace,
    load_experiment_config,
    report_from_yaml,
    run_crossval,
    summary_text,
)
from .trace import read_trace, write_trace

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_EMPTY = 2


def _make_baseline(name: str):
    if name == "tage":
        return TageLite(TageLiteConfig())
    if name == "perceptron":
        return PerceptronPredictor(PerceptronConfig())
    raise SystemExit(f"unknown baseline {name!r}")


def _parse_ip(text: str) -> int:
    return int(text, 16) if text.lower().startswith("0x") else int(text)


def cmd_gen(args) -> int:
    cfg = synth.SynthConfig(num_calls=args.calls, seed=args.seed)
    if args.workload == "corrloop":
        trace = synth.generate_corrloop_trace(cfg)
    else:
        trace = synth.generate_spread_trace(cfg, args.spread)
    write_trace(trace, args.out, args.format)
    print(f"wrote {len(trace)} records to {args.out}")
    return EXIT_OK


def cmd_sim(args) -> int:
    trace = read_trace(args.trace)
    stats = simulate_baseline(trace, _make_baseline(args.baseline))
    write_stats_csv(stats, args.out)
    total = sum(s.predictions for s in stats.values())
    wrong = sum(s.mispredictions for s in stats.values())
    print(f"{len(stats)} static branches, {total} predictions, "
          f"accuracy {1 - wrong / total:.4f}; stats -> {args.out}")
    return EXIT_OK


def cmd_screen(args) -> int:
    if args.stats:
        stats = read_stats_csv(args.stats)
        instructions = args.instructions
    else:
        trace = read_trace(args.trace)
        stats = simulate_baseline(trace, _make_baseline(args.baseline))
        instructions = trace.meta.instruction_count
    h2ps = screen_h2ps(stats, H2pScreenConfig(), instructions)
    for ip in h2ps:
        print(f"0x{ip:x}")
    return EXIT_OK if h2ps else EXIT_EMPTY


def cmd_train(args) -> int:
    trace = read_trace(args.trace)
    enc = EncoderConfig()
    mode = "ternary" if args.mode == "tp" else "fp"
    cfg = TrainConfig(epochs=args.epochs, mode=mode, filters=args.filters, seed=args.seed)
    dataset = collect_training_set(trace, _parse_ip(args.h2p), enc, cfg.sample_budget, args.seed)
    model = init_model(enc.p, cfg.filters, enc.history_len, mode=mode, q=cfg.q, seed=args.seed)
    result = train(model, dataset, cfg)
    save_model(model, args.out)
    print(f"trained {mode} model on {len(dataset)} samples, "
          f"final loss {result.losses[-1]:.4f}; model -> {args.out}")
    return EXIT_OK


def cmd_deploy(args) -> int:
    model = load_model(args.model)
    if model.mode != "ternary":
        raise SystemExit("only ternary models deploy to the 2-bit engine")
    helper = DeployedHelper.from_model(model)
    save_helper(helper, args.out)
    print(f"helper blob -> {args.out} ({Path(args.out).stat().st_size} bytes)")
    return EXIT_OK


def cmd_eval(args) -> int:
    trace = read_trace(args.trace)
    ip = _parse_ip(args.h2p)
    if args.helper:
        stats = eval_deployed_on_trace(load_helper(args.helper), trace, ip)
    else:
        model = load_model(args.model)
        if model.mode == "ternary":
            stats = eval_deployed_on_trace(DeployedHelper.from_model(model), trace, ip)
        else:
            stats = eval_fp_on_trace(model, trace, ip, EncoderConfig())
    if stats.predictions == 0:
        print("branch does not occur in trace")
        return EXIT_EMPTY
    print(f"{stats.predictions} occurrences, {stats.mispredictions} mispredictions, "
          f"accuracy {stats.accuracy:.4f}")
    return EXIT_OK


def cmd_crossval(args) -> int:
    config = load_experiment_config(args.config)
    if args.out:
        config.output_dir = args.out
    if args.seed is not None:
        config.seed = args.seed
    report = run_crossval(config)
    stamp = datetime.now(timezone.utc).isoformat()
    paths = emit_report(report, config.output_dir, timestamp=stamp)
    print(summary_text(report))
    print(f"report -> {paths['report']}")
    if report["empty"]:
        print("warning: no eligible hard branches", file=sys.stderr)
        return EXIT_EMPTY
    return EXIT_OK


def cmd_report(args) -> int:
    report = report_from_yaml(Path(args.report).read_text(encoding="utf-8"))
    print(summary_text(report), end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cnnbp", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic trace")
    p.add_argument("--workload", choices=("corrloop", "spread"), default="corrloop")
    p.add_argument("--calls", type=int, default=10_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--spread", type=int, default=25)
    p.add_argument("--format", choices=("binary", "text"), default="binary")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("sim", help="simulate a baseline predictor over a trace")
    p.add_argument("--trace", required=True)
    p.add_argument("--baseline", choices=("tage", "perceptron"), default="tage")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sim)

    p = sub.add_parser("screen", help="list hard-to-predict branches")
    p.add_argument("--trace")
    p.add_argument("--stats", help="reuse a stats CSV instead of simulating")
    p.add_argument("--instructions", type=int, help="instruction count for --stats")
    p.add_argument("--baseline", choices=("tage", "perceptron"), default="tage")
    p.set_defaults(func=cmd_screen)

    p = sub.add_parser("train", help="train a helper model for one branch")
    p.add_argument("--trace", required=True)
    p.add_argument("--h2p", required=True)
    p.add_argument("--mode", choices=("fp", "tp"), default="fp")
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--filters", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("deploy", help="fold a ternary model into a helper blob")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_deploy)

    p = sub.add_parser("eval", help="evaluate a model or helper blob on a trace")
    p.add_argument("--trace", required=True)
    p.add_argument("--h2p", required=True)
    p.add_argument("--model")
    p.add_argument("--helper")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("crossval", help="run the k-fold cross-workload evaluation")
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_crossval)

    p = sub.add_parser("report", help="print the summary of an existing report")
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_report)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
