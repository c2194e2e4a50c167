"""Command-line front end: validate, train, simulate, report.

One executable with subcommands sharing the config plumbing. Every run
echoes its resolved manifest into the output directory, and a later run
can start from that manifest (explicit flags still win), so any artifact
can be reproduced from the files sitting next to it. All randomness
flows from ``--seed``; nothing is derived from the clock.

Exit codes are a stable contract: 0 success, 1 validation failure, 2 I/O
failure, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, dataclass

import numpy as np

from .allocation import allocate, naive_group_allocation
from .config import ModelConfig, load_config, preset, save_config, validate
from .layer import GroupedExpertLayer, count_parameters, load_weights, save_weights
from .reports import (
    render_difficulty_figure,
    render_histogram_figure,
    render_load_figure,
    write_difficulty_table,
    write_histogram_table,
    write_load_table,
    write_metrics,
)
from .routing import route
from .simulator import (
    TrainingDiverged,
    difficulty_analysis,
    generate_stream,
    replay_load_sim,
    run_load_sim,
    train_toy,
)

__all__ = ["RunManifest", "main", "entrypoint"]

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_IO = 2
EXIT_NUMERICAL = 3


@dataclass
class RunManifest:
    """Everything needed to reproduce a command, echoed beside its outputs."""

    command: str
    config: str | None
    preset: str | None
    seed: int
    tokens: int
    steps: int
    lr: float
    gpus: int
    plan: str
    scheme: str
    ablate_losses: bool
    workers: int
    out: str | None
    trace: str | None = None
    weights: str | None = None

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True)
            fh.write("\n")


# flag defaults live in one table so manifest merging stays mechanical
_DEFAULTS = {
    "config": None,
    "preset": None,
    "seed": 0,
    "tokens": 100_000,
    "steps": 300,
    "lr": 1e-2,
    "gpus": 4,
    "plan": "strict",
    "scheme": "rank",
    "ablate_losses": False,
    "workers": 1,
    "out": None,
    "trace": None,
    "weights": None,
    "trace_out": None,
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hetmoe",
        description="grouped heterogeneous mixture-of-experts: routing, "
        "placement, and simulation tools",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=False):
        p.add_argument("--config", help="path to a config JSON file")
        p.add_argument("--preset", choices=("1B", "3B", "14B"), help="built-in scale")
        p.add_argument("--manifest", help="start from a saved manifest; flags override")
        p.add_argument("--seed", type=int, help="master seed (default 0)")
        p.add_argument("--out", required=False, help="output directory"
                       + (" (required)" if out_required else ""))

    v = sub.add_parser("validate", help="check a config against its invariants")
    common(v)

    t = sub.add_parser("train", help="toy-train a layer and emit artifacts")
    common(t, out_required=True)
    t.add_argument("--tokens", type=int, help="stream length (default 100000)")
    t.add_argument("--steps", type=int, help="SGD steps (default 300)")
    t.add_argument("--lr", type=float, help="SGD learning rate (default 1e-2)")
    t.add_argument("--scheme", choices=("rank", "perplexity"))
    t.add_argument(
        "--ablate-losses",
        action="store_true",
        default=None,
        help="run a seed-matched pair with and without the group loss",
    )

    s = sub.add_parser("simulate", help="route a stream and report loads")
    common(s, out_required=True)
    s.add_argument("--weights", help="weights file from a train run")
    s.add_argument("--tokens", type=int)
    s.add_argument("--gpus", type=int)
    s.add_argument("--plan", choices=("strict", "relaxed", "naive"))
    s.add_argument("--scheme", choices=("rank", "perplexity"))
    s.add_argument("--workers", type=int)
    s.add_argument("--trace-out", dest="trace_out", help="write the routing trace here")

    r = sub.add_parser("report", help="replay a routing trace into tables")
    common(r, out_required=True)
    r.add_argument("--trace", help="routing trace to replay")
    r.add_argument("--gpus", type=int)
    r.add_argument("--plan", choices=("strict", "relaxed", "naive"))

    return parser


def _merge_args(args: argparse.Namespace) -> argparse.Namespace:
    """Fill unset flags from the manifest file, then from the defaults."""
    manifest = {}
    if getattr(args, "manifest", None):
        with open(args.manifest, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
    for key, fallback in _DEFAULTS.items():
        if getattr(args, key, None) is None:
            value = manifest.get(key, fallback)
            setattr(args, key, fallback if value is None else value)
    return args


def _load_model_config(args) -> tuple[ModelConfig, str | None, str | None]:
    if args.config and args.preset:
        raise ValueError("give either --config or --preset, not both")
    if args.config:
        cfg = load_config(args.config)
        violations = validate(cfg)
        if violations:
            raise ValueError("invalid config:\n  " + "\n  ".join(violations))
        return cfg, args.config, None
    name = args.preset or "1B"
    return preset(name), None, name


def _prepare_out(args) -> str:
    if not args.out:
        raise ValueError(f"{args.command} needs --out")
    os.makedirs(args.out, exist_ok=True)
    probe = os.path.join(args.out, ".write-probe")
    with open(probe, "w") as fh:
        fh.write("")
    os.remove(probe)
    return args.out


def _manifest_from(args, **extra) -> RunManifest:
    return RunManifest(
        command=args.command,
        config=args.config,
        preset=args.preset,
        seed=args.seed,
        tokens=args.tokens,
        steps=args.steps,
        lr=args.lr,
        gpus=args.gpus,
        plan=args.plan,
        scheme=args.scheme,
        ablate_losses=bool(args.ablate_losses),
        workers=args.workers,
        out=args.out,
        **extra,
    )


def _build_plan(cfg: ModelConfig, mode: str, gpus: int):
    if mode == "naive":
        return naive_group_allocation(cfg, gpus)
    return allocate(cfg, gpus, mode=mode)


def cmd_validate(args) -> int:
    try:
        cfg, source, name = _load_model_config(args)
    except ValueError as err:
        print(err, file=sys.stderr)
        return EXIT_VALIDATION
    label = source or f"preset {name}"
    print(f"{label}: ok ({cfg.num_groups} groups, widths {list(cfg.group_widths)})")
    if args.out:
        _prepare_out(args)
        save_config(cfg, os.path.join(args.out, "config.json"))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg, _, _ = _load_model_config(args)
    if args.steps < 1:
        raise ValueError("--steps must be at least 1")
    out = _prepare_out(args)
    layer = GroupedExpertLayer.init_random(
        cfg, np.random.default_rng([args.seed, 4]), dtype=np.float32
    )
    stream = generate_stream(cfg, args.scheme, args.tokens, args.seed)

    conditions = [("with_group_loss", True)]
    if args.ablate_losses:
        conditions.append(("without_group_loss", False))
    histograms = []
    for label, use_group in conditions:
        result = train_toy(
            layer,
            stream,
            use_group_loss=use_group,
            use_expert_loss=True,
            steps=args.steps,
            lr=args.lr,
            seed=args.seed,
        )
        suffix = f"_{label}" if args.ablate_losses else ""
        write_metrics(os.path.join(out, f"metrics{suffix}.jsonl"), result.history, args.seed)
        save_weights(os.path.join(out, f"weights{suffix}.bin"), result.layer)
        histograms.append(result.final_histogram)
        counts = count_parameters(result.layer)
        print(
            f"{label}: final task loss {result.history[-1].task_loss:.4f}, "
            f"routed params {counts.routed}"
        )

    write_histogram_table(os.path.join(out, "group_traffic.csv"), histograms, cfg, args.seed)
    render_histogram_figure(os.path.join(out, "group_traffic.png"), histograms, cfg)
    _manifest_from(args).save(os.path.join(out, "manifest.json"))
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg, _, _ = _load_model_config(args)
    out = _prepare_out(args)
    if args.weights:
        layer = load_weights(args.weights)
        if layer.config != cfg:
            raise ValueError(
                "weights were saved for a different config; pass the matching "
                "--config/--preset"
            )
        gating = layer.gating
    else:
        layer = None
        gating = GroupedExpertLayer.init_random(
            cfg, np.random.default_rng([args.seed, 4]), dtype=np.float32
        ).gating
    plan = _build_plan(cfg, args.plan, args.gpus)
    stream = generate_stream(cfg, args.scheme, args.tokens, args.seed)

    trace_fh = open(args.trace_out, "w", encoding="utf-8") if args.trace_out else None
    try:
        report = run_load_sim(
            gating, stream, plan, cfg, workers=args.workers, trace_fh=trace_fh
        )
    finally:
        if trace_fh is not None:
            trace_fh.close()
    write_load_table(os.path.join(out, "load_table.csv"), report, plan, cfg, args.seed)
    render_load_figure(os.path.join(out, "load_balance.png"), report, cfg)

    diff_stream = generate_stream(cfg, args.scheme, args.tokens, args.seed)
    diff = difficulty_analysis(gating, diff_stream, cfg, workers=args.workers)
    name = f"difficulty_{args.scheme}"
    write_difficulty_table(os.path.join(out, f"{name}.csv"), diff, cfg, args.seed)
    render_difficulty_figure(os.path.join(out, f"{name}.png"), diff, cfg)

    if layer is not None:
        probe, _ = stream.materialize(limit=4096)
        decisions = route(probe, gating, cfg)
        counts = count_parameters(layer, decisions)
        with open(os.path.join(out, "activated_params.json"), "w", encoding="utf-8") as fh:
            json.dump(
                {
                    "worst_case": counts.worst_activated,
                    "expected": counts.expected_activated,
                    "total_routed": counts.routed,
                    "shared": counts.shared,
                },
                fh,
                indent=2,
                sort_keys=True,
            )
            fh.write("\n")

    mean_std = float(report.per_group_std.mean())
    print(
        f"routed {report.token_count} tokens over {plan.num_gpus} gpus "
        f"({plan.mode} plan); mean per-group std {mean_std:.4f}"
    )
    _manifest_from(args, weights=args.weights, trace=args.trace_out).save(
        os.path.join(out, "manifest.json")
    )
    return EXIT_OK


def cmd_report(args) -> int:
    cfg, _, _ = _load_model_config(args)
    if not args.trace:
        raise ValueError("report needs --trace")
    out = _prepare_out(args)
    plan = _build_plan(cfg, args.plan, args.gpus)
    with open(args.trace, "r", encoding="utf-8") as fh:
        report = replay_load_sim(fh, plan, cfg)
    write_load_table(os.path.join(out, "load_table.csv"), report, plan, cfg, args.seed)
    render_load_figure(os.path.join(out, "load_balance.png"), report, cfg)
    print(
        f"replayed {report.token_count} tokens; mean per-group std "
        f"{float(report.per_group_std.mean()):.4f}"
    )
    _manifest_from(args, trace=args.trace).save(os.path.join(out, "manifest.json"))
    return EXIT_OK


_COMMANDS = {
    "validate": cmd_validate,
    "train": cmd_train,
    "simulate": cmd_simulate,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        args = _merge_args(args)
        return _COMMANDS[args.command](args)
    except (TrainingDiverged, FloatingPointError) as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as err:
        print(f"i/o failure: {err}", file=sys.stderr)
        return EXIT_IO
    except ValueError as err:
        # includes malformed JSON, which is bad content rather than bad I/O
        print(f"validation failure: {err}", file=sys.stderr)
        return EXIT_VALIDATION


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
