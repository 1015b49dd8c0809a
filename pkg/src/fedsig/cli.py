"""Command-line entry point.

    fedsig <experiment-kind> [--config cfg.json] [--preset desk] [--out DIR]
           [--seed N] [field overrides ...]
    fedsig plot --out DIR

Exit code 0 on success; on failure a machine-readable error JSON is printed
to stderr and the exit code is nonzero.  Precedence for settings: CLI flag
over config file over preset over built-in default.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .harness import (
    EXPERIMENT_KINDS,
    ExperimentConfig,
    apply_desk_preset,
    apply_kind_defaults,
    run_experiment,
)

# argparse dest -> location in the nested config dict
_OVERRIDES: dict[str, tuple[str, ...]] = {
    "out": ("out",),
    "seed": ("seed",),
    "instances": ("instances",),
    "sweep": ("sweep",),
    "train_per_class": ("train_per_class",),
    "agent_users": ("agent_users",),
    "mode": ("mode",),
    "data_source": ("data", "source"),
    "num_users": ("data", "num_users"),
    "genuine_per_user": ("data", "genuine_per_user"),
    "forged_per_user": ("data", "forged_per_user"),
    "length_min": ("data", "length_min"),
    "length_max": ("data", "length_max"),
    "task1_dir": ("data", "task1_dir"),
    "task2_dir": ("data", "task2_dir"),
    "kernel_size": ("model", "kernel_size"),
    "channel_widths": ("model", "channel_widths"),
    "max_length": ("model", "max_length"),
    "num_agents": ("fed", "num_agents"),
    "local_epochs": ("fed", "local_epochs"),
    "iterations": ("fed", "iterations"),
    "local_batch_size": ("fed", "local_batch_size"),
    "learning_rate": ("fed", "learning_rate"),
    "init_ratio": ("fed", "init_ratio"),
    "local_optimizer": ("fed", "local_optimizer"),
    "init_epochs": ("fed", "init_epochs"),
    "init_batch_size": ("fed", "init_batch_size"),
    "init_learning_rate": ("fed", "init_learning_rate"),
    "optimizer": ("centralized", "optimizer"),
    "epochs": ("centralized", "epochs"),
    "batch_size": ("centralized", "batch_size"),
    "centralized_learning_rate": ("centralized", "learning_rate"),
}


def _comma_list(conv):
    def parse(text: str):
        return [conv(part) for part in text.split(",") if part.strip()]

    return parse


def _add_experiment_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="JSON config file")
    parser.add_argument("--preset", choices=["desk"], help="desk = synthetic corpus, shrunken model")
    parser.add_argument("--out", help="output directory (default: results)")
    parser.add_argument("--seed", type=int, help="master seed")
    parser.add_argument("--instances", type=int, help="training instances per sweep value")
    parser.add_argument("--sweep", help="comma-separated sweep values")
    parser.add_argument("--no-figures", action="store_true", help="skip figure rendering")
    parser.add_argument("--train-per-class", type=int, help="training samples per user per class")
    parser.add_argument("--agent-users", type=int, help="size of the agent user pool")
    parser.add_argument("--mode", choices=["centralized", "federated"], help="single-run flavor")

    data = parser.add_argument_group("data")
    data.add_argument("--data-source", choices=["synthetic", "svc"])
    data.add_argument("--num-users", type=int)
    data.add_argument("--genuine-per-user", type=int)
    data.add_argument("--forged-per-user", type=int)
    data.add_argument("--length-min", type=int)
    data.add_argument("--length-max", type=int)
    data.add_argument("--task1-dir")
    data.add_argument("--task2-dir")

    model = parser.add_argument_group("model")
    model.add_argument("--kernel-size", type=int)
    model.add_argument("--channel-widths", type=_comma_list(int), metavar="A,B,C")
    model.add_argument("--max-length", type=int)

    fed = parser.add_argument_group("federated")
    fed.add_argument("--num-agents", type=int)
    fed.add_argument("--local-epochs", type=int)
    fed.add_argument("--iterations", type=int)
    fed.add_argument("--local-batch-size", type=int)
    fed.add_argument("--learning-rate", type=float)
    fed.add_argument("--init-ratio", type=float)
    fed.add_argument("--local-optimizer", choices=["sgd", "adamax"])
    fed.add_argument("--init-epochs", type=int)
    fed.add_argument("--init-batch-size", type=int)
    fed.add_argument("--init-learning-rate", type=float)

    central = parser.add_argument_group("centralized")
    central.add_argument("--optimizer", choices=["sgd", "adamax"])
    central.add_argument("--epochs", type=int)
    central.add_argument("--batch-size", type=int)
    central.add_argument("--centralized-learning-rate", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedsig",
        description="Federated online signature verification experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for kind in EXPERIMENT_KINDS:
        p = sub.add_parser(kind, help=f"run the {kind} experiment")
        _add_experiment_flags(p)
    plot = sub.add_parser("plot", help="re-render figures from an output directory")
    plot.add_argument("--out", required=True, help="experiment output directory")
    return parser


def _parse_sweep(kind: str, text: str) -> list:
    conv = float if kind == "fl-init-ratio" else int
    values = _comma_list(conv)(text)
    if not values:
        raise ValueError("sweep must contain at least one value")
    return values


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    raw: dict = {}
    if args.config:
        raw = json.loads(Path(args.config).read_text())
    if args.preset == "desk":
        raw = apply_desk_preset(raw, args.command)
    raw = apply_kind_defaults(raw, args.command)
    for dest, path in _OVERRIDES.items():
        value = getattr(args, dest, None)
        if value is None:
            continue
        if dest == "sweep":
            value = _parse_sweep(args.command, value)
        node = raw
        for key in path[:-1]:
            node = node.setdefault(key, {})
        node[path[-1]] = value
    if args.no_figures:
        raw["figures"] = False
    raw["kind"] = args.command
    return ExperimentConfig.from_dict(raw)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "plot":
            from .plots import render_experiment

            written = render_experiment(args.out)
            for path in written:
                print(path)
            return 0
        cfg = config_from_args(args)
        out_dir = run_experiment(cfg)
        summary = json.loads((out_dir / "summary.json").read_text())
        print(json.dumps({"out": str(out_dir), "results": summary["results"]}, indent=2, sort_keys=True))
        return 0
    except Exception as exc:  # surface every failure as machine-readable JSON
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
