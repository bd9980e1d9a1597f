"""Command-line front end.

Subcommands: train, eval, grid, toy, params, ablate-length.  Every
command that writes a report also renders matplotlib figures next to
the CSV/JSON output (suppress with --no-figures).  Exit codes: 0
success, 1 configuration error, 2 data error, 3 numerical failure.
"""

import argparse
import csv
import dataclasses
import json
import os
import sys

from .errors import ConfigError, DataError, NumericalError
from .experiments import (
    ExperimentConfig,
    ablate_length,
    dataset_label,
    eval_experiment,
    grid_experiment,
    run_experiment,
    toy_experiment,
)
from .data import save_csv
from .models import ExpertSpec, save_params
from .training import param_count

# Reference totals for the 7-channel, s=p=336, t=4 configuration,
# heads 1 through 6 (rmlp at hidden width 512).
_REFERENCE_COUNTS = {
    "dlinear": (226464, 453208, 679959, 906808, 1133755, 1360800),
    "rlinear": (113246, 226758, 340277, 453894, 567609, 681422),
    "rmlp": (458158, 571670, 685189, 798806, 912521, 1026334),
}

_KINDS = ("dlinear", "rlinear", "rmlp")


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems as ConfigError (exit 1)."""

    def error(self, message):
        raise ConfigError(message)


def _parse_seeds(text):
    seeds = []
    for part in text.split(","):
        try:
            seed = int(part)
        except ValueError:
            raise ConfigError(f"seed {part!r} is not an integer")
        if not 0 <= seed < 2 ** 64:
            raise ConfigError(f"seed {seed} is outside the u64 range")
        seeds.append(seed)
    if not seeds:
        raise ConfigError("at least one seed is required")
    return seeds


def _single_seed(args, config):
    seeds = _parse_seeds(args.seed) if args.seed else list(config.seeds)
    if len(seeds) != 1:
        raise ConfigError(
            f"this command runs exactly one seed, got {len(seeds)}"
        )
    return seeds[0]


def _load_config(args):
    config = ExperimentConfig.from_json(args.config)
    if getattr(args, "dropout_granularity", None):
        config = dataclasses.replace(
            config, dropout_granularity=args.dropout_granularity
        )
    return config


def _write_json(path, payload):
    with open(path, "w") as handle:
        json.dump(payload, handle, indent=2, sort_keys=True)
        handle.write("\n")


def _write_csv(path, rows):
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerows(rows)


def _figure_dir(out_dir):
    path = os.path.join(out_dir, "figures")
    os.makedirs(path, exist_ok=True)
    return path


def cmd_train(args):
    config = _load_config(args)
    seed = _single_seed(args, config)
    result = run_experiment(config, seed)
    os.makedirs(args.out, exist_ok=True)
    report = result.report.as_dict()
    _write_json(os.path.join(args.out, "report.json"), report)
    save_params(result.params, os.path.join(args.out, "model.bin"))
    if not args.no_figures:
        from . import figures

        figures.save_loss_curves(
            result.report.epochs,
            os.path.join(_figure_dir(args.out), "loss_curves.png"),
        )
    print(
        f"train: dataset={dataset_label(config)} model={config.model} "
        f"n={config.n} seed={seed} best_epoch={result.report.best_epoch} "
        f"test_mse={result.report.test_mse!r} "
        f"test_mae={result.report.test_mae!r}"
    )
    return 0


def cmd_eval(args):
    config = _load_config(args)
    seed = _single_seed(args, config)
    metrics = eval_experiment(config, seed, args.model)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        _write_json(os.path.join(args.out, "eval.json"), metrics)
    print(
        f"eval: dataset={dataset_label(config)} model={config.model} "
        f"val_mse={metrics['val_mse']!r} test_mse={metrics['test_mse']!r} "
        f"test_mae={metrics['test_mae']!r}"
    )
    return 0


def cmd_grid(args):
    config = _load_config(args)
    seeds = _parse_seeds(args.seed) if args.seed else list(config.seeds)
    outcome = grid_experiment(config, seeds, parallelism=args.jobs)
    os.makedirs(args.out, exist_ok=True)
    _write_csv(os.path.join(args.out, "summary.csv"), outcome["summary"])
    for entry in outcome["per_seed"]:
        _write_json(
            os.path.join(args.out, f"grid_{entry['seed']}.json"), entry
        )
    if not args.no_figures:
        from . import figures

        figures.save_grid_summary(
            outcome["summary"],
            os.path.join(_figure_dir(args.out), "grid_summary.png"),
        )
    for row in outcome["summary"][1:]:
        print("grid: " + ",".join(row))
    return 0


def cmd_toy(args):
    result = toy_experiment(args.seed, sigma=args.sigma)
    os.makedirs(args.out, exist_ok=True)
    report = {
        "seed": result["seed"],
        "sigma": result["sigma"],
        "single": result["single_report"].as_dict(),
        "mole": result["mole_report"].as_dict(),
        "single_test_mse_raw": result["single_test_mse_raw"],
        "mole_test_mse_raw": result["mole_test_mse_raw"],
    }
    _write_json(os.path.join(args.out, "toy_report.json"), report)

    heads = result["trace_weights"].shape[1]
    weight_rows = [["date"] + [f"head{i}" for i in range(heads)]]
    for stamp, row in zip(result["trace_dates"], result["trace_weights"]):
        weight_rows.append(
            [stamp.strftime("%Y-%m-%d %H:%M:%S")] + [repr(v) for v in row]
        )
    _write_csv(os.path.join(args.out, "toy_weights.csv"), weight_rows)

    boundary_rows = [["date", "truth", "single", "mole"]]
    for i, stamp in enumerate(result["boundary_dates"]):
        boundary_rows.append([
            stamp.strftime("%Y-%m-%d %H:%M:%S"),
            repr(result["boundary_truth"][i]),
            repr(result["boundary_single"][i]),
            repr(result["boundary_mole"][i]),
        ])
    _write_csv(os.path.join(args.out, "toy_boundary.csv"), boundary_rows)
    save_csv(result["raw"], os.path.join(args.out, "toy_data.csv"))

    if not args.no_figures:
        from . import figures

        fig_dir = _figure_dir(args.out)
        raw = result["raw"]
        figures.save_series_preview(
            raw.timestamps[:336],
            raw.values[0, :336],
            os.path.join(fig_dir, "toy_preview.png"),
            title="toy series, first two weeks",
        )
        figures.save_toy_boundary(
            result["boundary_dates"],
            result["boundary_truth"],
            result["boundary_single"],
            result["boundary_mole"],
            os.path.join(fig_dir, "toy_boundary.png"),
        )
        figures.save_toy_weights(
            result["trace_dates"],
            result["trace_weights"],
            os.path.join(fig_dir, "toy_weights.png"),
        )

    single_mse = result["single_report"].test_mse
    mole_mse = result["mole_report"].test_mse
    print(
        f"toy: single_test_mse={single_mse!r} mole_test_mse={mole_mse!r} "
        f"ratio={mole_mse / single_mse!r}"
    )
    return 0


def reference_check_failures(t=4):
    """Closed-form counts vs the embedded reference table; [] means all match."""
    failures = []
    for kind, expected_row in sorted(_REFERENCE_COUNTS.items()):
        for n, expected in enumerate(expected_row, start=1):
            spec = ExpertSpec(kind=kind, c=7, s=336, p=336, n=n)
            got = param_count(spec, t)
            if got != expected:
                failures.append((kind, n, expected, got))
    return failures


def cmd_params(args):
    kinds = [args.model] if args.model else list(_KINDS)
    print("kind,n,params")
    for kind in kinds:
        for n in range(args.n_min, args.n_max + 1):
            spec = ExpertSpec(
                kind=kind, c=args.c, s=args.s, p=args.p, n=n,
                mlp_hidden=args.hidden,
            )
            print(f"{kind},{n},{param_count(spec, args.t)}")
    if args.check:
        failures = reference_check_failures()
        if failures:
            for kind, n, expected, got in failures:
                print(
                    f"check: MISMATCH {kind} n={n} expected {expected} "
                    f"got {got}",
                    file=sys.stderr,
                )
            raise NumericalError(
                f"{len(failures)} parameter counts diverge from the "
                f"reference table"
            )
        print("check: all 18 reference counts match")
    return 0


def cmd_ablate(args):
    config = _load_config(args)
    seed = _single_seed(args, config)
    lengths = None
    if args.lengths:
        try:
            lengths = [int(part) for part in args.lengths.split(",")]
        except ValueError:
            raise ConfigError(f"bad --lengths value {args.lengths!r}")
    modes = None
    if args.gating_modes or args.dropouts:
        gatings = (
            args.gating_modes.split(",")
            if args.gating_modes
            else ["TimeIn", "RandomIn", "RandomOut"]
        )
        try:
            dropouts = (
                [float(part) for part in args.dropouts.split(",")]
                if args.dropouts
                else [0.0, 0.2]
            )
        except ValueError:
            raise ConfigError(f"bad --dropouts value {args.dropouts!r}")
        modes = [(mode, r) for mode in gatings for r in dropouts]
    rows = ablate_length(
        config, seed, lengths=lengths, modes=modes, parallelism=args.jobs
    )
    os.makedirs(args.out, exist_ok=True)
    _write_csv(os.path.join(args.out, "ablate.csv"), rows)
    if not args.no_figures:
        from . import figures

        figures.save_ablation(
            rows, os.path.join(_figure_dir(args.out), "ablate.png")
        )
    print(f"ablate-length: wrote {len(rows) - 1} cells to {args.out}")
    return 0


def build_parser():
    parser = _Parser(
        prog="molecast",
        description="Mixture-of-linear-experts time series forecasting.",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    def add_common(sub, jobs=False):
        sub.add_argument("--config", required=True, help="JSON config path")
        sub.add_argument("--seed", help="seed override: u64[,u64...]")
        sub.add_argument(
            "--dropout-granularity", choices=("entry", "head"),
            help="head-dropout granularity override",
        )
        if jobs:
            sub.add_argument(
                "--jobs", type=int, default=1,
                help="worker processes for independent cells",
            )

    train = commands.add_parser("train", help="run one training job")
    add_common(train)
    train.add_argument("--out", default="runs/train", help="output directory")
    train.add_argument("--no-figures", action="store_true")
    train.set_defaults(func=cmd_train)

    evaluate = commands.add_parser("eval", help="score a serialized model")
    add_common(evaluate)
    evaluate.add_argument("--model", required=True, help="model.bin path")
    evaluate.add_argument("--out", help="optional output directory")
    evaluate.set_defaults(func=cmd_eval)

    grid = commands.add_parser("grid", help="hyperparameter grid per seed")
    add_common(grid, jobs=True)
    grid.add_argument("--out", default="runs/grid", help="output directory")
    grid.add_argument("--no-figures", action="store_true")
    grid.set_defaults(func=cmd_grid)

    toy = commands.add_parser("toy", help="synthetic regime-switch study")
    toy.add_argument("--seed", type=int, default=2021)
    toy.add_argument("--sigma", type=float, default=0.1)
    toy.add_argument("--out", default="runs/toy", help="output directory")
    toy.add_argument("--no-figures", action="store_true")
    toy.set_defaults(func=cmd_toy)

    params = commands.add_parser("params", help="parameter-count table")
    params.add_argument("--model", choices=_KINDS)
    params.add_argument("--c", type=int, default=7)
    params.add_argument("--s", type=int, default=336)
    params.add_argument("--p", type=int, default=336)
    params.add_argument("--t", type=int, default=4)
    params.add_argument("--hidden", type=int, default=512)
    params.add_argument("--n-min", type=int, default=1)
    params.add_argument("--n-max", type=int, default=6)
    params.add_argument(
        "--check", action="store_true",
        help="verify the 18 embedded reference counts",
    )
    params.set_defaults(func=cmd_params)

    ablate = commands.add_parser(
        "ablate-length", help="input-length x gating-mode sweep at p=100"
    )
    add_common(ablate, jobs=True)
    ablate.add_argument("--out", default="runs/ablate", help="output directory")
    ablate.add_argument("--lengths", help="comma-separated input lengths")
    ablate.add_argument("--gating-modes", help="comma-separated gating modes")
    ablate.add_argument("--dropouts", help="comma-separated dropout rates")
    ablate.add_argument("--no-figures", action="store_true")
    ablate.set_defaults(func=cmd_ablate)

    return parser


def entrypoint(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(entrypoint())
