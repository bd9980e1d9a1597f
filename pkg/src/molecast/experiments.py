"""Experiment orchestration: configs, single runs, grids, ablations.

An ExperimentConfig is a flat JSON document naming a dataset and one
model/gating/optimization setting, plus an optional `grid` object that
turns chosen scalar fields into swept axes.  Runs derive every random
stream from the seed, so any result can be regenerated from its config
file alone.  Worker processes may execute grid and ablation cells out
of order; aggregation is always in enumeration order.
"""

import dataclasses
import json
import multiprocessing
import os
from dataclasses import dataclass

import numpy as np

from .autodiff import const
from .data import (
    ChannelScaler,
    RawDataset,
    WindowSet,
    load_csv,
    mark_features,
    split_dataset,
    toy_generate,
)
from .errors import ConfigError, DataError, NumericalError
from .mixture import GatingConfig, init_mole_params, mixing_weights, mole_forward
from .models import ExpertSpec, load_params
from .rng import Xoshiro256, derive_stream
from .training import TrainConfig, evaluate_windows, fit

_TOY_HOURS = 17520  # two years of hourly samples
_TOY_SIGMA = 0.1

_GRID_AXES = ("lr0", "n", "head_dropout", "batch_size")
_DEFAULT_GRID = {
    "lr0": [0.005, 0.01, 0.05],
    "n": [2, 3, 4, 5, 6],
    "head_dropout": [0.0, 0.2],
}

_ABLATE_LENGTHS = (6, 88, 170, 254, 336)
_ABLATE_PRED = 100
_ABLATE_MODES = tuple(
    (mode, r)
    for mode in ("TimeIn", "RandomIn", "RandomOut")
    for r in (0.0, 0.2)
)

_SUMMARY_HEADER = [
    "seed", "model", "dataset", "pred_len", "n_heads",
    "lr0", "dropout", "gating", "val_mse", "test_mse",
]


@dataclass
class ExperimentConfig:
    """One experiment setting; JSON fields match these names exactly."""

    dataset: str
    model: str
    s: int = 336
    p: int = 96
    n: int = 1
    lr0: float = 0.005
    lr_schedule: str = "halving"
    head_dropout: float = 0.0
    gating_mode: str = "TimeIn"
    dropout_granularity: str = "entry"
    seeds: tuple = (2021,)
    batch_size: int = 8
    epochs_max: int = 20
    patience: int = 3
    mlp_hidden: int = 512
    ma_kernel: int = 25
    grid: dict = None

    @classmethod
    def from_dict(cls, data):
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        known = {field.name for field in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config field(s): {', '.join(unknown)}")
        for required in ("dataset", "model"):
            if required not in data:
                raise ConfigError(f"config is missing required field {required!r}")
        kwargs = {}
        for field in (
            "dataset", "model", "lr_schedule", "gating_mode",
            "dropout_granularity",
        ):
            if field in data:
                kwargs[field] = _expect_str(field, data[field])
        for field in (
            "s", "p", "n", "batch_size", "epochs_max", "patience",
            "mlp_hidden", "ma_kernel",
        ):
            if field in data:
                kwargs[field] = _expect_int(field, data[field])
        for field in ("lr0", "head_dropout"):
            if field in data:
                kwargs[field] = _expect_float(field, data[field])
        if "seeds" in data:
            kwargs["seeds"] = _expect_seeds(data["seeds"])
        if "grid" in data and data["grid"] is not None:
            kwargs["grid"] = _expect_grid(data["grid"])
        return cls(**kwargs)

    @classmethod
    def from_json(cls, path):
        try:
            with open(path) as handle:
                data = json.load(handle)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}")
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path} is not valid JSON: {exc}")
        return cls.from_dict(data)

    def as_dict(self):
        described = dataclasses.asdict(self)
        described["seeds"] = list(self.seeds)
        if described["grid"] is None:
            del described["grid"]
        return described


def _expect_str(field, value):
    if not isinstance(value, str):
        raise ConfigError(f"config field {field!r} must be a string, got {value!r}")
    return value


def _expect_int(field, value):
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"config field {field!r} must be an integer, got {value!r}")
    return value


def _expect_float(field, value):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"config field {field!r} must be a number, got {value!r}")
    return float(value)


def _expect_seeds(value):
    if isinstance(value, int) and not isinstance(value, bool):
        value = [value]
    if not isinstance(value, list) or not value:
        raise ConfigError(f"config field 'seeds' must be a seed or nonempty list, got {value!r}")
    seeds = []
    for seed in value:
        seed = _expect_int("seeds", seed)
        if not 0 <= seed < 2 ** 64:
            raise ConfigError(f"seed {seed} is outside the u64 range")
        seeds.append(seed)
    return tuple(seeds)


def _expect_grid(value):
    if not isinstance(value, dict):
        raise ConfigError(f"config field 'grid' must be an object, got {value!r}")
    unknown = sorted(set(value) - set(_GRID_AXES))
    if unknown:
        raise ConfigError(f"unknown grid axis(es): {', '.join(unknown)}")
    grid = {}
    for axis, entries in value.items():
        if not isinstance(entries, list) or not entries:
            raise ConfigError(f"grid axis {axis!r} must be a nonempty list")
        if axis in ("lr0", "head_dropout"):
            grid[axis] = [_expect_float(axis, entry) for entry in entries]
        else:
            grid[axis] = [_expect_int(axis, entry) for entry in entries]
    return grid


def dataset_family(name):
    """Split-ratio family by dataset name: ett* datasets are 6:2:2."""
    return "ett" if name.lower().startswith("ett") else "other"


def dataset_label(config):
    if config.dataset == "toy":
        return "toy"
    return os.path.splitext(os.path.basename(config.dataset))[0]


@dataclass
class RunResult:
    """Everything a single training run leaves behind."""

    report: object
    params: object
    spec: ExpertSpec
    gating: GatingConfig
    scaler: ChannelScaler
    raw: RawDataset
    std: RawDataset
    views: tuple
    windows: tuple
    t: int


def _prepare(config, seed, sigma=_TOY_SIGMA):
    if config.dataset == "toy":
        raw = toy_generate(_TOY_HOURS, sigma, seed)
    else:
        raw = load_csv(config.dataset)
    views = split_dataset(raw, dataset_family(raw.name), config.s)
    scaler = ChannelScaler.fit(raw, views[0])
    std = RawDataset(
        name=raw.name,
        timestamps=raw.timestamps,
        values=scaler.apply(raw.values),
        granularity=raw.granularity,
        channel_names=raw.channel_names,
    )
    t = 4 if raw.granularity == "hourly" else 5
    spec = ExpertSpec(
        kind=config.model,
        c=raw.num_channels,
        s=config.s,
        p=config.p,
        n=config.n,
        mlp_hidden=config.mlp_hidden,
        ma_kernel=config.ma_kernel,
    )
    gating = GatingConfig(
        mode=config.gating_mode,
        head_dropout=config.head_dropout,
        granularity=config.dropout_granularity,
    )
    windows = tuple(WindowSet(std, view, config.s, config.p) for view in views)
    return raw, std, views, windows, scaler, spec, gating, t


def run_experiment(config, seed, sigma=_TOY_SIGMA):
    """Train one model per the config; every stream derives from seed."""
    raw, std, views, windows, scaler, spec, gating, t = _prepare(
        config, seed, sigma
    )
    params = init_mole_params(spec, t, Xoshiro256(derive_stream(seed, "init")))
    train_config = TrainConfig(
        lr0=config.lr0,
        seed=seed,
        batch_size=config.batch_size,
        epochs_max=config.epochs_max,
        patience=config.patience,
        lr_schedule=config.lr_schedule,
    )
    report = fit(train_config, spec, params, gating, *windows, t)
    return RunResult(
        report=report,
        params=params,
        spec=spec,
        gating=gating,
        scaler=scaler,
        raw=raw,
        std=std,
        views=views,
        windows=windows,
        t=t,
    )


def eval_experiment(config, seed, model_path):
    """Evaluate a serialized model on the config's val and test splits."""
    raw, std, views, windows, scaler, spec, gating, t = _prepare(config, seed)
    params = load_params(model_path)
    expected = init_mole_params(
        spec, t, Xoshiro256(derive_stream(seed, "shape-probe"))
    )
    expected_shapes = {name: value.shape for name, value in expected.items()}
    loaded_shapes = {name: value.shape for name, value in params.items()}
    if expected_shapes != loaded_shapes:
        raise DataError(
            f"{model_path} does not match the configured model: expected "
            f"{expected_shapes}, found {loaded_shapes}"
        )
    eval_rng = Xoshiro256(derive_stream(seed, "gating-eval"))
    val_mse, val_mae = evaluate_windows(
        spec, params, gating, windows[1], config.batch_size, eval_rng
    )
    test_mse, test_mae = evaluate_windows(
        spec, params, gating, windows[2], config.batch_size, eval_rng
    )
    return {
        "val_mse": val_mse,
        "val_mae": val_mae,
        "test_mse": test_mse,
        "test_mae": test_mae,
    }


def _best_val(report):
    return report.epochs[report.best_epoch - 1]["val_mse"]


def _cell_seed(seed, kind, cell):
    parts = " ".join(f"{key}={cell[key]!r}" for key in sorted(cell))
    return derive_stream(seed, f"{kind} {parts}")


def _run_cell(job):
    kind, config, cell, seed = job
    try:
        cfg = dataclasses.replace(config, grid=None, **cell)
        result = run_experiment(cfg, _cell_seed(seed, kind, cell))
        return ("ok", seed, cell, _best_val(result.report), result.report.test_mse)
    except (ConfigError, DataError, NumericalError) as exc:
        return ("err", type(exc).__name__, f"{kind} cell {cell} seed {seed}: {exc}")


_ERROR_TYPES = {
    "ConfigError": ConfigError,
    "DataError": DataError,
    "NumericalError": NumericalError,
}


def _run_cells(jobs, parallelism):
    if parallelism > 1:
        with multiprocessing.Pool(parallelism) as pool:
            outcomes = pool.map(_run_cell, jobs)
    else:
        outcomes = [_run_cell(job) for job in jobs]
    for outcome in outcomes:
        if outcome[0] == "err":
            raise _ERROR_TYPES.get(outcome[1], NumericalError)(outcome[2])
    return outcomes


def grid_cells(config):
    """Cartesian grid cells in deterministic enumeration order.

    With no `grid` object the axes default to the standard search
    space (lr0 x heads x dropout at the configured batch size); a
    `grid` object sweeps exactly the axes it names and pins every
    other axis at its scalar config value.
    """
    if config.grid is None:
        axes = dict(_DEFAULT_GRID)
        axes["batch_size"] = [config.batch_size]
    else:
        axes = {
            "lr0": config.grid.get("lr0", [config.lr0]),
            "n": config.grid.get("n", [config.n]),
            "head_dropout": config.grid.get("head_dropout", [config.head_dropout]),
            "batch_size": config.grid.get("batch_size", [config.batch_size]),
        }
    return [
        {"lr0": lr0, "n": n, "head_dropout": r, "batch_size": b}
        for lr0 in axes["lr0"]
        for n in axes["n"]
        for r in axes["head_dropout"]
        for b in axes["batch_size"]
    ]


def grid_experiment(config, seeds, parallelism=1):
    """Full grid per seed; per-seed min-validation selection plus average.

    Returns {"per_seed": [...], "summary": rows} where summary rows
    (header included) follow the fixed summary CSV layout and end with
    the cross-seed test-MSE average row.
    """
    cells = grid_cells(config)
    if not cells:
        raise ConfigError("grid is empty")
    jobs = [("grid", config, cell, seed) for seed in seeds for cell in cells]
    outcomes = _run_cells(jobs, parallelism)

    label = dataset_label(config)
    per_seed = []
    rows = [list(_SUMMARY_HEADER)]
    selected_tests = []
    for i, seed in enumerate(seeds):
        chunk = outcomes[i * len(cells):(i + 1) * len(cells)]
        runs = [
            {
                "lr0": cell["lr0"],
                "n": cell["n"],
                "head_dropout": cell["head_dropout"],
                "batch_size": cell["batch_size"],
                "val_mse": val,
                "test_mse": test,
            }
            for (_, _, cell, val, test) in chunk
        ]
        best = min(range(len(runs)), key=lambda k: runs[k]["val_mse"])
        chosen = runs[best]
        per_seed.append({"seed": seed, "runs": runs, "selected": best})
        selected_tests.append(chosen["test_mse"])
        rows.append([
            str(seed),
            config.model,
            label,
            str(config.p),
            str(chosen["n"]),
            repr(chosen["lr0"]),
            repr(chosen["head_dropout"]),
            config.gating_mode,
            repr(chosen["val_mse"]),
            repr(chosen["test_mse"]),
        ])
    average = sum(selected_tests) / len(selected_tests)
    rows.append([
        "avg", config.model, label, str(config.p),
        "", "", "", "", "", repr(average),
    ])
    return {"per_seed": per_seed, "summary": rows}


def ablate_length(config, seed, lengths=None, modes=None, parallelism=1):
    """Test MSE per (input length, gating mode, dropout) at p=100.

    Returns CSV-shaped rows with a header; one fitted model per cell.
    """
    lengths = list(_ABLATE_LENGTHS) if lengths is None else list(lengths)
    modes = list(_ABLATE_MODES) if modes is None else list(modes)
    if not lengths or not modes:
        raise ConfigError("ablation needs at least one length and one mode")
    cells = [
        {"s": s, "p": _ABLATE_PRED, "gating_mode": mode, "head_dropout": r}
        for s in lengths
        for (mode, r) in modes
    ]
    jobs = [("ablate", config, cell, seed) for cell in cells]
    outcomes = _run_cells(jobs, parallelism)
    rows = [["s", "gating", "dropout", "val_mse", "test_mse"]]
    for (_, _, cell, val, test) in outcomes:
        rows.append([
            str(cell["s"]),
            cell["gating_mode"],
            repr(cell["head_dropout"]),
            repr(val),
            repr(test),
        ])
    return rows


def _raw_space_test_mse(result):
    """Test MSE with predictions and targets mapped back to raw units."""
    spec = result.spec
    scaler = result.scaler
    windows = result.windows[2]
    batch_size = 128
    total = 0.0
    count = 0
    for start in range(0, len(windows), batch_size):
        indices = range(start, min(start + batch_size, len(windows)))
        xs = np.concatenate([windows[k].x for k in indices], axis=0)
        marks = np.stack([windows[k].x_mark_first for k in indices], axis=0)
        ys = np.concatenate([windows[k].y for k in indices], axis=0)
        batch = len(indices)
        z = mole_forward(
            const(xs), const(marks), result.params, spec, result.gating,
            None, training=False, batch=batch,
        )
        tile_mean = np.tile(scaler.mean, (batch, 1))
        tile_std = np.tile(scaler.std, (batch, 1))
        pred_raw = z.value * tile_std + tile_mean
        truth_raw = ys * tile_std + tile_mean
        diff = pred_raw - truth_raw
        total += float((diff * diff).sum())
        count += diff.size
    return total / count


def _first_index(timestamps, begin, end, weekday, hour):
    for g in range(begin, end):
        stamp = timestamps[g]
        if stamp.weekday() == weekday and stamp.hour == hour:
            return g
    raise DataError(
        f"no timestamp with weekday {weekday} hour {hour} in [{begin}, {end})"
    )


def toy_experiment(seed, sigma=_TOY_SIGMA, epochs_max=100):
    """Side-by-side toy run: single-head rlinear vs its 2-head mixture.

    Both models train on the same two-year synthetic series with
    day-length windows (s=24, p=24, batch 128, lr 0.005).  The rate is
    held constant here: the gate separates the two weekly regimes over
    tens of epochs, and the default halving schedule freezes it near
    uniform long before that.  Returns the two FitReports, raw-space
    test MSEs, a 336-hour gate-weight trace starting the first
    test-range Monday midnight, and the prediction of the first
    Thursday-to-Friday regime boundary in the test range.
    """
    base = ExperimentConfig(
        dataset="toy",
        model="rlinear",
        s=24,
        p=24,
        n=1,
        lr0=0.005,
        lr_schedule="constant",
        batch_size=128,
        seeds=(seed,),
        epochs_max=epochs_max,
        patience=10,
    )
    single = run_experiment(base, seed, sigma=sigma)
    mole = run_experiment(dataclasses.replace(base, n=2), seed, sigma=sigma)

    raw = mole.raw
    std = mole.std
    test_view = mole.views[2]
    timestamps = raw.timestamps

    trace_begin = _first_index(
        timestamps, test_view.begin, test_view.end - 336, 0, 0
    )
    trace_dates = timestamps[trace_begin:trace_begin + 336]
    trace_marks = np.stack(
        [mark_features(stamp, raw.granularity) for stamp in trace_dates], axis=0
    )
    trace_weights = mixing_weights(
        const(trace_marks), mole.params, mole.spec, 336
    ).value.copy()

    boundary = _first_index(
        timestamps, test_view.begin, test_view.end - 24, 4, 0
    )
    x_std = std.values[:, boundary - 24:boundary]
    marks = mark_features(timestamps[boundary - 24], raw.granularity)[None, :]

    def predict(result):
        z = mole_forward(
            const(x_std), const(marks), result.params, result.spec,
            result.gating, None, training=False, batch=1,
        )
        return result.scaler.invert(z.value)[0]

    return {
        "seed": seed,
        "sigma": sigma,
        "raw": raw,
        "single": single,
        "mole": mole,
        "single_report": single.report,
        "mole_report": mole.report,
        "single_test_mse_raw": _raw_space_test_mse(single),
        "mole_test_mse_raw": _raw_space_test_mse(mole),
        "trace_dates": list(trace_dates),
        "trace_weights": trace_weights,
        "boundary_dates": timestamps[boundary:boundary + 24],
        "boundary_truth": raw.values[0, boundary:boundary + 24].copy(),
        "boundary_single": predict(single),
        "boundary_mole": predict(mole),
    }
