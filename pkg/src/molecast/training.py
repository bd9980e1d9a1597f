"""Training loop: Adam, scheduled learning rate, early stopping.

fit() runs seeded shuffled mini-batches of MSE training in standardized
space, validates after every epoch, applies the configured learning-rate
schedule (halved each epoch by default, or held constant), stops once
validation has not improved for `patience` epochs, restores the
best-epoch parameters, and evaluates test exactly once.  All randomness
flows through streams derived from the config seed, so identical configs
produce bit-identical metric trajectories.
"""

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .autodiff import backward, const, mean_sq, sub
from .errors import ConfigError, DataError, NumericalError
from .mixture import mole_forward
from .rng import Xoshiro256, derive_stream

_BETA1 = 0.9
_BETA2 = 0.999
_EPS_ADAM = 1e-8


def mse(pred, truth):
    """Mean squared error over every element of equally shaped arrays."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ConfigError(
            f"shape mismatch: pred {pred.shape} vs truth {truth.shape}"
        )
    return float(((pred - truth) ** 2).mean())


def mae(pred, truth):
    """Mean absolute error over every element of equally shaped arrays."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ConfigError(
            f"shape mismatch: pred {pred.shape} vs truth {truth.shape}"
        )
    return float(np.abs(pred - truth).mean())


_LR_SCHEDULES = ("halving", "constant")


@dataclass
class TrainConfig:
    """Optimization settings; the loss is always MSE."""

    lr0: float
    seed: int
    batch_size: int = 8
    epochs_max: int = 20
    patience: int = 3
    lr_schedule: str = "halving"

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ConfigError(f"lr0 must be > 0, got {self.lr0}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs_max < 1:
            raise ConfigError(f"epochs_max must be >= 1, got {self.epochs_max}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError(f"seed must be a u64, got {self.seed}")
        if self.lr_schedule not in _LR_SCHEDULES:
            raise ConfigError(
                f"lr_schedule must be one of {_LR_SCHEDULES}, "
                f"got {self.lr_schedule!r}"
            )


class AdamState:
    """First/second moment accumulators, one pair per parameter."""

    def __init__(self, params):
        self.m = {name: np.zeros_like(value) for name, value in params.items()}
        self.v = {name: np.zeros_like(value) for name, value in params.items()}
        self.step = 0


def adam_step(params, state, lr):
    """One bias-corrected Adam update in place; zeroes gradients after."""
    state.step += 1
    bias1 = 1.0 - _BETA1 ** state.step
    bias2 = 1.0 - _BETA2 ** state.step
    for name, value in params.items():
        grad = params.grad(name)
        if not np.isfinite(grad).all():
            raise NumericalError(f"non-finite gradient for parameter {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= _BETA1
        m += (1.0 - _BETA1) * grad
        v *= _BETA2
        v += (1.0 - _BETA2) * grad * grad
        value -= lr * (m / bias1) / (np.sqrt(v / bias2) + _EPS_ADAM)
    params.zero_grads()


def lr_at(epoch, lr0):
    """Learning rate for a 1-based epoch: lr0 halved each epoch."""
    if epoch < 1:
        raise ConfigError(f"epoch must be >= 1, got {epoch}")
    return lr0 * 0.5 ** (epoch - 1)


def param_count(spec, t):
    """Closed-form scalar parameter total for one model, mixing net included.

    Final layers are n*p wide; the mixing net (two square-ish MLP layers
    from a t-long embedding to c*n logits) exists only for n >= 2.
    """
    if t < 1:
        raise ConfigError(f"mark length must be >= 1, got {t}")
    wide = spec.n * spec.p
    if spec.kind == "dlinear":
        total = 2 * (spec.s * wide + wide)
    else:
        total = spec.s * wide + wide + 2 * spec.c
        if spec.kind == "rmlp":
            total += 2 * spec.s * spec.mlp_hidden + spec.mlp_hidden + spec.s
    if spec.n >= 2:
        width = spec.c * spec.n
        total += t * width + width + width * width + width
    return total


@dataclass
class FitReport:
    """Everything one training run produced, JSON-ready via as_dict()."""

    config: dict
    epochs: list
    best_epoch: int
    test_mse: float
    test_mae: float
    train_ms_per_iter: float
    infer_ms_per_iter: float
    train_ms_quartiles: list = field(default_factory=list)
    infer_ms_quartiles: list = field(default_factory=list)
    param_count: int = 0

    def as_dict(self):
        return {
            "config": self.config,
            "epochs": self.epochs,
            "best_epoch": self.best_epoch,
            "test_mse": self.test_mse,
            "test_mae": self.test_mae,
            "train_ms_per_iter": self.train_ms_per_iter,
            "infer_ms_per_iter": self.infer_ms_per_iter,
            "train_ms_quartiles": self.train_ms_quartiles,
            "infer_ms_quartiles": self.infer_ms_quartiles,
            "param_count": self.param_count,
        }


def _stack_batch(windows, indices):
    """Gather window samples into ((B*c) x s, B x t, (B*c) x p) arrays."""
    xs = []
    marks = []
    ys = []
    for k in indices:
        sample = windows[k]
        xs.append(sample.x)
        marks.append(sample.x_mark_first)
        ys.append(sample.y)
    return (
        np.concatenate(xs, axis=0),
        np.stack(marks, axis=0),
        np.concatenate(ys, axis=0),
    )


def evaluate_windows(spec, params, gating, windows, batch_size, rng, times=None):
    """Full-dataset MSE/MAE with no parameter updates; keeps partial batches."""
    total_sq = 0.0
    total_abs = 0.0
    count = 0
    for start in range(0, len(windows), batch_size):
        indices = range(start, min(start + batch_size, len(windows)))
        xs, marks, ys = _stack_batch(windows, indices)
        batch = len(indices)
        began = time.perf_counter()
        z = mole_forward(
            const(xs), const(marks), params, spec, gating, rng,
            training=False, batch=batch,
        )
        if times is not None:
            times.append((time.perf_counter() - began) * 1000.0)
        diff = z.value - ys
        total_sq += float((diff * diff).sum())
        total_abs += float(np.abs(diff).sum())
        count += diff.size
    return total_sq / count, total_abs / count


def _quartiles(times):
    if not times:
        return [0.0, 0.0, 0.0]
    q = np.percentile(np.array(times), [25.0, 50.0, 75.0])
    return [float(v) for v in q]


def _describe(config, spec, gating):
    described = {
        "batch_size": config.batch_size,
        "lr0": config.lr0,
        "lr_schedule": config.lr_schedule,
        "epochs_max": config.epochs_max,
        "patience": config.patience,
        "seed": config.seed,
        "model": {
            "kind": spec.kind,
            "c": spec.c,
            "s": spec.s,
            "p": spec.p,
            "n": spec.n,
            "mlp_hidden": spec.mlp_hidden,
            "ma_kernel": spec.ma_kernel,
        },
    }
    # A single head has no gate at all, so the report stays silent on it.
    if spec.n >= 2:
        described["gating"] = {
            "mode": gating.mode,
            "head_dropout": gating.head_dropout,
            "granularity": gating.granularity,
        }
    return described


def fit(config, spec, params, gating, train_windows, val_windows, test_windows, t):
    """Train on the train split, select on val, report test at the best epoch.

    Training batches are reshuffled every epoch with a stream derived
    from the seed; the final partial batch is dropped in training and
    kept in evaluation.  Raises on non-finite losses or gradients with
    the epoch and iteration (or parameter) named.
    """
    if len(train_windows) < config.batch_size:
        raise DataError(
            f"train split hosts {len(train_windows)} windows, fewer than "
            f"one batch of {config.batch_size}"
        )
    shuffle_rng = Xoshiro256(derive_stream(config.seed, "shuffle"))
    gate_rng = Xoshiro256(derive_stream(config.seed, "gating-train"))
    eval_rng = Xoshiro256(derive_stream(config.seed, "gating-eval"))

    adam = AdamState(params)
    epochs = []
    train_times = []
    best_val = math.inf
    best_epoch = 0
    snapshot = params.snapshot()
    since_best = 0

    for epoch in range(1, config.epochs_max + 1):
        if config.lr_schedule == "constant":
            lr = config.lr0
        else:
            lr = lr_at(epoch, config.lr0)
        order = list(range(len(train_windows)))
        shuffle_rng.shuffle(order)
        loss_sum = 0.0
        num_batches = len(order) // config.batch_size
        for it in range(num_batches):
            indices = order[it * config.batch_size:(it + 1) * config.batch_size]
            xs, marks, ys = _stack_batch(train_windows, indices)
            began = time.perf_counter()
            z = mole_forward(
                const(xs), const(marks), params, spec, gating, gate_rng,
                training=True, batch=config.batch_size,
            )
            loss = mean_sq(sub(z, const(ys)))
            loss_value = loss.item()
            if not math.isfinite(loss_value):
                raise NumericalError(
                    f"non-finite training loss at epoch {epoch}, "
                    f"iteration {it}"
                )
            backward(loss)
            adam_step(params, adam, lr)
            train_times.append((time.perf_counter() - began) * 1000.0)
            loss_sum += loss_value
        train_mse = loss_sum / num_batches
        val_mse, _ = evaluate_windows(
            spec, params, gating, val_windows, config.batch_size, eval_rng
        )
        epochs.append({"train_mse": train_mse, "val_mse": val_mse, "lr": lr})
        if val_mse < best_val:
            best_val = val_mse
            best_epoch = epoch
            snapshot = params.snapshot()
            since_best = 0
        else:
            since_best += 1
            if since_best >= config.patience:
                break

    params.restore(snapshot)
    infer_times = []
    test_mse, test_mae = evaluate_windows(
        spec, params, gating, test_windows, config.batch_size, eval_rng,
        times=infer_times,
    )
    return FitReport(
        config=_describe(config, spec, gating),
        epochs=epochs,
        best_epoch=best_epoch,
        test_mse=test_mse,
        test_mae=test_mae,
        train_ms_per_iter=float(np.mean(train_times)) if train_times else 0.0,
        infer_ms_per_iter=float(np.mean(infer_times)) if infer_times else 0.0,
        train_ms_quartiles=_quartiles(train_times),
        infer_ms_quartiles=_quartiles(infer_times),
        param_count=param_count(spec, t),
    )
