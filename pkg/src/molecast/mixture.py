"""Mixture layer: per-channel gating over expert heads.

A small MLP reads the calendar embedding of the first input timestamp
and emits one logit per (channel, head); a rowwise softmax turns each
channel's logits into simplex weights.  The forecast is the weighted
sum of the head outputs, optionally after head dropout, and then the
expert's postprocessing (instance denormalization, when it has one).

Two ablation modes bypass the calendar signal: RandomIn feeds the
mixing net uniform noise in the embedding's range, RandomOut skips the
net entirely and draws already-normalized random weights.
"""

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    add,
    broadcast_col,
    const,
    matmul,
    mul,
    recip,
    relu,
    reshape,
    slice_cols,
    softmax_rows,
    sum_rows,
    tile_rows,
    uniform_init,
)
from .errors import ConfigError
from .models import init_params, model_forward, revin_denormalize

_MODES = ("TimeIn", "RandomIn", "RandomOut")
_GRANULARITIES = ("entry", "head")


@dataclass
class GatingConfig:
    """How gate weights are produced and regularized."""

    mode: str = "TimeIn"
    head_dropout: float = 0.0
    granularity: str = "entry"

    def __post_init__(self):
        if self.mode not in _MODES:
            raise ConfigError(
                f"unknown gating mode {self.mode!r}; expected one of {_MODES}"
            )
        if not 0.0 <= self.head_dropout < 1.0:
            raise ConfigError(
                f"head_dropout must be in [0, 1), got {self.head_dropout}"
            )
        if self.granularity not in _GRANULARITIES:
            raise ConfigError(
                f"unknown dropout granularity {self.granularity!r}; "
                f"expected one of {_GRANULARITIES}"
            )


def init_mole_params(spec, t, rng):
    """Expert parameters plus, for n >= 2, the mixing network.

    The mixing net is a two-layer MLP from the t-wide embedding to c*n
    logits with hidden width equal to the output width.  A single-head
    model has no mixing net at all.  Draw order: expert entries first
    (see init_params), then mix.fc1.weight, mix.fc1.bias,
    mix.fc2.weight, mix.fc2.bias, row-major within each.
    """
    if t < 1:
        raise ConfigError(f"mark length must be >= 1, got {t}")
    store = init_params(spec, rng)
    if spec.n >= 2:
        width = spec.c * spec.n
        store.add("mix.fc1.weight", uniform_init(t, t, width, rng))
        store.add("mix.fc1.bias", uniform_init(t, 1, width, rng))
        store.add("mix.fc2.weight", uniform_init(width, width, width, rng))
        store.add("mix.fc2.bias", uniform_init(width, 1, width, rng))
    return store


def mixing_weights(marks, params, spec, batch):
    """Mark embeddings (batch x t) -> simplex gate rows ((batch*c) x n).

    Row b*c + ch holds the weights for channel ch of sample b; each row
    is a softmax, so it is nonnegative and sums to 1.  With one head
    there is nothing to learn and every weight is exactly 1.
    """
    if spec.n == 1:
        return const(np.ones((batch * spec.c, 1), dtype=np.float64))
    w1 = params.leaf("mix.fc1.weight")
    b1 = params.leaf("mix.fc1.bias")
    w2 = params.leaf("mix.fc2.weight")
    b2 = params.leaf("mix.fc2.bias")
    if marks.rows != batch or marks.cols != w1.rows:
        raise ConfigError(
            f"mark tensor {marks.rows}x{marks.cols} does not match batch "
            f"{batch} and mark length {w1.rows}"
        )
    hidden = relu(add(matmul(marks, w1), tile_rows(b1, batch)))
    logits = add(matmul(hidden, w2), tile_rows(b2, batch))
    stacked = reshape(logits, batch * spec.c, spec.n)
    return softmax_rows(stacked)


def head_dropout(w, r, rng, training, granularity="entry"):
    """Randomly drop gate entries and renormalize each row to sum 1.

    Active only while training and r > 0.  'entry' granularity draws an
    independent keep decision per (row, head) cell, row-major; 'head'
    draws one decision per head for the whole batch.  A row that loses
    every head keeps its original weights instead of dividing by zero.
    """
    if not 0.0 <= r < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {r}")
    if not training or r == 0.0:
        return w
    if rng is None:
        raise ConfigError("head_dropout with r > 0 needs an rng")
    rows, heads = w.rows, w.cols
    if granularity == "head":
        keep_cols = np.array(
            [1.0 if rng.uniform01() >= r else 0.0 for _ in range(heads)]
        )
        mask = np.tile(keep_cols, (rows, 1))
    elif granularity == "entry":
        mask = np.empty((rows, heads), dtype=np.float64)
        for i in range(rows):
            for j in range(heads):
                mask[i, j] = 1.0 if rng.uniform01() >= r else 0.0
    else:
        raise ConfigError(f"unknown dropout granularity {granularity!r}")

    surviving = (w.value * mask).sum(axis=1, keepdims=True)
    alive = (surviving > 0.0).astype(np.float64)
    dead = 1.0 - alive
    masked = mul(w, const(mask))
    # Dead rows get denominator 1 here and are replaced wholesale below,
    # so the division never sees a zero.
    denom = add(mul(sum_rows(masked), const(alive)), const(dead))
    normalized = mul(masked, broadcast_col(recip(denom), heads))
    fallback = mul(w, broadcast_col(const(dead), heads))
    return add(normalized, fallback)


def combine(ys, w):
    """Weighted sum of head outputs: out[ch,j] = sum_i w[ch,i]*ys[i][ch,j]."""
    if len(ys) != w.cols:
        raise ConfigError(
            f"{len(ys)} head outputs but {w.cols} weight columns"
        )
    total = None
    for i, y in enumerate(ys):
        if y.rows != w.rows or y.cols != ys[0].cols:
            raise ConfigError(
                f"head {i} output {y.rows}x{y.cols} does not match "
                f"weights with {w.rows} rows"
            )
        term = mul(broadcast_col(slice_cols(w, i, i + 1), y.cols), y)
        total = term if total is None else add(total, term)
    return total


def _random_out_weights(rows, heads, rng):
    raw = np.empty((rows, heads), dtype=np.float64)
    for i in range(rows):
        for j in range(heads):
            raw[i, j] = rng.uniform01()
    return const(raw / raw.sum(axis=1, keepdims=True))


def mole_forward(x, x_mark, params, spec, gating, rng, training, batch):
    """Full pipeline: expert heads, gate weights, mix, postprocess.

    x is (batch*c) x s, x_mark is batch x t (ignored by RandomOut).
    With a single head the gate is a constant 1 and the result is
    exactly the expert's own output.  RandomIn replaces the marks with
    fresh uniform draws in [-0.5, 0.5]; RandomOut draws normalized
    weights directly, so the mixing net (if any) is never evaluated.
    Head dropout applies only while training, and never to RandomOut.
    """
    needs_rng = gating.mode != "TimeIn" or (
        training and gating.head_dropout > 0.0
    )
    if needs_rng and rng is None:
        raise ConfigError(
            f"gating mode {gating.mode} with dropout "
            f"{gating.head_dropout} needs an rng"
        )
    heads, revin_state = model_forward(x, params, spec, batch)
    if spec.n == 1:
        z = heads[0]
    else:
        if gating.mode == "RandomOut":
            w = _random_out_weights(batch * spec.c, spec.n, rng)
        else:
            if gating.mode == "RandomIn":
                t = params.value("mix.fc1.weight").shape[0]
                noise = np.empty((batch, t), dtype=np.float64)
                for i in range(batch):
                    for j in range(t):
                        noise[i, j] = rng.uniform(-0.5, 0.5)
                gate_in = const(noise)
            else:
                if x_mark is None:
                    raise ConfigError("TimeIn gating needs mark embeddings")
                gate_in = x_mark
            w = mixing_weights(gate_in, params, spec, batch)
            w = head_dropout(
                w, gating.head_dropout, rng, training, gating.granularity
            )
        z = combine(heads, w)
    if revin_state is not None:
        z = revin_denormalize(z, revin_state)
    return z
