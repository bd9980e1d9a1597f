"""Linear-family forecast experts with a widened final layer.

Three architectures share one calling convention: the input is a batch
of windows stacked rowwise into a (batch*c) x s tensor, and the final
linear layer maps s to n*p columns so its output slices into n head
predictions of p steps each.  Everything before that layer (series
decomposition, instance normalization, the residual MLP) is computed
once and shared by all heads.

dlinear   trend/seasonal decomposition, one linear map per branch.
rlinear   instance-normalize, one linear map; denormalization happens
          after the heads are mixed, so heads stay in normalized space.
rmlp      rlinear with a residual two-layer MLP ahead of the final map.
"""

import logging
import struct
from dataclasses import dataclass

import numpy as np

from .autodiff import (
    Node,
    ParamStore,
    add,
    broadcast_col,
    const,
    matmul,
    mul,
    recip_floor,
    relu,
    slice_cols,
    sub,
    tile_rows,
    uniform_init,
)
from .errors import ConfigError, DataError

logger = logging.getLogger(__name__)

_REVIN_EPS = 1e-5
_MAGIC = b"MOLE1"

_KINDS = ("dlinear", "rlinear", "rmlp")


@dataclass
class ExpertSpec:
    """Architecture hyperparameters for one expert model."""

    kind: str
    c: int
    s: int
    p: int
    n: int = 1
    mlp_hidden: int = 512
    ma_kernel: int = 25

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ConfigError(
                f"unknown model kind {self.kind!r}; expected one of {_KINDS}"
            )
        for label in ("c", "s", "p", "n"):
            if getattr(self, label) < 1:
                raise ConfigError(
                    f"{label} must be >= 1, got {getattr(self, label)}"
                )
        if self.mlp_hidden < 1:
            raise ConfigError(f"mlp_hidden must be >= 1, got {self.mlp_hidden}")
        if self.ma_kernel < 1 or self.ma_kernel % 2 == 0:
            raise ConfigError(
                f"ma_kernel must be odd and >= 1, got {self.ma_kernel}"
            )


@dataclass
class RevinState:
    """Statistics captured by one normalize call, for the paired denorm.

    gamma and beta are the learnable per-channel affine leaves; the
    captured mean and std are per-row constants (one row per window per
    channel) and do not carry gradient.
    """

    gamma: Node  # c x 1 leaf
    beta: Node  # c x 1 leaf
    captured_mean: np.ndarray  # rows x 1
    captured_std: np.ndarray  # rows x 1, sqrt(var + eps)
    batch: int


def moving_average(x, kernel):
    """Centered rowwise moving mean with replicate padding at both ends."""
    if kernel < 1 or kernel % 2 == 0:
        raise ConfigError(f"kernel must be odd and >= 1, got {kernel}")
    rows, cols = x.rows, x.cols
    pad = kernel // 2
    xv = x.value
    padded = np.concatenate(
        [np.repeat(xv[:, :1], pad, axis=1), xv, np.repeat(xv[:, -1:], pad, axis=1)],
        axis=1,
    )
    out = np.zeros((rows, cols), dtype=np.float64)
    for m in range(kernel):
        out += padded[:, m:m + cols]
    out /= kernel

    def backward_fn(g):
        gp = np.zeros((rows, cols + 2 * pad), dtype=np.float64)
        gk = g / kernel
        for m in range(kernel):
            gp[:, m:m + cols] += gk
        gx = gp[:, pad:pad + cols].copy()
        # Replicated edge columns collect the gradient of every padded
        # copy they produced.
        if pad:
            gx[:, 0] += gp[:, :pad].sum(axis=1)
            gx[:, -1] += gp[:, pad + cols:].sum(axis=1)
        return (gx,)

    return Node(out, (x,), backward_fn)


def decompose(x, kernel):
    """Split a series into (seasonal, trend); the parts sum back to x."""
    trend = moving_average(x, kernel)
    seasonal = sub(x, trend)
    return seasonal, trend


def revin_normalize(x, gamma, beta, batch):
    """Normalize each row by its own mean/std, then apply gamma and beta.

    Rows are window-channel pairs, so the statistics are per window and
    per channel, taken over the s time axis.  They are captured as
    constants in the returned state; gradients flow only through x and
    the affine parameters.
    """
    xv = x.value
    mean = xv.mean(axis=1, keepdims=True)
    var = ((xv - mean) ** 2).mean(axis=1, keepdims=True)
    std = np.sqrt(var + _REVIN_EPS)
    cols = x.cols
    centered = sub(x, broadcast_col(const(mean), cols))
    scaled = mul(centered, broadcast_col(const(1.0 / std), cols))
    gamma_rows = broadcast_col(tile_rows(gamma, batch), cols)
    beta_rows = broadcast_col(tile_rows(beta, batch), cols)
    x_norm = add(mul(scaled, gamma_rows), beta_rows)
    state = RevinState(
        gamma=gamma,
        beta=beta,
        captured_mean=mean,
        captured_std=std,
        batch=batch,
    )
    return x_norm, state


def revin_denormalize(z, state):
    """Invert the paired normalize call on a (rows x p) tensor."""
    if np.any(np.abs(state.gamma.value) < 1e-8):
        logger.warning(
            "revin gamma within 1e-8 of zero at denormalize; division floored"
        )
    cols = z.cols
    beta_rows = broadcast_col(tile_rows(state.beta, state.batch), cols)
    inv_gamma = broadcast_col(
        recip_floor(tile_rows(state.gamma, state.batch)), cols
    )
    unscaled = mul(sub(z, beta_rows), inv_gamma)
    return add(
        mul(unscaled, broadcast_col(const(state.captured_std), cols)),
        broadcast_col(const(state.captured_mean), cols),
    )


def _param_layout(spec):
    """Sorted (name, rows, cols, fan_in) table; fan_in None means constant init."""
    wide = spec.n * spec.p
    if spec.kind == "dlinear":
        layout = [
            ("seasonal.bias", 1, wide, spec.s),
            ("seasonal.weight", spec.s, wide, spec.s),
            ("trend.bias", 1, wide, spec.s),
            ("trend.weight", spec.s, wide, spec.s),
        ]
    else:
        layout = [
            ("head.bias", 1, wide, spec.s),
            ("head.weight", spec.s, wide, spec.s),
            ("revin.beta", spec.c, 1, None),
            ("revin.gamma", spec.c, 1, None),
        ]
        if spec.kind == "rmlp":
            layout[2:2] = [
                ("mlp.fc1.bias", 1, spec.mlp_hidden, spec.s),
                ("mlp.fc1.weight", spec.s, spec.mlp_hidden, spec.s),
                ("mlp.fc2.bias", 1, spec.s, spec.mlp_hidden),
                ("mlp.fc2.weight", spec.mlp_hidden, spec.s, spec.mlp_hidden),
            ]
    return layout


def init_params(spec, rng):
    """Create the expert's ParamStore, drawing weights in sorted-name order.

    Linear weights and biases draw uniform +-1/sqrt(fan_in) values, one
    draw per entry in row-major order; revin.gamma starts at ones and
    revin.beta at zeros and consume no draws.
    """
    store = ParamStore()
    for name, rows, cols, fan_in in _param_layout(spec):
        if fan_in is None:
            fill = 1.0 if name.endswith("gamma") else 0.0
            store.add(name, np.full((rows, cols), fill, dtype=np.float64))
        else:
            store.add(name, uniform_init(fan_in, rows, cols, rng))
    return store


def _check_input(x, spec, batch):
    if batch < 1:
        raise ConfigError(f"batch must be >= 1, got {batch}")
    if x.rows != batch * spec.c or x.cols != spec.s:
        raise ConfigError(
            f"input shape {x.rows}x{x.cols} does not match batch {batch} "
            f"of {spec.c} channels by {spec.s} steps"
        )


def _head_slices(wide, n, p):
    return [slice_cols(wide, i * p, (i + 1) * p) for i in range(n)]


def _linear(x, store, prefix, rows):
    weight = store.leaf(prefix + ".weight")
    bias = store.leaf(prefix + ".bias")
    return add(matmul(x, weight), tile_rows(bias, rows))


def dlinear_forward(x, params, spec, batch):
    """Decompose, map each branch s -> n*p, sum, slice into n heads."""
    _check_input(x, spec, batch)
    seasonal, trend = decompose(x, spec.ma_kernel)
    rows = x.rows
    wide = add(
        _linear(seasonal, params, "seasonal", rows),
        _linear(trend, params, "trend", rows),
    )
    return _head_slices(wide, spec.n, spec.p)


def rlinear_forward(x, params, spec, batch):
    """Normalize, map s -> n*p, slice; heads stay in normalized space."""
    _check_input(x, spec, batch)
    x_norm, state = revin_normalize(
        x, params.leaf("revin.gamma"), params.leaf("revin.beta"), batch
    )
    wide = _linear(x_norm, params, "head", x.rows)
    return _head_slices(wide, spec.n, spec.p), state


def rmlp_forward(x, params, spec, batch):
    """rlinear with a residual MLP (s -> hidden -> s) before the head map."""
    _check_input(x, spec, batch)
    x_norm, state = revin_normalize(
        x, params.leaf("revin.gamma"), params.leaf("revin.beta"), batch
    )
    rows = x.rows
    hidden = relu(_linear(x_norm, params, "mlp.fc1", rows))
    residual = add(x_norm, _linear(hidden, params, "mlp.fc2", rows))
    wide = _linear(residual, params, "head", rows)
    return _head_slices(wide, spec.n, spec.p), state


def model_forward(x, params, spec, batch):
    """Run the expert named by spec.kind; returns (heads, revin_state).

    revin_state is None for dlinear, whose postprocessing is the
    identity; for the normalized experts it must be handed to
    revin_denormalize after mixing.
    """
    if spec.kind == "dlinear":
        return dlinear_forward(x, params, spec, batch), None
    if spec.kind == "rlinear":
        return rlinear_forward(x, params, spec, batch)
    return rmlp_forward(x, params, spec, batch)


def save_params(store, path):
    """Serialize a ParamStore: magic, then sorted length-prefixed entries."""
    with open(path, "wb") as handle:
        handle.write(_MAGIC)
        for name, value in store.items():
            encoded = name.encode("utf-8")
            handle.write(struct.pack("<I", len(encoded)))
            handle.write(encoded)
            handle.write(struct.pack("<II", value.shape[0], value.shape[1]))
            handle.write(value.astype("<f8").tobytes())


def load_params(path):
    """Read a serialized ParamStore back; truncation or bad magic rejects."""
    with open(path, "rb") as handle:
        blob = handle.read()
    if blob[:len(_MAGIC)] != _MAGIC:
        raise DataError(f"{path}: not a serialized model (bad magic)")
    store = ParamStore()
    offset = len(_MAGIC)

    def take(count):
        nonlocal offset
        if offset + count > len(blob):
            raise DataError(f"{path}: truncated at byte {offset}")
        piece = blob[offset:offset + count]
        offset += count
        return piece

    while offset < len(blob):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        rows, cols = struct.unpack("<II", take(8))
        payload = take(rows * cols * 8)
        value = np.frombuffer(payload, dtype="<f8").reshape(rows, cols)
        store.add(name, value.astype(np.float64))
    return store
