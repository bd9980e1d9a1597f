"""Figure rendering for experiment outputs.

Every report-producing command saves plots next to its CSV/JSON files;
the data in those files is authoritative and the figures are derived
views of it.  Rendering always uses the Agg backend so it works
headless.
"""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)


def _new_axes(width=8.0, height=4.5):
    fig, ax = plt.subplots(figsize=(width, height))
    ax.grid(alpha=0.3)
    return fig, ax


def _finish(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_loss_curves(epochs, path):
    """Train and validation MSE per epoch for one fit."""
    fig, ax = _new_axes()
    xs = range(1, len(epochs) + 1)
    ax.plot(xs, [e["train_mse"] for e in epochs], marker="o", label="train")
    ax.plot(xs, [e["val_mse"] for e in epochs], marker="s", label="val")
    ax.set_xlabel("epoch")
    ax.set_ylabel("MSE")
    ax.set_title("training progress")
    ax.legend()
    _finish(fig, path)


def save_grid_summary(summary_rows, path):
    """Selected test MSE per seed from a finished grid summary table."""
    body = [row for row in summary_rows[1:] if row[0] != "avg"]
    fig, ax = _new_axes(6.0, 4.0)
    seeds = [row[0] for row in body]
    tests = [float(row[9]) for row in body]
    ax.bar(range(len(body)), tests, color="tab:blue")
    ax.set_xticks(range(len(body)), seeds)
    ax.set_xlabel("seed")
    ax.set_ylabel("selected test MSE")
    ax.set_title("grid selection by seed")
    _finish(fig, path)


def save_ablation(rows, path):
    """Test MSE against input length, one line per gating/dropout combo."""
    body = rows[1:]
    combos = []
    for row in body:
        combo = (row[1], row[2])
        if combo not in combos:
            combos.append(combo)
    fig, ax = _new_axes()
    for gating, dropout in combos:
        points = [
            (int(row[0]), float(row[4]))
            for row in body
            if (row[1], row[2]) == (gating, dropout)
        ]
        points.sort()
        ax.plot(
            [s for s, _ in points],
            [mse for _, mse in points],
            marker="o",
            label=f"{gating}, r={dropout}",
        )
    ax.set_xlabel("input length s")
    ax.set_ylabel("test MSE")
    ax.set_title("input-length ablation (p=100)")
    ax.legend()
    _finish(fig, path)


def save_series_preview(dates, values, path, title="dataset preview"):
    """One channel of the raw series over the given span."""
    fig, ax = _new_axes()
    ax.plot(dates, values, linewidth=1.0)
    ax.set_xlabel("time")
    ax.set_ylabel("value")
    ax.set_title(title)
    fig.autofmt_xdate()
    _finish(fig, path)


def save_toy_boundary(dates, truth, single, mole, path):
    """Truth vs both models' forecasts across a regime boundary day."""
    fig, ax = _new_axes()
    ax.plot(dates, truth, color="black", linewidth=1.5, label="truth")
    ax.plot(dates, single, linestyle="--", marker="o", markersize=3,
            label="single head")
    ax.plot(dates, mole, linestyle="--", marker="s", markersize=3,
            label="2-head mixture")
    ax.set_xlabel("time")
    ax.set_ylabel("value")
    ax.set_title("forecast across the weekday regime boundary")
    ax.legend()
    fig.autofmt_xdate()
    _finish(fig, path)


def save_toy_weights(dates, weights, path):
    """Gate-weight trace: one line per head over a two-week span."""
    fig, ax = _new_axes()
    for head in range(weights.shape[1]):
        ax.plot(dates, weights[:, head], linewidth=1.0, label=f"head {head}")
    ax.set_xlabel("time")
    ax.set_ylabel("gate weight")
    ax.set_ylim(-0.05, 1.05)
    ax.set_title("mixing weights over two weeks")
    ax.legend()
    fig.autofmt_xdate()
    _finish(fig, path)
