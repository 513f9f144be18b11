"""PNG figures next to the CSV/PGM outputs: agreement heatmaps, iteration curves, sweeps."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

GOLDEN = (5 ** 0.5 - 1) / 2


def _figure(width: float = 5.0, height: float | None = None):
    fig, ax = plt.subplots(figsize=(width, height or width * GOLDEN))
    ax.spines["right"].set_visible(False)
    ax.spines["top"].set_visible(False)
    return fig, ax


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def heatmap(C: np.ndarray, path, title: str = "") -> Path:
    """Input capsules down, output capsules across; darker means stronger agreement."""
    C = np.asarray(C)
    fig, ax = _figure(max(3.0, 0.5 * C.shape[1] + 1.5), max(2.0, 0.45 * C.shape[0] + 1.2))
    im = ax.imshow(C, cmap="Greys", vmin=0.0, vmax=max(C.max(), 1e-12), aspect="auto")
    ax.set_xlabel("output capsule")
    ax.set_ylabel("input capsule (layer)")
    ax.set_yticks(range(C.shape[0]), [str(l + 1) for l in range(C.shape[0])])
    if title:
        ax.set_title(title)
    fig.colorbar(im, ax=ax, fraction=0.046)
    return _save(fig, path)


def iteration_curves(rows: Sequence[dict], path) -> Path:
    """Entropy and diversity against the routing iteration, on twin axes."""
    its = [r["iteration"] for r in rows]
    fig, ax = _figure()
    ax.plot(its, [r["entropy"] for r in rows], "o-", color="k", label="entropy")
    ax.set_xlabel("iteration")
    ax.set_ylabel("entropy (nats)")
    ax.set_xticks(its)
    twin = ax.twinx()
    twin.plot(its, [r["diversity"] for r in rows], "s--", color="tab:red", label="diversity")
    twin.set_ylabel("diversity", color="tab:red")
    return _save(fig, path)


def sweep(rows: Sequence[dict], param: str, path) -> Path:
    """Held-out accuracy per swept value; failed runs are left out of the plot."""
    ok = [r for r in rows if r.get("status") == "ok"]
    fig, ax = _figure()
    labels = [str(r["value"]) for r in ok]
    acc = [100.0 * float(r["token_accuracy"]) for r in ok]
    if all(_is_number(r["value"]) for r in ok) and ok:
        ax.plot([float(r["value"]) for r in ok], acc, "o-", color="k")
    else:
        ax.bar(labels, acc, color="0.4")
    ax.set_xlabel(param)
    ax.set_ylabel("token accuracy (%)")
    return _save(fig, path)


def _is_number(value) -> bool:
    try:
        float(value)
    except (TypeError, ValueError):
        return False
    return True


def training_curve(history: Sequence[dict], path) -> Path:
    """Per-step loss with the held-out accuracy checkpoints overlaid."""
    steps = [r["step"] for r in history if r["step"] > 0]
    fig, ax = _figure()
    if steps:
        ax.plot(steps, [r["loss"] for r in history if r["step"] > 0], color="0.5", lw=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("training loss")
    ax.set_yscale("log")
    evals = [r for r in history if r["token_accuracy"] is not None]
    twin = ax.twinx()
    twin.plot([r["step"] for r in evals], [100.0 * r["token_accuracy"] for r in evals], "o-", color="k")
    twin.set_ylabel("held-out token accuracy (%)")
    return _save(fig, path)
