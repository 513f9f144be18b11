"""Agreement entropy, output-capsule diversity and heatmap export for routing traces."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .routing import RoutingState


class DegenerateColumnWarning(RuntimeWarning):
    """An output capsule received no assignment mass, so its cosine terms are undefined."""


@dataclass
class AgreementSnapshot:
    iteration: int                         # 1-based
    C: np.ndarray                          # [L, N], averaged over positions
    per_position: np.ndarray | None = None  # [J, L, N]

    def __post_init__(self):
        self.C = np.asarray(self.C, dtype=np.float64)
        if self.C.ndim != 2:
            raise ValueError(f"snapshot C must be [L, N], got shape {self.C.shape}")
        if np.any(np.abs(self.C.sum(axis=1) - 1.0) > 1e-9):
            raise ValueError("snapshot rows must sum to 1")


def entropy(C: np.ndarray) -> float:
    """Mean over input capsules of the assignment entropy in nats; ``0 ln 0`` counts as 0."""
    C = np.asarray(C, dtype=np.float64)
    safe = np.where(C > 0, C, 1.0)
    return float(-(C * np.log(safe)).sum() / C.shape[0]) + 0.0  # no negative zero


def position_entropies(C: np.ndarray) -> np.ndarray:
    """:func:`entropy` for every leading index of a ``[..., L, N]`` array."""
    C = np.asarray(C, dtype=np.float64)
    safe = np.where(C > 0, C, 1.0)
    return -(C * np.log(safe)).sum(axis=(-2, -1)) / C.shape[-2] + 0.0


def diversity(C: np.ndarray) -> float:
    """Mean pairwise cosine distance between the columns (output capsules) of ``C``."""
    C = np.asarray(C, dtype=np.float64)
    n = C.shape[1]
    if n < 2:
        raise ValueError("diversity needs at least two output capsules")
    norms = np.linalg.norm(C, axis=0)
    dead = norms == 0
    if dead.any():
        warnings.warn(f"output capsules {np.flatnonzero(dead).tolist()} have zero assignment mass",
                      DegenerateColumnWarning, stacklevel=2)
    unit = C / np.where(dead, 1.0, norms)
    cos = unit.T @ unit
    i, j = np.triu_indices(n, k=1)
    # rounding can push cos past 1; equal columns are exactly zero apart
    same = np.all(C[:, i] == C[:, j], axis=0)
    dist = np.where(dead[i] | dead[j] | same, 0.0, np.clip(1.0 - cos[i, j], 0.0, 2.0))
    return float(dist.mean())


def snapshots(state: RoutingState, mask: np.ndarray | None = None,
              keep_positions: bool = False) -> list[AgreementSnapshot]:
    """One snapshot per routing iteration, averaging ``C`` over the (unmasked) positions."""
    out = []
    for t, C in enumerate(state.iteration_trace, start=1):
        L, N = C.shape[-2:]
        flat = C.reshape(-1, L, N)
        if mask is not None:
            flat = flat[np.asarray(mask, dtype=bool).reshape(-1)]
        out.append(AgreementSnapshot(t, flat.mean(axis=0), flat.copy() if keep_positions else None))
    return out


def pgm_pixels(C: np.ndarray) -> np.ndarray:
    """Grey levels with the strongest agreement darkest: ``round(255 * (1 - C / max C))``."""
    C = np.asarray(C, dtype=np.float64)
    return np.rint(255.0 * (1.0 - C / C.max())).astype(np.uint8)


def write_pgm(path, C: np.ndarray) -> None:
    pixels = pgm_pixels(C)
    rows, cols = pixels.shape
    Path(path).write_bytes(f"P5\n{cols} {rows}\n255\n".encode("ascii") + pixels.tobytes())


def read_pgm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    magic, dims, maxval, body = blob.split(b"\n", 3)
    if magic != b"P5" or maxval != b"255":
        raise ValueError(f"{path}: not an 8-bit binary PGM")
    cols, rows = map(int, dims.split())
    return np.frombuffer(body, dtype=np.uint8).reshape(rows, cols)


def write_matrix_csv(path, C: np.ndarray) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        for row in np.asarray(C):
            writer.writerow([f"{v:.6f}" for v in row])


def read_matrix_csv(path) -> np.ndarray:
    with Path(path).open(newline="") as fh:
        return np.array([[float(v) for v in row] for row in csv.reader(fh)])


def export_heatmap(snapshot: AgreementSnapshot, directory, per_position: bool = False) -> list[Path]:
    """Write ``agreement_iter{t}.csv`` and ``.pgm`` (plus per-position CSVs if asked)."""
    directory = Path(directory)
    stem = directory / f"agreement_iter{snapshot.iteration}"
    written = [stem.with_suffix(".csv"), stem.with_suffix(".pgm")]
    write_matrix_csv(written[0], snapshot.C)
    write_pgm(written[1], snapshot.C)
    if per_position and snapshot.per_position is not None:
        for j, C in enumerate(snapshot.per_position):
            path = directory / f"agreement_iter{snapshot.iteration}_pos{j}.csv"
            write_matrix_csv(path, C)
            written.append(path)
    return written


def iteration_metrics(snaps: list[AgreementSnapshot]) -> list[dict]:
    return [{"iteration": s.iteration, "entropy": entropy(s.C),
             "diversity": diversity(s.C) if s.C.shape[1] > 1 else 0.0} for s in snaps]


def write_iteration_metrics(path, rows: list[dict]) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "entropy", "diversity"])
        for r in rows:
            writer.writerow([r["iteration"], f"{r['entropy']:.6f}", f"{r['diversity']:.6f}"])
