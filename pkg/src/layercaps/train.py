"""Adam training loop with inverse-square-root warmup and held-out evaluation."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .model import Batch, ModelConfig, ToyTransformer
from .tasks import TaskData

METRICS_HEADER = ["step", "loss", "token_accuracy", "wall_ms"]


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, loss: float):
        self.step = step
        self.loss = loss
        super().__init__(f"non-finite loss {loss} at step {step}")


@dataclass
class TrainConfig:
    batch_size: int = 32
    lr: float = 2e-3
    warmup: int = 200
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    clip_norm: float | None = 1.0
    min_len: int = 4
    max_len: int = 10
    eval_size: int = 256
    eval_every: int = 250

    def problems(self) -> list[str]:
        errs = []
        for name in ("batch_size", "warmup", "min_len", "max_len", "eval_size", "eval_every"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                errs.append(f"train.{name}: must be a positive integer, got {v!r}")
        lengths_ok = all(isinstance(v, int) and v >= 1 for v in (self.min_len, self.max_len))
        if lengths_ok and self.min_len > self.max_len:
            errs.append(f"train.min_len: {self.min_len} exceeds max_len {self.max_len}")
        if not (isinstance(self.lr, (int, float)) and self.lr > 0):
            errs.append(f"train.lr: must be > 0, got {self.lr!r}")
        if self.clip_norm is not None and not self.clip_norm > 0:
            errs.append(f"train.clip_norm: must be > 0 or null, got {self.clip_norm!r}")
        return errs


def learning_rate(step: int, peak: float, warmup: int) -> float:
    """Linear warmup to ``peak`` then decay proportional to ``1/sqrt(step)``."""
    step = max(step, 1)
    return peak * min(step / warmup, math.sqrt(warmup / step))


class Adam:
    def __init__(self, params, beta1=0.9, beta2=0.98, eps=1e-9):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * p.grad * p.grad
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_gradients(params, max_norm: float) -> float:
    total = math.sqrt(sum(float((p.grad * p.grad).sum()) for p in params if p.grad is not None))
    if total > max_norm:
        scale = max_norm / total
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


def evaluate(model: ToyTransformer, batches) -> dict:
    """Teacher-forced loss and token accuracy over every non-pad target token."""
    total_nll = correct = count = 0.0
    with T.no_grad():
        for batch in batches:
            logits = model.forward(batch)
            mask = batch.tgt_mask
            n = mask.sum()
            total_nll += T.cross_entropy(logits, batch.tgt_tokens, mask).item() * n
            correct += ((logits.data.argmax(axis=-1) == batch.tgt_tokens) & mask).sum()
            count += n
    return {"loss": total_nll / count, "token_accuracy": correct / count}


@dataclass
class TrainResult:
    model: ToyTransformer
    history: list[dict] = field(default_factory=list)
    final: dict = field(default_factory=dict)
    seconds: float = 0.0


def train(task: str, model_cfg: ModelConfig, train_cfg: TrainConfig, steps: int, seed: int,
          metrics_path: str | Path | None = None, log=None) -> TrainResult:
    """Train from scratch; the history holds one row per step plus the step-0 evaluation."""
    if steps < 0:
        raise ValueError("steps must be >= 0")
    model = ToyTransformer(model_cfg, seed=seed)
    data = TaskData(task, model_cfg.vocab_size, train_cfg.min_len, train_cfg.max_len,
                    train_cfg.eval_size, seed)
    params = model.parameters()
    opt = Adam(params, train_cfg.beta1, train_cfg.beta2, train_cfg.eps)
    start = time.perf_counter()

    def wall_ms() -> float:
        return round(1000.0 * (time.perf_counter() - start), 3)

    initial = evaluate(model, data.eval_batches())
    history = [{"step": 0, "loss": initial["loss"], "token_accuracy": initial["token_accuracy"],
                "wall_ms": wall_ms()}]
    for step in range(1, steps + 1):
        batch: Batch = data.train_batch(train_cfg.batch_size)
        model.zero_grad()
        try:
            loss = model.loss(batch)
        except T.NumericError as exc:
            # non-finite activations surface before the loss itself does
            raise TrainingDiverged(step, math.nan) from exc
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingDiverged(step, value)
        loss.backward()
        if train_cfg.clip_norm is not None:
            clip_gradients(params, train_cfg.clip_norm)
        opt.step(learning_rate(step, train_cfg.lr, train_cfg.warmup))
        row = {"step": step, "loss": value, "token_accuracy": None, "wall_ms": None}
        if step % train_cfg.eval_every == 0 or step == steps:
            row["token_accuracy"] = evaluate(model, data.eval_batches())["token_accuracy"]
            if log is not None:
                log(f"step {step} loss {value:.4f} acc {row['token_accuracy']:.4f}")
        row["wall_ms"] = wall_ms()
        history.append(row)
    final = evaluate(model, data.eval_batches())
    result = TrainResult(model, history, final, time.perf_counter() - start)
    if metrics_path is not None:
        write_metrics(metrics_path, history)
    return result


def write_metrics(path, history) -> None:
    path = Path(path)
    new = not path.exists()
    with path.open("a", newline="") as fh:
        writer = csv.writer(fh)
        if new:
            writer.writerow(METRICS_HEADER)
        for row in history:
            acc = row["token_accuracy"]
            writer.writerow([row["step"], repr(float(row["loss"])),
                             "" if acc is None else repr(float(acc)), row["wall_ms"]])
