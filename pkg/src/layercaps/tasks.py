"""Toy sequence-to-sequence tasks with exact, position-level answers."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .model import EOS, FIRST_SYMBOL, PAD, Batch

EVAL_SEED = 20190101


def copy_task(symbols: Sequence[int], vocab_size: int) -> list[int]:
    return list(symbols)


def reverse_task(symbols: Sequence[int], vocab_size: int) -> list[int]:
    return list(symbols)[::-1]


def swap_translate_task(symbols: Sequence[int], vocab_size: int) -> list[int]:
    """Swap adjacent pairs, then map each symbol through a fixed alphabet reversal.

    ``a b c d e`` becomes ``f(b) f(a) f(d) f(c) f(e)``; a trailing odd symbol stays put.
    """
    out = list(symbols)
    for i in range(0, len(out) - 1, 2):
        out[i], out[i + 1] = out[i + 1], out[i]
    top = vocab_size - 1
    return [top - (s - FIRST_SYMBOL) for s in out]


TASKS: dict[str, Callable[[Sequence[int], int], list[int]]] = {
    "copy": copy_task,
    "reverse": reverse_task,
    "swap-translate": swap_translate_task,
}


def sample_sequence(rng: np.random.Generator, vocab_size: int, min_len: int, max_len: int) -> tuple[int, ...]:
    n = int(rng.integers(min_len, max_len + 1))
    return tuple(int(s) for s in rng.integers(FIRST_SYMBOL, vocab_size, size=n))


def pack(task: str, sources: Sequence[Sequence[int]], vocab_size: int) -> Batch:
    """Pad a list of source sequences and their task answers (plus EOS) into a batch."""
    fn = TASKS[task]
    targets = [fn(s, vocab_size) + [EOS] for s in sources]
    src = np.full((len(sources), max(len(s) for s in sources)), PAD, dtype=np.int64)
    tgt = np.full((len(targets), max(len(t) for t in targets)), PAD, dtype=np.int64)
    for i, (s, t) in enumerate(zip(sources, targets)):
        src[i, :len(s)] = s
        tgt[i, :len(t)] = t
    return Batch(src, tgt)


class TaskData:
    """Training stream plus a fixed held-out set that the stream never repeats."""

    def __init__(self, task: str, vocab_size: int, min_len: int, max_len: int,
                 eval_size: int, seed: int):
        if task not in TASKS:
            raise ValueError(f"unknown task {task!r}; choose from {sorted(TASKS)}")
        self.task = task
        self.vocab_size = vocab_size
        self.min_len = min_len
        self.max_len = max_len
        alphabet = vocab_size - FIRST_SYMBOL
        possible = sum(alphabet ** n for n in range(min_len, max_len + 1))
        if eval_size >= possible:
            raise ValueError(f"eval_size={eval_size} leaves no training sequences ({possible} exist)")
        eval_rng = np.random.default_rng([EVAL_SEED, vocab_size, min_len, max_len])
        held_out: list[tuple[int, ...]] = []
        seen: set[tuple[int, ...]] = set()
        while len(held_out) < eval_size:
            s = sample_sequence(eval_rng, vocab_size, min_len, max_len)
            if s not in seen:
                seen.add(s)
                held_out.append(s)
        self.held_out = held_out
        self._held_out_set = seen
        self.rng = np.random.default_rng([seed, 2])

    def train_batch(self, batch_size: int) -> Batch:
        sources = []
        while len(sources) < batch_size:
            s = sample_sequence(self.rng, self.vocab_size, self.min_len, self.max_len)
            if s not in self._held_out_set:
                sources.append(s)
        return pack(self.task, sources, self.vocab_size)

    def eval_batches(self, batch_size: int = 128):
        for i in range(0, len(self.held_out), batch_size):
            yield pack(self.task, self.held_out[i:i + batch_size], self.vocab_size)
