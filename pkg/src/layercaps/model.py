"""Pre-norm encoder/decoder transformer exposing every layer to an aggregator."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .aggregation import (AggregatorConfig, ConfigError, DynamicCombinationAggregator, LayerStack,
                          LinearAggregator, TopLayer)
from .nn import Embedding, LayerNorm, Linear, Module
from .routing import DynamicRoutingAggregator, EMRoutingAggregator, RoutingState
from .tensor import Tensor

PAD, BOS, EOS = 0, 1, 2
FIRST_SYMBOL = 3
_NEG = -1e9


class LengthError(ValueError):
    pass


@dataclass
class ModelConfig:
    L: int = 4
    d: int = 32
    heads: int = 4
    d_ff: int = 64
    vocab_size: int = 16
    max_len: int = 16
    aggregate_encoder: bool = True
    aggregate_decoder: bool = True
    aggregator: AggregatorConfig = field(default_factory=AggregatorConfig)

    def problems(self) -> list[str]:
        errs = []
        for name in ("L", "d", "heads", "d_ff", "max_len"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                errs.append(f"model.{name}: must be a positive integer, got {value!r}")
        if not isinstance(self.vocab_size, int) or self.vocab_size <= FIRST_SYMBOL:
            errs.append(f"model.vocab_size: must exceed {FIRST_SYMBOL} (reserved ids), got {self.vocab_size!r}")
        dims_ok = all(isinstance(v, int) and v >= 1 for v in (self.d, self.heads))
        if dims_ok and self.d % self.heads:
            errs.append(f"model.heads: d={self.d} is not divisible by heads={self.heads}")
        d = self.d if isinstance(self.d, int) else None
        errs.extend(self.aggregator.problems(d))
        return errs

    def validate(self) -> None:
        errs = self.problems()
        if errs:
            raise ConfigError(errs)


@dataclass
class Batch:
    """Padded token matrices; ``tgt_tokens`` ends every row with EOS."""

    src_tokens: np.ndarray
    tgt_tokens: np.ndarray
    src_mask: np.ndarray = None
    tgt_mask: np.ndarray = None

    def __post_init__(self):
        self.src_tokens = np.asarray(self.src_tokens, dtype=np.int64)
        self.tgt_tokens = np.asarray(self.tgt_tokens, dtype=np.int64)
        if self.src_mask is None:
            self.src_mask = self.src_tokens != PAD
        if self.tgt_mask is None:
            self.tgt_mask = self.tgt_tokens != PAD
        self.src_mask = np.asarray(self.src_mask, dtype=bool)
        self.tgt_mask = np.asarray(self.tgt_mask, dtype=bool)
        if self.src_mask.shape != self.src_tokens.shape or self.tgt_mask.shape != self.tgt_tokens.shape:
            raise T.DimensionError("padding masks must match token shapes")

    @property
    def decoder_input(self) -> np.ndarray:
        """Gold prefix for teacher forcing: BOS followed by the target shifted right."""
        bos = np.full((self.tgt_tokens.shape[0], 1), BOS, dtype=np.int64)
        return np.concatenate([bos, np.where(self.tgt_mask, self.tgt_tokens, PAD)[:, :-1]], axis=1)

    def __len__(self) -> int:
        return self.src_tokens.shape[0]

    def take(self, rows) -> "Batch":
        return Batch(self.src_tokens[rows], self.tgt_tokens[rows], self.src_mask[rows], self.tgt_mask[rows])


def sinusoidal_positions(length: int, d: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


class MultiHeadAttention(Module):
    def __init__(self, rng, d: int, heads: int):
        self.heads = heads
        self.query = Linear(rng, d, d)
        # a key bias shifts every score of a query equally, so softmax ignores it
        self.key = Linear(rng, d, d, bias=False)
        self.value = Linear(rng, d, d)
        self.out = Linear(rng, d, d)

    def _split(self, x: Tensor) -> Tensor:
        b, j, d = x.shape
        return T.transpose(T.reshape(x, (b, j, self.heads, d // self.heads)), (0, 2, 1, 3))

    def __call__(self, x: Tensor, memory: Tensor, allowed: np.ndarray) -> Tensor:
        """``allowed`` broadcasts to ``[B, 1, Jq, Jk]``; False entries are never attended."""
        b, jq, d = x.shape
        q = self._split(self.query(x))
        k = self._split(self.key(memory))
        v = self._split(self.value(memory))
        scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(d // self.heads))
        scores = scores + np.where(allowed, 0.0, _NEG)
        ctx = T.matmul(T.softmax(scores, axis=-1), v)
        return self.out(T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, jq, d)))


class FeedForwardBlock(Module):
    def __init__(self, rng, d: int, d_ff: int):
        self.inner = Linear(rng, d, d_ff)
        self.outer = Linear(rng, d_ff, d)

    def __call__(self, x: Tensor) -> Tensor:
        return self.outer(T.relu(self.inner(x)))


class EncoderLayer(Module):
    def __init__(self, rng, cfg: ModelConfig):
        self.attn_norm = LayerNorm(cfg.d)
        self.attn = MultiHeadAttention(rng, cfg.d, cfg.heads)
        self.ffn_norm = LayerNorm(cfg.d)
        self.ffn = FeedForwardBlock(rng, cfg.d, cfg.d_ff)

    def __call__(self, x: Tensor, allowed: np.ndarray) -> Tensor:
        y = self.attn_norm(x)
        x = x + self.attn(y, y, allowed)
        return x + self.ffn(self.ffn_norm(x))


class DecoderLayer(Module):
    def __init__(self, rng, cfg: ModelConfig):
        self.self_norm = LayerNorm(cfg.d)
        self.self_attn = MultiHeadAttention(rng, cfg.d, cfg.heads)
        self.cross_norm = LayerNorm(cfg.d)
        self.cross_attn = MultiHeadAttention(rng, cfg.d, cfg.heads)
        self.ffn_norm = LayerNorm(cfg.d)
        self.ffn = FeedForwardBlock(rng, cfg.d, cfg.d_ff)

    def __call__(self, x: Tensor, memory: Tensor, self_allowed, cross_allowed) -> Tensor:
        y = self.self_norm(x)
        x = x + self.self_attn(y, y, self_allowed)
        x = x + self.cross_attn(self.cross_norm(x), memory, cross_allowed)
        return x + self.ffn(self.ffn_norm(x))


def make_aggregator(rng, L: int, d: int, cfg: AggregatorConfig) -> Module:
    cfg.validate(d)
    if cfg.strategy == "none":
        return TopLayer()
    if cfg.strategy == "linear":
        return LinearAggregator(L, d)
    if cfg.strategy == "dynamic-ffn":
        return DynamicCombinationAggregator(rng, L, d, cfg.ffn_hidden, cfg.normalize_weights)
    if cfg.strategy == "dynamic-routing":
        return DynamicRoutingAggregator(rng, L, d, cfg)
    return EMRoutingAggregator(rng, L, d, cfg)


class ToyTransformer(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng([seed, 0])
        self.src_embed = Embedding(rng, cfg.vocab_size, cfg.d)
        self.tgt_embed = Embedding(rng, cfg.vocab_size, cfg.d)
        self.encoder = [EncoderLayer(rng, cfg) for _ in range(cfg.L)]
        self.decoder = [DecoderLayer(rng, cfg) for _ in range(cfg.L)]
        self.encoder_norm = LayerNorm(cfg.d)
        self.decoder_norm = LayerNorm(cfg.d)
        self.project = Linear(rng, cfg.d, cfg.vocab_size)
        # aggregators draw from their own stream so the baseline weights do not
        # depend on which strategy is configured
        agg_rng = np.random.default_rng([seed, 1])
        if cfg.aggregate_encoder:
            self.encoder_aggregator = make_aggregator(agg_rng, cfg.L, cfg.d, cfg.aggregator)
        if cfg.aggregate_decoder:
            self.decoder_aggregator = make_aggregator(agg_rng, cfg.L, cfg.d, cfg.aggregator)
        self.positions = sinusoidal_positions(cfg.max_len, cfg.d)
        self.assign_names()

    # -- pieces ---------------------------------------------------------------
    def _embed(self, table: Embedding, tokens: np.ndarray) -> Tensor:
        length = tokens.shape[1]
        if length > self.cfg.max_len:
            raise LengthError(f"sequence length {length} exceeds max_len={self.cfg.max_len}")
        return table(tokens) * math.sqrt(self.cfg.d) + self.positions[:length]

    def encode(self, src_tokens: np.ndarray, src_mask: np.ndarray | None = None) -> LayerStack:
        src_tokens = np.asarray(src_tokens, dtype=np.int64)
        if src_mask is None:
            src_mask = src_tokens != PAD
        allowed = src_mask[:, None, None, :]
        x = self._embed(self.src_embed, src_tokens)
        layers = []
        for layer in self.encoder:
            x = layer(x, allowed)
            layers.append(x)
        return LayerStack(layers)

    def aggregate(self, stack: LayerStack, side: str) -> Tensor:
        """Fused representation of one side; the top layer when that side is not aggregated."""
        agg = getattr(self, f"{side}_aggregator", None)
        return stack.top if agg is None else agg(stack)

    def memory(self, stack: LayerStack) -> Tensor:
        return self.encoder_norm(self.aggregate(stack, "encoder"))

    def decode(self, tgt_in: np.ndarray, memory: Tensor, src_mask: np.ndarray) -> LayerStack:
        tgt_in = np.asarray(tgt_in, dtype=np.int64)
        j = tgt_in.shape[1]
        causal = np.tril(np.ones((j, j), dtype=bool))
        self_allowed = causal[None, None] & (tgt_in != PAD)[:, None, None, :]
        self_allowed |= np.eye(j, dtype=bool)[None, None]  # a query always sees itself
        cross_allowed = src_mask[:, None, None, :]
        x = self._embed(self.tgt_embed, tgt_in)
        layers = []
        for layer in self.decoder:
            x = layer(x, memory, self_allowed, cross_allowed)
            layers.append(x)
        return LayerStack(layers)

    def logits_from(self, dec_stack: LayerStack) -> Tensor:
        return self.project(self.decoder_norm(self.aggregate(dec_stack, "decoder")))

    def forward(self, batch: Batch) -> Tensor:
        """Teacher-forced logits ``[B, J_tgt, vocab]``."""
        mem = self.memory(self.encode(batch.src_tokens, batch.src_mask))
        return self.logits_from(self.decode(batch.decoder_input, mem, batch.src_mask))

    __call__ = forward

    def loss(self, batch: Batch) -> Tensor:
        return T.cross_entropy(self.forward(batch), batch.tgt_tokens, batch.tgt_mask)

    def routing_states(self) -> dict[str, RoutingState]:
        out = {}
        for side in ("encoder", "decoder"):
            agg = getattr(self, f"{side}_aggregator", None)
            state = getattr(agg, "last_state", None)
            if state is not None:
                out[side] = state
        return out

    def greedy_decode(self, src_tokens: np.ndarray, max_steps: int | None = None) -> np.ndarray:
        """Greedy target sequences (without BOS), PAD after the first EOS."""
        src_tokens = np.atleast_2d(np.asarray(src_tokens, dtype=np.int64))
        src_mask = src_tokens != PAD
        max_steps = min(max_steps or self.cfg.max_len, self.cfg.max_len)
        with T.no_grad():
            mem = self.memory(self.encode(src_tokens, src_mask))
            out = np.full((src_tokens.shape[0], 1), BOS, dtype=np.int64)
            done = np.zeros(src_tokens.shape[0], dtype=bool)
            for _ in range(max_steps):
                logits = self.logits_from(self.decode(out, mem, src_mask))
                nxt = np.where(done, PAD, logits.data[:, -1].argmax(axis=-1))
                out = np.concatenate([out, nxt[:, None]], axis=1)
                done |= nxt == EOS
                if done.all():
                    break
        return out[:, 1:]
