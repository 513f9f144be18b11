"""Layer aggregation without routing: static linear and per-position dynamic weights.

Also holds the shared configuration type and the input-capsule construction used
by the routing aggregators.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .nn import Linear, Module
from .tensor import DimensionError, Parameter, Tensor

STRATEGIES = ("none", "linear", "dynamic-ffn", "dynamic-routing", "em-routing")
ROUTING_STRATEGIES = ("dynamic-routing", "em-routing")
CAPSULE_MODES = ("per-layer", "all-layers")


class ConfigError(ValueError):
    """Invalid configuration; carries every problem found, not just the first."""

    def __init__(self, errors: Sequence[str]):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


@dataclass
class AggregatorConfig:
    strategy: str = "none"
    N: int = 8
    T: int = 3
    capsule_input_mode: str = "all-layers"
    variance_floor: float = 1e-6
    lambda_schedule: list[float] | None = None
    beta_a: float = 0.0
    beta_mu: float = 0.0
    beta_trainable: bool = True
    ffn_hidden: int | None = None
    normalize_weights: bool = False
    normalize_inputs: bool = True

    @property
    def is_routing(self) -> bool:
        return self.strategy in ROUTING_STRATEGIES

    def problems(self, d: int | None = None) -> list[str]:
        errs = []
        if self.strategy not in STRATEGIES:
            errs.append(f"aggregator.strategy: {self.strategy!r} not in {list(STRATEGIES)}")
        if self.capsule_input_mode not in CAPSULE_MODES:
            errs.append(f"aggregator.capsule_input_mode: {self.capsule_input_mode!r} not in {list(CAPSULE_MODES)}")
        if not isinstance(self.T, int) or self.T < 1:
            errs.append(f"aggregator.T: must be an integer >= 1, got {self.T!r}")
        if not isinstance(self.N, int) or self.N < 1:
            errs.append(f"aggregator.N: must be an integer >= 1, got {self.N!r}")
        elif d is not None and self.is_routing and d % self.N:
            errs.append(f"aggregator.N: d={d} is not divisible by N={self.N}")
        if not self.variance_floor > 0:
            errs.append(f"aggregator.variance_floor: must be > 0, got {self.variance_floor!r}")
        if self.lambda_schedule is not None and isinstance(self.T, int):
            if len(self.lambda_schedule) != self.T:
                errs.append(f"aggregator.lambda_schedule: needs {self.T} entries, got {len(self.lambda_schedule)}")
        if self.ffn_hidden is not None and self.ffn_hidden < 1:
            errs.append(f"aggregator.ffn_hidden: must be >= 1, got {self.ffn_hidden!r}")
        return errs

    def validate(self, d: int | None = None) -> None:
        errs = self.problems(d)
        if errs:
            raise ConfigError(errs)


@dataclass
class LayerStack:
    """Hidden states ``H^1..H^L`` of one side of the model, each ``[..., J, d]``."""

    layers: list[Tensor] = field(default_factory=list)

    def __post_init__(self):
        if not self.layers:
            raise DimensionError("a layer stack needs at least one layer")
        shapes = {h.shape for h in self.layers}
        if len(shapes) != 1:
            raise DimensionError(f"layer shapes differ: {sorted(shapes)}")

    @property
    def L(self) -> int:
        return len(self.layers)

    @property
    def top(self) -> Tensor:
        return self.layers[-1]

    @property
    def shape(self) -> tuple[int, ...]:
        return self.layers[0].shape

    def concat(self) -> Tensor:
        """``H^1 || ... || H^L`` along the feature axis."""
        return T.concat(self.layers, axis=-1)


def linear_combine(stack: LayerStack, weights: Sequence[Tensor]) -> Tensor:
    """``sum_l weights[l] * H^l`` with each ``d``-vector gate shared by every position."""
    if len(weights) != stack.L:
        raise ConfigError([f"linear_combine: {len(weights)} weights for {stack.L} layers"])
    out = None
    for w, h in zip(weights, stack.layers):
        term = h * w
        out = term if out is None else out + term
    return out


class FeedForward(Module):
    """Position-wise ``affine -> relu -> affine``."""

    def __init__(self, rng, d_in: int, d_hidden: int, d_out: int):
        self.inner = Linear(rng, d_in, d_hidden)
        self.outer = Linear(rng, d_hidden, d_out)

    def __call__(self, x: Tensor) -> Tensor:
        return self.outer(T.relu(self.inner(x)))


def dynamic_weights(stack: LayerStack, ffns: Sequence, normalize: bool = False) -> list[Tensor]:
    if len(ffns) != stack.L:
        raise ConfigError([f"dynamic_combine: {len(ffns)} networks for {stack.L} layers"])
    context = stack.concat()
    d = stack.shape[-1]
    weights = [f(context) for f in ffns]
    for w in weights:
        if w.shape[-1] != d:
            raise ConfigError([f"dynamic_combine: network output width {w.shape[-1]} != d={d}"])
    if normalize:
        probs = T.softmax(T.stack(weights, axis=0), axis=0)
        weights = [probs[i] for i in range(stack.L)]
    return weights


def dynamic_combine(stack: LayerStack, ffns: Sequence, normalize: bool = False) -> Tensor:
    """Like :func:`linear_combine` but the gates are computed per position from all layers."""
    weights = dynamic_weights(stack, ffns, normalize)
    out = None
    for w, h in zip(weights, stack.layers):
        term = w * h
        out = term if out is None else out + term
    return out


def make_capsule_transforms(rng, L: int, d: int, mode: str) -> list[Linear]:
    if mode not in CAPSULE_MODES:
        raise ConfigError([f"capsule_input_mode {mode!r} not in {list(CAPSULE_MODES)}"])
    d_in = d if mode == "per-layer" else L * d
    return [Linear(rng, d_in, d) for _ in range(L)]


def build_input_capsules(stack: LayerStack, mode: str, transforms: Sequence) -> list[Tensor]:
    """One input capsule per layer, from that layer alone or from all layers."""
    if len(transforms) != stack.L:
        raise ConfigError([f"{len(transforms)} capsule transforms for {stack.L} layers"])
    if mode == "per-layer":
        return [f(h) for f, h in zip(transforms, stack.layers)]
    if mode == "all-layers":
        context = stack.concat()
        return [f(context) for f in transforms]
    raise ConfigError([f"capsule_input_mode {mode!r} not in {list(CAPSULE_MODES)}"])


class TopLayer(Module):
    """The unaggregated baseline: hand back ``H^L`` untouched."""

    def __call__(self, stack: LayerStack) -> Tensor:
        return stack.top


class LinearAggregator(Module):
    def __init__(self, L: int, d: int):
        # start as the top layer alone so training begins from the baseline function
        self.weights = [Parameter(np.zeros(d)) for _ in range(L - 1)] + [Parameter(np.ones(d))]

    def __call__(self, stack: LayerStack) -> Tensor:
        return linear_combine(stack, self.weights)


class DynamicCombinationAggregator(Module):
    def __init__(self, rng, L: int, d: int, hidden: int | None = None, normalize: bool = False):
        hidden = hidden or max(1, d // 2)
        self.ffns = [FeedForward(rng, L * d, hidden, d) for _ in range(L)]
        self.normalize = normalize

    def __call__(self, stack: LayerStack) -> Tensor:
        return dynamic_combine(stack, self.ffns, self.normalize)
