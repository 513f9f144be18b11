"""Capsule routing-by-agreement over layer representations.

Shapes use ``...`` for any leading batch/position dimensions; routing is done
independently for every leading index. ``L`` input capsules (one per layer)
vote for ``N`` output capsules of width ``h = d // N``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .aggregation import AggregatorConfig, ConfigError, LayerStack, build_input_capsules, make_capsule_transforms
from .nn import Module, glorot
from .tensor import NumericError, Parameter, Tensor

_GAUSS_CONST = 0.5 * (1.0 + math.log(2.0 * math.pi))
_MASKED = -1e300


@dataclass
class CapsuleOutput:
    capsules: Tensor   # [..., N, h]
    flattened: Tensor  # [..., N*h]


@dataclass
class RoutingState:
    """Detached numpy snapshot of one routing call."""

    B: np.ndarray | None = None
    C: np.ndarray | None = None
    V: np.ndarray | None = None
    mu: np.ndarray | None = None
    sigma2: np.ndarray | None = None
    act_in: np.ndarray | None = None
    act_out: np.ndarray | None = None
    iteration_trace: list[np.ndarray] = field(default_factory=list)


def squash(s: Tensor, axis: int = -1) -> Tensor:
    """Shrink ``s`` to norm ``|s|^2 / (1 + |s|^2)`` keeping its direction; 0 maps to 0."""
    n = T.norm(s, axis=axis, keepdims=True)
    return s * (n / (1.0 + T.square(n)))


def compute_votes(capsules: Tensor, weight: Tensor, n_out: int) -> Tensor:
    """Votes ``V[..., l, n, :] = capsules[..., l, :] @ weight[l][:, n*h:(n+1)*h]``.

    ``capsules`` is ``[..., L, d]`` and ``weight`` is ``[L, d, d]``, i.e. the
    ``N`` per-pair ``d x h`` matrices of one input capsule laid side by side.
    """
    *lead, L, d = capsules.shape
    if weight.shape != (L, d, d):
        raise T.DimensionError(f"vote weights {weight.shape} do not match capsules {capsules.shape}")
    if d % n_out:
        raise ConfigError([f"d={d} is not divisible by N={n_out}"])
    m = int(np.prod(lead)) if lead else 1
    x = T.transpose(T.reshape(capsules, (m, L, d)), (1, 0, 2))
    v = T.transpose(T.matmul(x, weight), (1, 0, 2))
    return T.reshape(v, (*lead, L, n_out, d // n_out))


def input_activation(capsules: Tensor, weight: Tensor) -> Tensor:
    """Per-layer presence probability ``sigmoid(capsules[..., l, :] . weight[l])``."""
    if weight.shape != capsules.shape[-2:]:
        raise T.DimensionError(f"activation weights {weight.shape} vs capsules {capsules.shape}")
    return T.sigmoid(T.tsum(capsules * weight, axis=-1))


def dynamic_routing(votes: Tensor, iterations: int,
                    initial_logits: np.ndarray | None = None) -> tuple[CapsuleOutput, RoutingState]:
    if iterations < 1:
        raise ConfigError([f"routing iterations must be >= 1, got {iterations}"])
    *lead, L, N, h = votes.shape
    logits = T.zeros((*lead, L, N)) if initial_logits is None else T.as_tensor(initial_logits)
    trace = []
    for _ in range(iterations):
        c = T.softmax(logits, axis=-1)
        trace.append(c.data.copy())
        s = T.tsum(T.reshape(c, (*lead, L, N, 1)) * votes, axis=-3)
        omega = squash(s)
        agreement = T.tsum(T.reshape(omega, (*lead, 1, N, h)) * votes, axis=-1)
        logits = logits + agreement
    state = RoutingState(B=logits.data, C=c.data, V=votes.data, iteration_trace=trace)
    return CapsuleOutput(omega, T.reshape(omega, (*lead, N * h))), state


def _m_step(c, act_in, votes, lam, beta_a, beta_mu, floor):
    """Returns mean, variance and the pre-logistic activation of each output capsule."""
    *lead, L, N, h = votes.shape
    cw = c * T.reshape(act_in, (*lead, L, 1))
    total = T.tsum(cw, axis=-2)                       # [..., N]
    # an output capsule with no incoming mass is switched off: mu = 0, var = floor
    denom = T.reshape(T.where(total.data > 0, total, 1.0), (*lead, N, 1))
    cw4 = T.reshape(cw, (*lead, L, N, 1))
    mu = T.tsum(cw4 * votes, axis=-3) / denom
    dev = votes - T.reshape(mu, (*lead, 1, N, h))
    var = T.tsum(cw4 * T.square(dev), axis=-3) / denom
    sigma2 = T.clamp_min(var, floor)
    cost = (0.5 * T.log(sigma2) + _GAUSS_CONST) * T.reshape(total, (*lead, N, 1))
    logit = lam * (beta_a - beta_mu * total - T.tsum(cost, axis=-1))
    return mu, sigma2, logit


def m_step(c, act_in, votes, lam, beta_a=0.0, beta_mu=0.0, floor=1e-6):
    mu, sigma2, logit = _m_step(c, act_in, votes, lam, beta_a, beta_mu, floor)
    return mu, sigma2, T.sigmoid(logit)


def _e_step(mu, sigma2, log_act, votes):
    *lead, L, N, h = votes.shape
    dev = votes - T.reshape(mu, (*lead, 1, N, h))
    s2 = T.reshape(sigma2, (*lead, 1, N, h))
    log_p = T.tsum(-0.5 * T.log(2.0 * math.pi * s2) - T.square(dev) / (2.0 * s2), axis=-1)
    score = log_p + T.reshape(log_act, (*lead, 1, N))
    # zero-probability entries stay finite so an all-zero row falls back to uniform
    score = T.where(np.isneginf(score.data), _MASKED, score)
    return T.softmax(score, axis=-1)


def e_step(mu, sigma2, act_out, votes):
    """Responsibilities ``C[..., l, n]`` proportional to ``act_out[n] * p_n(votes[l, n])``."""
    act = T.as_tensor(act_out)
    with np.errstate(divide="ignore"):
        log_act = T.log(act) if act.requires_grad else Tensor(np.log(act.data))
    return _e_step(mu, sigma2, log_act, votes)


def default_lambda_schedule(iterations: int) -> list[float]:
    return [1.0 + t for t in range(iterations)]


def em_routing(votes: Tensor, act_in: Tensor, iterations: int, lambdas=None,
               beta_a=0.0, beta_mu=0.0, floor: float = 1e-6) -> tuple[CapsuleOutput, RoutingState]:
    if iterations < 1:
        raise ConfigError([f"routing iterations must be >= 1, got {iterations}"])
    lambdas = default_lambda_schedule(iterations) if lambdas is None else list(lambdas)
    if len(lambdas) != iterations:
        raise ConfigError([f"lambda schedule has {len(lambdas)} entries, expected {iterations}"])
    *lead, L, N, h = votes.shape
    c = Tensor(np.full((*lead, L, N), 1.0 / N))
    trace = []
    for t in range(iterations):
        trace.append(c.data.copy())
        mu, sigma2, logit = _m_step(c, act_in, votes, lambdas[t], beta_a, beta_mu, floor)
        for stat in (mu, sigma2, logit):
            if not np.isfinite(stat.data).all():
                raise NumericError(f"EM routing: non-finite statistics at iteration {t + 1}")
        c = _e_step(mu, sigma2, T.log_sigmoid(logit), votes)
    act_out = T.sigmoid(logit)
    omega = T.reshape(act_out, (*lead, N, 1)) * mu
    state = RoutingState(C=c.data, V=votes.data, mu=mu.data, sigma2=sigma2.data,
                         act_in=act_in.data, act_out=act_out.data, iteration_trace=trace)
    return CapsuleOutput(omega, T.reshape(omega, (*lead, N * h))), state


def normalized(stack: LayerStack) -> LayerStack:
    """Layer-normalise every ``H^l`` without gain or bias.

    Pre-norm blocks leave the residual stream unscaled, and its norm grows with
    depth. Routing compares votes by length and variance, so feed it unit-scale
    states, as a post-norm stack would.
    """
    d = stack.layers[0].shape[-1]
    one, zero = Tensor(np.ones(d)), Tensor(np.zeros(d))
    return LayerStack([T.layer_norm(h, one, zero) for h in stack.layers])


class DynamicRoutingAggregator(Module):
    """Input capsules from the layer stack, votes, then iterative dynamic routing."""

    def __init__(self, rng: np.random.Generator, L: int, d: int, config: AggregatorConfig):
        self.config = config
        self.n_out = config.N
        self.transforms = make_capsule_transforms(rng, L, d, config.capsule_input_mode)
        self.votes = Parameter(glorot(rng, d, d // config.N, shape=(L, d, d)))
        self.last_state: RoutingState | None = None

    def capsules(self, stack: LayerStack) -> Tensor:
        if self.config.normalize_inputs:
            stack = normalized(stack)
        return T.stack(build_input_capsules(stack, self.config.capsule_input_mode, self.transforms), axis=-2)

    def route(self, stack: LayerStack) -> tuple[CapsuleOutput, RoutingState]:
        v = compute_votes(self.capsules(stack), self.votes, self.n_out)
        return dynamic_routing(v, self.config.T)

    def __call__(self, stack: LayerStack) -> Tensor:
        out, self.last_state = self.route(stack)
        return out.flattened


class EMRoutingAggregator(DynamicRoutingAggregator):
    def __init__(self, rng: np.random.Generator, L: int, d: int, config: AggregatorConfig):
        super().__init__(rng, L, d, config)
        self.activation = Parameter(glorot(rng, d, 1, shape=(L, d)))
        trainable = config.beta_trainable
        self.beta_a = Parameter(np.array(config.beta_a), trainable=trainable)
        self.beta_mu = Parameter(np.array(config.beta_mu), trainable=trainable)

    def route(self, stack: LayerStack) -> tuple[CapsuleOutput, RoutingState]:
        caps = self.capsules(stack)
        v = compute_votes(caps, self.votes, self.n_out)
        a_in = input_activation(caps, self.activation)
        cfg = self.config
        return em_routing(v, a_in, cfg.T, cfg.lambda_schedule, self.beta_a, self.beta_mu,
                          cfg.variance_floor)
