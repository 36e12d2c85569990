"""Discrete decision sampling: Gumbel-Max, its softmax relaxation, and the
hard-forward / relaxed-backward split used to train the gating policy.

Probabilities are handled in log space (log-softmax of logits) so the
perturbed argmax never sees log(0); uniform draws are clamped away from
{0, 1} to keep the noise finite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import DomainError, Tensor

U_CLIP = 1e-12

TAU_INITIAL = 5.0
TAU_DECAY = 0.05


@dataclass
class GumbelConfig:
    temperature: float
    num_categories: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.temperature <= 0.0:
            raise DomainError(f"temperature must be positive, got {self.temperature}")


@dataclass
class DecisionSample:
    """One gated decision: hard one-hot, its relaxed surrogate, shared noise."""

    hard: np.ndarray          # int one-hot, length K
    relaxed: Tensor           # on the simplex, graph-recorded
    gumbel_noise: np.ndarray  # the g_k draws used by both

    @property
    def index(self) -> int:
        return int(np.argmax(self.hard))


def gumbel_from_uniform(u: np.ndarray) -> np.ndarray:
    return -np.log(-np.log(u))


def sample_gumbel(shape, rng: np.random.Generator) -> np.ndarray:
    """Standard Gumbel(0, 1) noise; accepts an int K or a shape tuple."""
    u = np.clip(rng.random(shape), U_CLIP, 1.0 - U_CLIP)
    return gumbel_from_uniform(u)


def gumbel_max(log_p: np.ndarray, g: np.ndarray) -> int:
    """Perturbed argmax; ties break toward the lower index."""
    return int(np.argmax(np.asarray(log_p) + g))


def gumbel_softmax(log_p: Tensor, g: np.ndarray, tau: float) -> Tensor:
    """Relaxed sample softmax((log_p + g) / tau), graph-recorded through log_p."""
    if tau <= 0.0:
        raise DomainError(f"temperature must be positive, got {tau}")
    perturbed = (log_p + Tensor(g)) * (1.0 / tau)
    return T.softmax(perturbed, axis=-1)


def straight_through_decision(log_p: Tensor, tau: float, rng: np.random.Generator) -> DecisionSample:
    """Sample a hard decision and its relaxed twin from one noise draw.

    Downstream forward computation should use ``hard``; gradients reach
    log_p through ``relaxed`` (see straight_through_scalar for the value
    substitution).
    """
    k = log_p.data.shape[-1]
    g = sample_gumbel(k, rng)
    idx = gumbel_max(log_p.data, g)
    hard = np.zeros(k, dtype=np.int64)
    hard[idx] = 1
    relaxed = gumbel_softmax(log_p, g, tau)
    return DecisionSample(hard=hard, relaxed=relaxed, gumbel_noise=g)


def straight_through_scalar(relaxed_entry: Tensor, hard_value: np.ndarray) -> Tensor:
    """Forward the hard value, backprop as if it were the relaxed entry.

    relaxed_entry - detach(relaxed_entry) is exactly zero in the forward
    pass, so the output's value equals hard_value while its gradient
    w.r.t. upstream tensors equals the relaxed entry's.
    """
    return relaxed_entry - relaxed_entry.detach() + Tensor(hard_value)


def temperature(epoch: int, initial: float = TAU_INITIAL, decay: float = TAU_DECAY) -> float:
    """Per-epoch exponential anneal tau(e) = initial * exp(-decay * e)."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return float(initial * np.exp(-decay * epoch))
