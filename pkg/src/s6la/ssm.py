"""Discretized diagonal state space recurrence.

Continuous dynamics ``h' = A h + B x`` with diagonal negative ``A`` are
discretized over an interval ``delta`` and stepped as
``h_t = abar * h_{t-1} + bbar * x_t`` elementwise along the trailing latent axis.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import Tensor, as_tensor, exp, mul, split, reshape

__all__ = [
    "SsmParams", "DiscretizedSsm", "default_a", "discretize", "discretize_exact",
    "ssm_step", "recurrent_scan", "unrolled_oracle",
]


def default_a(n: int) -> np.ndarray:
    """Real negative diagonal a_i = -(i + 1)."""
    return -np.arange(1, n + 1, dtype=np.float64)


@dataclass
class SsmParams:
    """Diagonal of the transition matrix; may be an array or a Tensor."""

    a: Tensor | np.ndarray

    def __post_init__(self):
        vals = self.a.data if isinstance(self.a, Tensor) else np.asarray(self.a)
        if vals.ndim != 1:
            raise ValueError(f"a must be a vector, got shape {vals.shape}")
        if not np.all(vals < 0):
            raise ValueError("all diagonal entries of A must be negative")

    @property
    def n(self) -> int:
        return self.a.shape[0]

    @classmethod
    def default(cls, n: int = 32) -> "SsmParams":
        return cls(default_a(n))


@dataclass
class DiscretizedSsm:
    abar: Tensor
    bbar: Tensor


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def discretize(delta, params: SsmParams, b) -> DiscretizedSsm:
    """First-order (Taylor) rule: abar = exp(delta * a), bbar = delta * b.

    ``delta`` broadcasts against the latent axis, e.g. a scalar or a field
    with trailing extent 1.
    """
    if np.any(_data(delta) < 0):
        raise ValueError("delta is an interval and must be non-negative")
    delta = as_tensor(delta)
    return DiscretizedSsm(abar=exp(mul(delta, params.a)), bbar=mul(delta, b))


def discretize_exact(delta, params: SsmParams, b) -> DiscretizedSsm:
    """Zero-order-hold rule without the Taylor step (not differentiable).

    bbar_i = (exp(delta a_i) - 1) / (delta a_i) * delta * b_i, with the
    a_i = 0 limit delta * b_i.
    """
    d = np.asarray(_data(delta), dtype=np.float64)
    if np.any(d <= 0):
        raise ValueError("exact discretization needs delta > 0")
    a = _data(params.a)
    bv = _data(b)
    z = d * a
    safe = np.where(z == 0, 1.0, z)
    factor = np.where(z == 0, 1.0, np.expm1(z) / safe)
    return DiscretizedSsm(abar=as_tensor(np.exp(z)), bbar=as_tensor(factor * d * bv))


def ssm_step(h, disc: DiscretizedSsm, x) -> Tensor:
    """One recurrence step ``abar * h + bbar * x``."""
    return disc.abar * h + disc.bbar * x


def _steps(x) -> list:
    if isinstance(x, Tensor):
        t = x.shape[0]
        return [reshape(p, x.shape[1:]) for p in split(x, [1] * t, axis=0)]
    return list(x)


def recurrent_scan(x, disc: DiscretizedSsm | Sequence[DiscretizedSsm], h0) -> list[Tensor]:
    """Run the recurrence over ``x`` (length T); returns the T states.

    ``disc`` is a single time-invariant discretization or one per step.
    """
    xs = _steps(x)
    if isinstance(disc, DiscretizedSsm):
        discs = [disc] * len(xs)
    else:
        discs = list(disc)
        if len(discs) != len(xs):
            raise ValueError(f"{len(xs)} inputs but {len(discs)} discretizations")
    h = as_tensor(h0)
    states = []
    for xt, d in zip(xs, discs):
        h = ssm_step(h, d, xt)
        states.append(h)
    return states


def unrolled_oracle(x, disc: DiscretizedSsm) -> np.ndarray:
    """Closed form h_T = sum_j abar^j * bbar * x_{T-j} from zero state, by explicit powers."""
    xs = [np.asarray(_data(v), dtype=np.float64) for v in _steps(x)]
    abar = np.asarray(_data(disc.abar), dtype=np.float64)
    bbar = np.asarray(_data(disc.bbar), dtype=np.float64)
    t = len(xs)
    total = np.zeros(np.broadcast_shapes(abar.shape, bbar.shape, xs[0].shape))
    for j in range(t):
        total = total + abar ** j * bbar * xs[t - 1 - j]
    return total
