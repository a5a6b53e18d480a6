"""Selective state space layer aggregation around convolutional residual blocks.

Feature maps are channels-last, ``[..., H, W, C]``. The latent state ``h``
carries ``N`` channels per spatial position and is concatenated to the block
input; each block's output drives a selective update of ``h``.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .nn import Conv, Linear, Module
from .ssm import DiscretizedSsm, SsmParams, default_a, discretize, ssm_step
from .tensor import (Tensor, as_tensor, avg_pool2d, concat, exp, layer_norm, mean, mul,
                     relu, reshape, softplus)

__all__ = [
    "init_hidden", "latent_update", "stage_downsample", "rla_baseline_step",
    "residual_aggregation_view", "Bottleneck", "CnnS6laBlock", "CnnNet",
]

DELTA_INIT = 0.1


def init_hidden(h: int, w: int, n: int, seed: int) -> np.ndarray:
    """Kaiming-normal latent state [H, W, N] with std sqrt(2 / N)."""
    rng = np.random.default_rng(seed)
    return rng.normal(0.0, np.sqrt(2.0 / n), size=(h, w, n))


def latent_update(h_prev, delta, b, u, ssm: SsmParams) -> Tensor:
    """h_next = exp(delta * a) * h_prev + (delta * b) * u at every position."""
    return ssm_step(h_prev, discretize(delta, ssm, b), u)


def stage_downsample(h, factor: int = 2) -> Tensor:
    """Spatial average pooling between stages; N is unchanged."""
    h = as_tensor(h)
    if h.shape[-3] % factor or h.shape[-2] % factor:
        raise ValueError(f"latent extents {h.shape[-3:-1]} not divisible by {factor}")
    return avg_pool2d(h, factor)


def rla_baseline_step(agg_prev, x_prev, conv1: Callable, conv3: Callable) -> tuple[Tensor, Tensor]:
    """Additive recurrent aggregation: agg += conv1(x); x_next = conv3(agg) + x."""
    agg_prev, x_prev = as_tensor(agg_prev), as_tensor(x_prev)
    if agg_prev.shape != x_prev.shape:
        raise ValueError(f"aggregate {agg_prev.shape} and features {x_prev.shape} differ")
    agg = agg_prev + conv1(x_prev)
    return agg, conv3(agg) + x_prev


def residual_aggregation_view(fs: Sequence[Callable], x0) -> tuple[list[Tensor], list[Tensor]]:
    """Run a plain residual stack and rebuild it in aggregation form.

    Returns ``(aggregates, outputs)`` where ``aggregates[t] = x0 + sum_{i<=t} f_i(x_i)``
    and ``outputs[t]`` is x_{t+1} from the direct forward. Aggregates are
    accumulated starting from ``x0`` so that ``aggregates[t] == outputs[t]`` holds exactly.
    """
    x = as_tensor(x0)
    aggregates, outputs = [], []
    agg = x
    for f in fs:
        fx = f(x)
        agg = agg + fx
        x = x + fx
        aggregates.append(agg)
        outputs.append(x)
    return aggregates, outputs


class Bottleneck(Module):
    """Channel norm, then 1x1 -> 3x3 -> 1x1 convolutions with ReLU; the last conv starts at zero."""

    def __init__(self, rng, cin: int, cout: int, mid: int):
        super().__init__()
        self.c1 = self.child("c1", Conv(rng, cin, mid, 1))
        self.c2 = self.child("c2", Conv(rng, mid, mid, 3))
        self.c3 = self.child("c3", Conv(rng, mid, cout, 1, zero=True))

    def __call__(self, x) -> Tensor:
        return self.c3(relu(self.c2(relu(self.c1(layer_norm(x))))))


class CnnS6laBlock(Module):
    """Residual block whose input is concat(x, h) and which updates h selectively.

    ``a_log`` may be shared between blocks; the transition diagonal is
    ``a = -exp(a_log)``, negative by construction.
    """

    def __init__(self, rng, d: int, n: int, mid: int | None = None, a_log=None,
                 selective: bool = True, pool_delta: str = "per_position"):
        super().__init__()
        if pool_delta not in ("per_position", "global"):
            raise ValueError(f"unknown pool_delta {pool_delta!r}")
        self.d, self.n = d, n
        self.selective = selective
        self.pool_delta = pool_delta
        self.block = self.child("block", Bottleneck(rng, d + n, d, mid or d))
        self.w_u = self.child("w_u", Conv(rng, d, 1, 1))
        dbias = float(np.log(np.expm1(DELTA_INIT)))
        if selective:
            self.w_delta = self.child("w_delta", Conv(rng, d, 1, 1, bias=dbias))
            self.w_b = self.child("w_b", Conv(rng, d, n, 1))
        else:
            self.delta_const = self.param("delta_const", np.full(1, dbias))
            self.b_const = self.param("b_const", rng.normal(0.0, np.sqrt(2.0 / d), size=n))
        if a_log is None:
            a_log = self.param("a_log", np.log(-default_a(n)))
        self.a_log = a_log

    @property
    def ssm(self) -> SsmParams:
        return SsmParams(-exp(self.a_log))

    def selective_params(self, o) -> tuple[Tensor, Tensor, Tensor]:
        """(u, delta, b) driven by the block output."""
        u = self.w_u(o)
        if not self.selective:
            return u, softplus(self.delta_const), self.b_const
        dz, b = self.w_delta(o), self.w_b(o)
        if self.pool_delta == "global":
            dz = mean(dz, axis=(-3, -2), keepdims=True)
            b = mean(b, axis=(-3, -2), keepdims=True)
        return u, softplus(dz), b

    def __call__(self, x, h_prev) -> tuple[Tensor, Tensor]:
        x, h_prev = as_tensor(x), as_tensor(h_prev)
        if x.shape[:-1] != h_prev.shape[:-1]:
            raise ValueError(f"feature map {x.shape} and latent {h_prev.shape} disagree spatially")
        o = self.block(concat([x, h_prev], axis=-1))
        u, delta, b = self.selective_params(o)
        h_next = latent_update(h_prev, delta, b, u, self.ssm)
        return o + x, h_next


class _PlainBlock(Module):
    def __init__(self, rng, d: int, mid: int):
        super().__init__()
        self.block = self.child("block", Bottleneck(rng, d, d, mid))

    def __call__(self, x):
        return x + self.block(x)


class _RlaBlock(Module):
    def __init__(self, rng, d: int, mid: int):
        super().__init__()
        self.conv1 = self.child("conv1", Conv(rng, d, d, 1))
        self.block = self.child("block", Bottleneck(rng, d, d, mid))

    def __call__(self, agg, x):
        return rla_baseline_step(agg, x, self.conv1, self.block)


class CnnNet(Module):
    """Stem, stages of residual blocks with optional aggregation, pooled linear head.

    ``input_shape`` is ``(F,)`` for feature vectors (lifted to a ``grid x grid``
    map by a linear stem) or ``(H, W, C)`` for images.
    """

    def __init__(self, input_shape: Sequence[int], classes: int, *, width: int = 16,
                 latent_n: int = 32, blocks: Sequence[int] = (8,), aggregation: str = "s6la",
                 grid: int = 2, mid: int | None = None, trainable_h: bool = True,
                 selective: bool = True, pool_delta: str = "per_position", seed: int = 0):
        super().__init__()
        if aggregation not in ("none", "rla", "s6la"):
            raise ValueError(f"unknown aggregation {aggregation!r}")
        rng = np.random.default_rng(seed)
        self.input_shape = tuple(input_shape)
        self.aggregation = aggregation
        self.width, self.n = width, latent_n
        self.trainable_h = trainable_h
        self.seed = seed
        mid = mid or width
        if len(self.input_shape) == 1:
            self.spatial = (grid, grid)
            self.stem = self.child("stem", Linear(rng, self.input_shape[0], grid * grid * width))
        else:
            self.spatial = tuple(self.input_shape[:2])
            self.stem = self.child("stem", Conv(rng, self.input_shape[2], width, 3))
        self.blocks_per_stage = tuple(blocks)
        stage_factor = 2 ** (len(blocks) - 1)
        if self.spatial[0] % stage_factor or self.spatial[1] % stage_factor:
            raise ValueError(f"spatial extents {self.spatial} cannot be halved {len(blocks) - 1} times")

        if aggregation == "s6la":
            self.a_log = self.param("a_log", np.log(-default_a(latent_n)))
            h0 = init_hidden(*self.spatial, latent_n, seed)
            if trainable_h:
                self.h0 = self.param("h0", h0)
            else:
                self._h_eval = h0
                self._h_stream = np.random.default_rng([seed, 1])
        self.layers = []
        for s, count in enumerate(blocks):
            for i in range(count):
                name = f"s{s}b{i}"
                if aggregation == "s6la":
                    blk = CnnS6laBlock(rng, width, latent_n, mid, a_log=self.a_log,
                                       selective=selective, pool_delta=pool_delta)
                elif aggregation == "rla":
                    blk = _RlaBlock(rng, width, mid)
                else:
                    blk = _PlainBlock(rng, width, mid)
                self.layers.append(self.child(name, blk))
        head_in = width + (latent_n if aggregation == "s6la" else 0)
        self.head = self.child("head", Linear(rng, head_in, classes, std=0.01))

    def _initial_latent(self, batch: int, training: bool, dtype) -> Tensor:
        if self.trainable_h:
            h0 = self.h0
        elif training:
            h0 = as_tensor(self._h_stream.normal(0.0, np.sqrt(2.0 / self.n),
                                                 size=self.spatial + (self.n,)).astype(dtype))
        else:
            h0 = as_tensor(self._h_eval.astype(dtype))
        return mul(h0, np.ones((batch, 1, 1, 1), dtype=dtype))

    def features(self, x, training: bool = False) -> Tensor:
        x = as_tensor(x)
        batch = x.shape[0]
        if len(self.input_shape) == 1:
            z = reshape(self.stem(x), (batch,) + self.spatial + (self.width,))
        else:
            z = relu(self.stem(x))
        h = agg = None
        if self.aggregation == "s6la":
            h = self._initial_latent(batch, training, z.dtype)
        elif self.aggregation == "rla":
            agg = as_tensor(np.zeros(z.shape, dtype=z.dtype))
        k = 0
        for s, count in enumerate(self.blocks_per_stage):
            if s > 0:
                z = avg_pool2d(z, 2)
                if h is not None:
                    h = stage_downsample(h, 2)
                if agg is not None:
                    agg = avg_pool2d(agg, 2)
            for _ in range(count):
                blk = self.layers[k]
                k += 1
                if self.aggregation == "s6la":
                    z, h = blk(z, h)
                elif self.aggregation == "rla":
                    agg, z = blk(agg, z)
                else:
                    z = blk(z)
        pooled = mean(z, axis=(-3, -2))
        if h is not None:
            pooled = concat([pooled, mean(h, axis=(-3, -2))], axis=-1)
        return pooled

    def __call__(self, x, training: bool = False) -> Tensor:
        return self.head(self.features(x, training))
