"""Selective state space layer aggregation inside a transformer stack.

Token matrices are ``[..., L + 1, D]`` with the class token in the last row.
The latent state is ``[..., D, N]``: the class token drives a selective,
rank-1 update of ``h`` and the patch tokens are mixed multiplicatively with it.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .nn import Linear, Module, kaiming_normal
from .ssm import SsmParams, default_a, discretize, ssm_step
from .tensor import (Tensor, as_tensor, concat, exp, layer_norm, matmul, mean,
                     mul, relu, reshape, softmax_rows, softplus, split, transpose)

__all__ = [
    "split_tokens", "self_attention", "TransformerLayer", "VitS6laLayer", "VitNet", "patchify",
]


def _swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, tuple(axes))


def split_tokens(x) -> tuple[Tensor, Tensor]:
    """(patch tokens [..., L, D], class token [..., 1, D]); class token is the last row."""
    x = as_tensor(x)
    rows = x.shape[-2]
    if rows < 2:
        raise ValueError(f"need at least one patch and a class token, got {rows} rows")
    x_p, x_c = split(x, [rows - 1, 1], axis=-2)
    return x_p, x_c


def self_attention(x, wq, wk, wv, mask=None) -> Tensor:
    """softmax(Q K^T / sqrt(D)) V with single-head projections."""
    q, k, v = matmul(x, wq), matmul(x, wk), matmul(x, wv)
    scores = matmul(q, _swap_last(k)) / np.sqrt(wq.shape[-1])
    if mask is not None:
        scores = scores + mask
    return matmul(softmax_rows(scores), v)


class _Norm(Module):
    def __init__(self, d: int):
        super().__init__()
        self.gain = self.param("gain", np.ones(d))
        self.shift = self.param("shift", np.zeros(d))

    def __call__(self, x):
        return layer_norm(x) * self.gain + self.shift


class TransformerLayer(Module):
    """A = x + SelfAttention(x); out = A + MLP(Norm(A))."""

    def __init__(self, rng, d: int, mlp_hidden: int | None = None):
        super().__init__()
        self.d = d
        std = 1.0 / np.sqrt(d)
        self.wq = self.param("wq", rng.normal(0, std, (d, d)))
        self.wk = self.param("wk", rng.normal(0, std, (d, d)))
        self.wv = self.param("wv", rng.normal(0, std, (d, d)))
        self.norm = self.child("norm", _Norm(d))
        hidden = mlp_hidden or 2 * d
        self.fc1 = self.child("fc1", Linear(rng, d, hidden))
        self.fc2 = self.child("fc2", Linear(rng, hidden, d, std=0.02))

    def mlp(self, x) -> Tensor:
        return self.fc2(relu(self.fc1(x)))

    def vanilla_layer(self, x) -> Tensor:
        x = as_tensor(x)
        a = x + self_attention(x, self.wq, self.wk, self.wv)
        return a + self.mlp(self.norm(a))

    def __call__(self, x, h_prev=None):
        return self.vanilla_layer(x), h_prev


class VitS6laLayer(TransformerLayer):
    """Attention + MLP layer with class-token-driven latent update.

    ``combine`` selects how ``h`` reaches the patches: ``"multiply"`` computes
    ``x_p + (x_p @ h) @ w_o``; ``"concat"`` appends the latent summary
    (mean of h over the embedding axis) to each patch and projects back to D.
    """

    def __init__(self, rng, d: int, n: int, mlp_hidden: int | None = None, a_log=None,
                 combine: str = "multiply", selective: bool = True):
        if combine not in ("multiply", "concat"):
            raise ValueError(f"unknown combine mode {combine!r}")
        super().__init__(rng, d, mlp_hidden)
        self.n = n
        self.combine = combine
        self.selective = selective
        std = 1.0 / np.sqrt(d)
        dbias = float(np.log(np.expm1(0.1)))
        if selective:
            self.w_delta = self.child("w_delta", Linear(rng, d, 1, std=0.02, bias=dbias))
            self.w_b = self.child("w_b", Linear(rng, d, n, std=std))
        else:
            self.delta_const = self.param("delta_const", np.full((1, 1), dbias))
            self.b_const = self.param("b_const", rng.normal(0, std, (1, n)))
        if combine == "multiply":
            self.w_o = self.param("w_o", rng.normal(0, 0.02, (n, d)))
        else:
            self.mix = self.child("mix", Linear(rng, d + n, d, std=0.02))
        if a_log is None:
            a_log = self.param("a_log", np.log(-default_a(n)))
        self.a_log = a_log

    @property
    def ssm(self) -> SsmParams:
        return SsmParams(-exp(self.a_log))

    def selective_params(self, x_c) -> tuple[Tensor, Tensor]:
        """(delta [..., 1, 1], b [..., 1, N]) from the class token."""
        if not self.selective:
            return softplus(self.delta_const), self.b_const
        return softplus(self.w_delta(x_c)), self.w_b(x_c)

    def latent_update(self, h_prev, x_c, delta=None, b=None) -> Tensor:
        """h[d, n] <- exp(delta a_n) h[d, n] + delta b_n x_c[d]."""
        x_c = as_tensor(x_c)
        if delta is None or b is None:
            d_sel, b_sel = self.selective_params(x_c)
            delta = d_sel if delta is None else delta
            b = b_sel if b is None else b
        return ssm_step(h_prev, discretize(delta, self.ssm, b), _swap_last(x_c))

    def patch_update(self, x_p, h) -> Tensor:
        x_p = as_tensor(x_p)
        if self.combine == "multiply":
            return x_p + matmul(matmul(x_p, h), self.w_o)
        return self.concat_update(x_p, h)

    def concat_update(self, x_p, h) -> Tensor:
        summary = mean(as_tensor(h), axis=-2, keepdims=True)
        rows = np.ones(x_p.shape[:-1] + (1,), dtype=x_p.dtype)
        return x_p + self.mix(concat([x_p, mul(summary, rows)], axis=-1))

    def __call__(self, x, h_prev) -> tuple[Tensor, Tensor]:
        x_in = self.vanilla_layer(x)
        x_p, x_c = split_tokens(x_in)
        h_next = self.latent_update(h_prev, x_c)
        return concat([self.patch_update(x_p, h_next), x_c], axis=-2), h_next


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """[B, H, W, C] -> [B, (H/p)(W/p), p*p*C] in row-major patch order."""
    b, h, w, c = images.shape
    if h % patch or w % patch:
        raise ValueError(f"image {h}x{w} not divisible into {patch}x{patch} patches")
    x = images.reshape(b, h // patch, patch, w // patch, patch, c)
    return x.transpose(0, 1, 3, 2, 4, 5).reshape(b, (h // patch) * (w // patch), patch * patch * c)


class VitNet(Module):
    """Token embedding, learned positions, a stack of layers, class-token head.

    Feature vectors ``(F,)`` become F tokens (one per feature); images
    ``(H, W, C)`` are cut into ``patch x patch`` patches.
    """

    def __init__(self, input_shape: Sequence[int], classes: int, *, width: int = 16,
                 latent_n: int = 32, depth: int = 4, aggregation: str = "s6la", patch: int = 4,
                 trainable_h: bool = True, selective: bool = True, combine: str = "multiply",
                 seed: int = 0):
        super().__init__()
        if aggregation not in ("none", "s6la"):
            raise ValueError(f"aggregation {aggregation!r} is not available for the transformer backbone")
        rng = np.random.default_rng(seed)
        self.input_shape = tuple(input_shape)
        self.aggregation = aggregation
        self.width, self.n = width, latent_n
        self.patch = patch
        self.trainable_h = trainable_h
        if len(self.input_shape) == 1:
            tokens = self.input_shape[0]
            self.embed_w = self.param("embed_w", rng.normal(0, 1.0, (tokens, width)))
            self.embed_b = self.param("embed_b", np.zeros((tokens, width)))
        else:
            h, w, c = self.input_shape
            tokens = (h // patch) * (w // patch)
            self.embed = self.child("embed", Linear(rng, patch * patch * c, width))
        self.tokens = tokens
        self.cls = self.param("cls", rng.normal(0, 0.02, (1, width)))
        self.pos = self.param("pos", rng.normal(0, 0.02, (tokens + 1, width)))
        if aggregation == "s6la":
            self.a_log = self.param("a_log", np.log(-default_a(latent_n)))
            h0 = kaiming_normal(np.random.default_rng([seed, 2]), (width, latent_n), latent_n)
            if trainable_h:
                self.h0 = self.param("h0", h0)
            else:
                self._h_eval = h0
                self._h_stream = np.random.default_rng([seed, 1])
        self.layers = []
        for i in range(depth):
            if aggregation == "s6la":
                layer = VitS6laLayer(rng, width, latent_n, a_log=self.a_log,
                                     combine=combine, selective=selective)
            else:
                layer = TransformerLayer(rng, width)
            self.layers.append(self.child(f"l{i}", layer))
        self.head_norm = self.child("head_norm", _Norm(width))
        self.head = self.child("head", Linear(rng, width, classes, std=0.01))

    def _initial_latent(self, batch: int, training: bool, dtype) -> Tensor:
        if self.trainable_h:
            h0 = self.h0
        elif training:
            h0 = as_tensor(self._h_stream.normal(0.0, np.sqrt(2.0 / self.n),
                                                 size=(self.width, self.n)).astype(dtype))
        else:
            h0 = as_tensor(self._h_eval.astype(dtype))
        return mul(h0, np.ones((batch, 1, 1), dtype=dtype))

    def embed_tokens(self, x) -> Tensor:
        x = as_tensor(x)
        batch = x.shape[0]
        if len(self.input_shape) == 1:
            tok = mul(reshape(x, (batch, self.tokens, 1)), self.embed_w) + self.embed_b
        else:
            tok = self.embed(as_tensor(patchify(x.data, self.patch)))
        cls = mul(self.cls, np.ones((batch, 1, 1), dtype=tok.dtype))
        return concat([tok, cls], axis=-2) + self.pos

    def __call__(self, x, training: bool = False) -> Tensor:
        z = self.embed_tokens(x)
        h = self._initial_latent(z.shape[0], training, z.dtype) if self.aggregation == "s6la" else None
        for layer in self.layers:
            z, h = layer(z, h)
        _, x_c = split_tokens(z)
        return self.head(self.head_norm(reshape(x_c, (z.shape[0], self.width))))
