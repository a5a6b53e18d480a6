"""State space recurrences viewed as attention with relative positional embeddings.

A diagonalizable transition ``abar`` is brought to real Jordan form
``T J T^-1`` with 1x1 blocks for real eigenvalues and 2x2 rotation-scaling
blocks ``gamma * [[cos, sin], [-sin, cos]]`` for conjugate pairs. Powers of
``abar`` then split into decaying (``lambda^t``) and damped cyclical
(``gamma^t cos(t theta)``, ``gamma^t sin(t theta)``) lag profiles, each of which is a
lower-triangular Toeplitz matrix acting as one zero-query/zero-key attention head.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import Tensor, as_tensor, concat, matmul, mul, sigmoid, softmax_rows, transpose

__all__ = [
    "JordanDecomposition", "jordan_decompose", "matrix_power_via_jordan",
    "RelPosEmbedding", "build_rel_pe", "attention_heads", "dense_scan",
    "ssm_as_attention_check", "GatedHead", "causal_mask", "causal_attention",
    "mamba_sa", "selective_value_projection",
]

DISTINCT_RTOL = 1e-6
RECONSTRUCT_RTOL = 1e-8


def _rotation(gamma: float, theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return gamma * np.array([[c, s], [-s, c]])


@dataclass
class JordanDecomposition:
    t_mat: np.ndarray
    t_inv: np.ndarray
    real_eigs: list[float]
    complex_pairs: list[tuple[float, float]]

    @property
    def rank(self) -> int:
        return len(self.real_eigs) + 2 * len(self.complex_pairs)

    @property
    def d(self) -> int:
        return self.t_mat.shape[0]

    def j_power(self, j: int) -> np.ndarray:
        """J^j, assembled block by block."""
        out = np.zeros((self.d, self.d))
        k = 0
        for lam in self.real_eigs:
            out[k, k] = lam ** j
            k += 1
        for gamma, theta in self.complex_pairs:
            out[k:k + 2, k:k + 2] = _rotation(gamma ** j, j * theta)
            k += 2
        if j == 0:
            out[k:, k:] = np.eye(self.d - k)
        return out

    @property
    def j_mat(self) -> np.ndarray:
        return self.j_power(1)


def jordan_decompose(abar: np.ndarray) -> JordanDecomposition:
    """Real Jordan form of a diagonalizable matrix with distinct nonzero eigenvalues.

    Columns of ``t_mat`` are ordered: real eigenvectors, then (Re v, Im v) for
    each conjugate pair with positive imaginary part, then the null space.
    """
    abar = np.asarray(abar, dtype=np.float64)
    d = abar.shape[0]
    if abar.shape != (d, d):
        raise ValueError(f"expected a square matrix, got {abar.shape}")
    vals, vecs = np.linalg.eig(abar)
    scale = max(np.abs(vals).max(initial=0.0), np.finfo(float).tiny)
    zero = np.abs(vals) <= 1e-12 * scale
    nz = np.flatnonzero(~zero)
    for a in range(len(nz)):
        for b in range(a + 1, len(nz)):
            va, vb = vals[nz[a]], vals[nz[b]]
            if abs(va - vb) <= DISTINCT_RTOL * max(abs(va), abs(vb)):
                raise ValueError(
                    f"repeated nonzero eigenvalue {va:.6g}; eigenvector condition number "
                    f"{np.linalg.cond(vecs):.3g}")

    real_cols, pair_cols, null_cols = [], [], []
    real_eigs, pairs = [], []
    for i in range(d):
        lam = vals[i]
        v = vecs[:, i]
        if zero[i]:
            null_cols.append(_real_vector(v))
        elif abs(lam.imag) <= 1e-10 * abs(lam):
            real_eigs.append(float(lam.real))
            real_cols.append(_real_vector(v))
        elif lam.imag > 0:
            pairs.append((float(abs(lam)), float(np.angle(lam))))
            pair_cols += [v.real, v.imag]
    if 2 * len(pairs) != int(np.sum(np.abs(vals[~zero].imag) > 1e-10 * np.abs(vals[~zero]))):
        raise ValueError("complex eigenvalues without conjugate partners")
    t_mat = np.column_stack(real_cols + pair_cols + null_cols)
    t_inv = np.linalg.inv(t_mat)
    dec = JordanDecomposition(t_mat, t_inv, real_eigs, pairs)
    err = np.linalg.norm(t_mat @ dec.j_mat @ t_inv - abar) / max(np.linalg.norm(abar), np.finfo(float).tiny)
    if err > RECONSTRUCT_RTOL:
        raise ValueError(f"matrix is not diagonalizable to tolerance (reconstruction error {err:.3g})")
    return dec


def _real_vector(v: np.ndarray) -> np.ndarray:
    # eigenvectors of real eigenvalues may carry an arbitrary complex phase
    k = np.argmax(np.abs(v))
    r = (v * np.conj(v[k]) / abs(v[k])).real
    return r / np.linalg.norm(r)


def matrix_power_via_jordan(dec: JordanDecomposition, j: int) -> np.ndarray:
    if j < 0:
        raise ValueError("power must be non-negative")
    return dec.t_mat @ dec.j_power(j) @ dec.t_inv


@dataclass
class RelPosEmbedding:
    matrix: np.ndarray
    kind: str
    params: tuple
    bidirectional: bool = False
    dilation: int = 1


def _lag_profile(kind: str, params: Sequence[float], lags: np.ndarray, pre_activation: bool) -> np.ndarray:
    if kind == "real":
        (lam,) = params
        if pre_activation:
            lam = np.tanh(lam)
        return lam ** lags
    if kind in ("cyclical1", "cyclical2"):
        gamma, theta = params
        if pre_activation:
            gamma = np.tanh(gamma)
        trig = np.cos if kind == "cyclical1" else np.sin
        return gamma ** lags * trig(lags * theta)
    raise ValueError(f"unknown embedding kind {kind!r}")


def build_rel_pe(kind: str, params: Sequence[float], T: int, bidirectional: bool = False,
                 dilation: int = 1, pre_activation: bool = True) -> RelPosEmbedding:
    """Lower-triangular Toeplitz lag matrix of size T x T.

    ``params`` is ``(phi,)`` for ``"real"`` and ``(psi, theta)`` for the cyclical
    kinds; with ``pre_activation`` the magnitudes are ``tanh(phi)``/``tanh(psi)``,
    otherwise ``params`` holds ``lambda`` or ``(gamma, theta)`` directly.
    ``dilation`` keeps the leading T x T block of ``P kron I_d``.
    """
    if T < 1 or dilation < 1:
        raise ValueError("T and dilation must be positive")
    i, j = np.indices((T, T))
    diff = i - j
    on = (diff > 0) & (diff % dilation == 0)
    lags = np.where(on, diff // dilation, 0)
    profile = _lag_profile(kind, params, lags.astype(np.float64), pre_activation)
    mat = np.where(on, profile, 0.0)
    if bidirectional:
        mat = mat + mat.T
    return RelPosEmbedding(mat, kind, tuple(params), bidirectional, dilation)


def attention_heads(abar: np.ndarray, T: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """(positional matrix, value map M) for each of the r + 2s + 1 heads.

    Head outputs ``P @ U @ M.T`` summed over heads equal the recurrence driven
    by ``U`` (rows are the per-step injections ``bbar x_t``).
    """
    dec = jordan_decompose(abar)
    t, r = dec.t_mat, dec.t_inv
    heads = []
    c = 0
    for lam in dec.real_eigs:
        heads.append((build_rel_pe("real", (lam,), T, pre_activation=False).matrix,
                      np.outer(t[:, c], r[c])))
        c += 1
    for gamma, theta in dec.complex_pairs:
        m1 = np.outer(t[:, c], r[c]) + np.outer(t[:, c + 1], r[c + 1])
        m2 = np.outer(t[:, c], r[c + 1]) - np.outer(t[:, c + 1], r[c])
        heads.append((build_rel_pe("cyclical1", (gamma, theta), T, pre_activation=False).matrix, m1))
        heads.append((build_rel_pe("cyclical2", (gamma, theta), T, pre_activation=False).matrix, m2))
        c += 2
    heads.append((np.eye(T), np.eye(dec.d)))
    return heads


def _injections(bbar: np.ndarray, x: np.ndarray) -> np.ndarray:
    bbar = np.asarray(bbar, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if bbar.ndim == 1:
        return x.reshape(-1, 1) * bbar
    return x.reshape(len(x), -1) @ bbar.T


def dense_scan(abar: np.ndarray, bbar: np.ndarray, x: np.ndarray) -> np.ndarray:
    """States [T, d] of h_t = abar h_{t-1} + bbar x_t from h_0 = 0."""
    u = _injections(bbar, x)
    h = np.zeros(abar.shape[0])
    out = np.empty_like(u)
    for t in range(len(u)):
        h = abar @ h + u[t]
        out[t] = h
    return out


def ssm_as_attention_check(abar: np.ndarray, bbar: np.ndarray, x: np.ndarray) -> float:
    """Max abs difference between the multi-head attention form and the scan."""
    u = _injections(bbar, x)
    total = np.zeros_like(u)
    for p, m in attention_heads(abar, len(u)):
        total += p @ (u @ m.T)
    return float(np.abs(total - dense_scan(abar, bbar, x)).max(initial=0.0))


@dataclass
class GatedHead:
    """Gate parameter shared by the heads of one layer; one embedding per head (None = identity)."""

    mu: Tensor | float
    embeddings: list[RelPosEmbedding | None] = field(default_factory=list)

    def gate(self) -> Tensor:
        return sigmoid(as_tensor(self.mu))

    def positional(self, head: int, T: int) -> np.ndarray:
        emb = self.embeddings[head]
        if emb is None:
            return np.eye(T)
        if emb.matrix.shape != (T, T):
            raise ValueError(f"embedding is {emb.matrix.shape}, sequence length {T}")
        return emb.matrix


def causal_mask(T: int, dtype=np.float64) -> np.ndarray:
    return np.triu(np.full((T, T), -np.inf, dtype=dtype), k=1)


def selective_value_projection(x, w_v, w_w=None, selective: bool = True) -> Tensor:
    """Per-token values ``(x W_v) * (x W_w)``: the value map is rescaled by a linear
    function of the token itself. Without selectivity, values are ``x W_v``."""
    base = matmul(x, w_v)
    if not selective or w_w is None:
        return base
    return base * matmul(x, w_w)


def _causal_scores(x, wq, wk) -> Tensor:
    q, k = matmul(x, wq), matmul(x, wk)
    scores = matmul(q, transpose(k)) / np.sqrt(wq.shape[-1])
    return softmax_rows(scores + causal_mask(x.shape[0], scores.dtype))


def _values(x, weights: dict, h: int) -> Tensor:
    ww = weights.get("ww")
    return selective_value_projection(x, weights["wv"][h], None if ww is None else ww[h],
                                      selective=ww is not None)


def causal_attention(x, weights: dict) -> Tensor:
    """Multi-head causal softmax attention; ``weights`` holds per-head lists
    ``wq``, ``wk``, ``wv`` (optionally ``ww``) and an output map ``wo``."""
    x = as_tensor(x)
    outs = [matmul(_causal_scores(x, weights["wq"][h], weights["wk"][h]), _values(x, weights, h))
            for h in range(len(weights["wq"]))]
    return matmul(concat(outs, axis=-1), weights["wo"])


def mamba_sa(x, head: GatedHead, weights: dict, gate=None) -> Tensor:
    """Per head ``((1 - g) causal-softmax(Q K^T / sqrt(d)) + g P) V``, concatenated and projected.

    ``g = sigmoid(mu)`` unless ``gate`` pins it to a value.
    """
    x = as_tensor(x)
    T = x.shape[0]
    g = head.gate() if gate is None else as_tensor(gate, x)
    outs = []
    for h in range(len(weights["wq"])):
        s = _causal_scores(x, weights["wq"][h], weights["wk"][h])
        p = as_tensor(head.positional(h, T).astype(x.dtype))
        mix = mul(1.0 - g, s) + mul(g, p)
        outs.append(matmul(mix, _values(x, weights, h)))
    return matmul(concat(outs, axis=-1), weights["wo"])
