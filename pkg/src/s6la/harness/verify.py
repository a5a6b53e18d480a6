"""Oracle and invariant suites behind ``s6la verify``.

Each suite returns a list of :class:`Check` records holding the worst error
observed and the tolerance it is judged against.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from .. import tensor as tc
from ..cnn import CnnS6laBlock
from ..mamba_attn import (GatedHead, build_rel_pe, causal_attention, jordan_decompose, mamba_sa,
                          matrix_power_via_jordan, selective_value_projection, ssm_as_attention_check)
from ..ssm import DiscretizedSsm, SsmParams, discretize, recurrent_scan, unrolled_oracle
from ..tensor import Parameter, Tensor, finite_difference_check
from ..vit import VitS6laLayer

SUITES = ("grad", "scan", "jordan", "attention")
GRAD_TOL = 1e-4
SCAN_TOL = 1e-10
JORDAN_TOL = 1e-8
ATTN_TOL = 1e-8


@dataclass
class Check:
    suite: str
    name: str
    error: float
    tol: float
    exact: bool = False

    @property
    def passed(self) -> bool:
        return self.error == 0.0 if self.exact else self.error < self.tol

    def line(self) -> str:
        bound = "== 0 (bitwise)" if self.exact else f"< {self.tol:g}"
        return f"{'PASS' if self.passed else 'FAIL'}  {self.suite}.{self.name}  max_err={self.error:.3e}  {bound}"


# ---------------------------------------------------------------------------
# gradient cases


def _weighted(out: Tensor, w: np.ndarray) -> Tensor:
    return tc.sum(tc.mul(out, w))


def primitive_cases(rng: np.random.Generator) -> Iterator[tuple[str, Callable[[], Tensor], list[Parameter]]]:
    """(name, loss closure, parameters) for every differentiable primitive at random shapes."""
    m, k, n = rng.integers(1, 5, size=3)
    a = Parameter("a", rng.normal(size=(m, n)))
    b = Parameter("b", rng.normal(size=(m, n)))
    row = Parameter("row", rng.normal(size=(n,)))
    w = rng.normal(size=(m, n))
    pos = Parameter("pos", rng.uniform(0.5, 2.0, size=(m, n)))
    away = Parameter("away", rng.choice([-1, 1], size=(m, n)) * rng.uniform(0.1, 2.0, size=(m, n)))

    yield "add", lambda: _weighted(tc.add(a, row), w), [a, row]
    yield "sub", lambda: _weighted(tc.sub(row, a), w), [a, row]
    yield "mul", lambda: _weighted(tc.mul(a, b), w), [a, b]
    yield "div", lambda: _weighted(tc.div(a, pos), w), [a, pos]
    yield "neg", lambda: _weighted(tc.neg(a), w), [a]
    yield "exp", lambda: _weighted(tc.exp(a), w), [a]
    yield "log", lambda: _weighted(tc.log(pos), w), [pos]
    yield "tanh", lambda: _weighted(tc.tanh(a), w), [a]
    yield "sigmoid", lambda: _weighted(tc.sigmoid(a), w), [a]
    yield "softplus", lambda: _weighted(tc.softplus(a), w), [a]
    yield "relu", lambda: _weighted(tc.relu(away), w), [away]
    yield "softmax_rows", lambda: _weighted(tc.softmax_rows(a), w), [a]
    if n > 1:
        yield "layer_norm", lambda: _weighted(tc.layer_norm(a), w), [a]
    yield "transpose", lambda: _weighted(tc.transpose(a), w.T), [a]
    yield "reshape", lambda: _weighted(tc.reshape(a, (-1,)), w.ravel()), [a]
    yield "sum_axis", lambda: _weighted(tc.sum(a, axis=0), w[0]), [a]
    yield "mean_axis", lambda: _weighted(tc.mean(a, axis=1, keepdims=True), w[:, :1]), [a]

    ma = Parameter("ma", rng.normal(size=(m, k)))
    mb = Parameter("mb", rng.normal(size=(k, n)))
    yield "matmul", lambda: _weighted(tc.matmul(ma, mb), w), [ma, mb]
    batched = Parameter("batched", rng.normal(size=(2, m, k)))
    wb = rng.normal(size=(2, m, n))
    yield "matmul_batched", lambda: _weighted(tc.matmul(batched, mb), wb), [batched, mb]

    wc = rng.normal(size=(m, 2 * n))
    yield "concat", lambda: _weighted(tc.concat([a, b], axis=1), wc), [a, b]
    if n > 1:
        yield "split", lambda: (_weighted(tc.split(a, [1, n - 1], axis=1)[0], w[:, :1])
                                + _weighted(tc.split(a, [1, n - 1], axis=1)[1], w[:, 1:])), [a]

    labels = rng.integers(0, n, size=m)
    yield "cross_entropy", lambda: tc.cross_entropy(a, labels), [a]

    h, wd, cin, cout = 4, 4, int(rng.integers(1, 4)), int(rng.integers(1, 4))
    img = Parameter("img", rng.normal(size=(2, h, wd, cin)))
    for kh in (1, 3):
        ker = Parameter(f"k{kh}", rng.normal(size=(kh, kh, cin, cout)))
        for pad in ("same", "valid"):
            ho = h if pad == "same" else h - kh + 1
            wo = rng.normal(size=(2, ho, ho, cout))
            yield (f"conv2d_{kh}x{kh}_{pad}",
                   lambda ker=ker, pad=pad, wo=wo: _weighted(tc.conv2d(img, ker, pad), wo), [img, ker])
    wp = rng.normal(size=(2, 2, 2, cin))
    yield "avg_pool2d", lambda: _weighted(tc.avg_pool2d(img, 2), wp), [img]


def _randomize(module, rng: np.random.Generator, scale: float = 0.5) -> None:
    for name, p in module.named_parameters():
        if name.endswith("a_log"):
            p.data = np.log(rng.uniform(0.5, 3.0, size=p.shape))
        else:
            p.data = rng.normal(0.0, scale, size=p.shape)


def cnn_stack_case(rng: np.random.Generator, d=3, n=2, hw=3, batch=2, **block_kw):
    """Two S6LA CNN blocks sharing the transition diagonal."""
    a_log = Parameter("a_log", np.zeros(n))
    blocks = [CnnS6laBlock(rng, d, n, mid=3, a_log=a_log, **block_kw) for _ in range(2)]
    for blk in blocks:
        _randomize(blk, rng)
    a_log.data = np.log(rng.uniform(0.5, 3.0, size=n))
    x0 = Parameter("x0", rng.normal(size=(batch, hw, hw, d)))
    h0 = Parameter("h0", rng.normal(size=(batch, hw, hw, n)))
    wx = rng.normal(size=(batch, hw, hw, d))
    wh = rng.normal(size=(batch, hw, hw, n))

    def loss():
        x, h = x0, h0
        for blk in blocks:
            x, h = blk(x, h)
        return _weighted(x, wx) + _weighted(h, wh)
    params = [a_log, x0, h0] + [p for blk in blocks for p in blk.parameters()]
    return loss, params


def vit_stack_case(rng: np.random.Generator, L=4, d=8, n=4, combine="multiply", selective=True):
    """Two S6LA transformer layers on an (L + 1) x D token matrix."""
    a_log = Parameter("a_log", np.zeros(n))
    layers = [VitS6laLayer(rng, d, n, a_log=a_log, combine=combine, selective=selective)
              for _ in range(2)]
    for layer in layers:
        _randomize(layer, rng, scale=0.3)
        for name, p in layer.named_parameters():
            if name.endswith("gain"):
                p.data = 1.0 + p.data
    a_log.data = np.log(rng.uniform(0.5, 3.0, size=n))
    x0 = Parameter("x0", rng.normal(size=(L + 1, d)))
    h0 = Parameter("h0", rng.normal(size=(d, n)))
    wx = rng.normal(size=(L + 1, d))
    wh = rng.normal(size=(d, n))

    def loss():
        x, h = x0, h0
        for layer in layers:
            x, h = layer(x, h)
        return _weighted(x, wx) + _weighted(h, wh)
    params = [a_log, x0, h0] + [p for layer in layers for p in layer.parameters()]
    return loss, params


def scan_case(rng: np.random.Generator, T=6, n=3):
    delta = Parameter("delta", rng.uniform(0.1, 1.0, size=(T, 1)))
    b = Parameter("b", rng.normal(size=(T, n)))
    x = Parameter("x", rng.normal(size=(T,)))
    h0 = Parameter("h0", rng.normal(size=(n,)))
    a = Parameter("a", -rng.uniform(0.5, 3.0, size=n))
    w = rng.normal(size=(T, n))

    def loss():
        ssm = SsmParams(a)
        deltas = tc.split(delta, [1] * T, axis=0)
        bs = tc.split(b, [1] * T, axis=0)
        discs = [discretize(tc.reshape(dt, (1,)), ssm, tc.reshape(bt, (n,))) for dt, bt in zip(deltas, bs)]
        states = recurrent_scan(x, discs, h0)
        return tc.sum(tc.mul(tc.concat([tc.reshape(s, (1, n)) for s in states], axis=0), w))
    return loss, [delta, b, x, h0, a]


def attention_case(rng: np.random.Generator, T=5, d_in=3, dh=2, heads=2):
    x = Parameter("x", rng.normal(size=(T, d_in)))
    weights = {
        "wq": [Parameter(f"wq{h}", rng.normal(size=(d_in, dh))) for h in range(heads)],
        "wk": [Parameter(f"wk{h}", rng.normal(size=(d_in, dh))) for h in range(heads)],
        "wv": [Parameter(f"wv{h}", rng.normal(size=(d_in, dh))) for h in range(heads)],
        "ww": [Parameter(f"ww{h}", rng.normal(size=(d_in, dh))) for h in range(heads)],
        "wo": Parameter("wo", rng.normal(size=(heads * dh, d_in))),
    }
    mu = Parameter("mu", rng.normal(size=()))
    head = GatedHead(mu, [build_rel_pe("real", (0.7,), T), build_rel_pe("cyclical2", (0.9, 0.4), T)])
    w = rng.normal(size=(T, d_in))
    params = [x, mu, weights["wo"]] + [p for key in ("wq", "wk", "wv", "ww") for p in weights[key]]
    return (lambda: _weighted(mamba_sa(x, head, weights), w)), params


def selective_value_case(rng: np.random.Generator, T=4, d=3):
    x = Parameter("x", rng.normal(size=(T, d)))
    wv = Parameter("wv", rng.normal(size=(d, d)))
    ww = Parameter("ww", rng.normal(size=(d, d)))
    w = rng.normal(size=(T, d))
    return (lambda: _weighted(selective_value_projection(x, wv, ww), w)), [x, wv, ww]


def _max_fd(loss, params, eps=1e-6) -> float:
    return max(finite_difference_check(loss, p, eps) for p in params)


def grad_checks(seeds: int = 20) -> list[Check]:
    worst: dict[str, float] = {}
    for s in range(seeds):
        rng = np.random.default_rng([11, s])
        for name, loss, params in primitive_cases(rng):
            worst[name] = max(worst.get(name, 0.0), _max_fd(loss, params))
    checks = [Check("grad", name, err, GRAD_TOL) for name, err in worst.items()]
    rng = np.random.default_rng(12)
    composite = {
        "recurrent_scan": scan_case(rng),
        "cnn_s6la_2block": cnn_stack_case(rng),
        "cnn_s6la_2block_global_delta": cnn_stack_case(rng, pool_delta="global"),
        "cnn_s6la_2block_nonselective": cnn_stack_case(rng, selective=False),
        "vit_s6la_2layer_multiply": vit_stack_case(rng),
        "vit_s6la_2layer_concat": vit_stack_case(rng, combine="concat"),
        "mamba_sa": attention_case(rng),
        "selective_value_projection": selective_value_case(rng),
    }
    for name, (loss, params) in composite.items():
        checks.append(Check("grad", name, _max_fd(loss, params), GRAD_TOL))
    return checks


# ---------------------------------------------------------------------------
# scan, jordan, attention


def scan_checks(instances: int = 100, seed: int = 0) -> list[Check]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        T, n = int(rng.integers(1, 65)), int(rng.integers(1, 33))
        abar = rng.uniform(0.0, 1.0, size=n)
        disc = DiscretizedSsm(tc.as_tensor(abar), tc.as_tensor(rng.normal(size=n)))
        x = rng.normal(size=T)
        final = recurrent_scan(x, disc, np.zeros(n))[-1].data
        worst = max(worst, float(np.abs(final - unrolled_oracle(x, disc)).max()))
    return [Check("scan", "recurrence_vs_unroll", worst, SCAN_TOL)]


def random_transition(rng: np.random.Generator, d: int, n_pairs: int | None = None,
                      zeros: int = 0) -> tuple[np.ndarray, np.ndarray, list, list]:
    """Ā = T J T^-1 with a well-conditioned T and a known real Jordan J (spectral radius < 1)."""
    if n_pairs is None:
        n_pairs = int(rng.integers(0, (d - zeros) // 2 + 1))
    n_real = d - zeros - 2 * n_pairs
    while True:
        lams = rng.uniform(-0.95, 0.95, size=n_real)
        gaps = np.abs(lams[:, None] - lams[None, :]) + np.eye(n_real)
        if n_real < 2 or gaps.min() > 0.05:
            break
    pairs = [(float(rng.uniform(0.3, 0.95)), float(rng.uniform(0.2, 2.9))) for _ in range(n_pairs)]
    j = np.zeros((d, d))
    j[:n_real, :n_real] = np.diag(lams)
    k = n_real
    for gamma, theta in pairs:
        c, s = np.cos(theta), np.sin(theta)
        j[k:k + 2, k:k + 2] = gamma * np.array([[c, s], [-s, c]])
        k += 2
    q, _ = np.linalg.qr(rng.normal(size=(d, d)))
    t = q @ np.diag(rng.uniform(0.5, 2.0, size=d))
    return t @ j @ np.linalg.inv(t), j, list(lams), pairs


def jordan_checks(seed: int = 0, trials: int = 20) -> list[Check]:
    rng = np.random.default_rng(seed)
    recon = {4: 0.0, 8: 0.0}
    power = 0.0
    for d in (4, 8):
        for _ in range(trials):
            abar, _, _, _ = random_transition(rng, d)
            dec = jordan_decompose(abar)
            rel = np.linalg.norm(dec.t_mat @ dec.j_mat @ dec.t_inv - abar) / np.linalg.norm(abar)
            recon[d] = max(recon[d], float(rel))
            naive = np.eye(d)
            for j in range(33):
                power = max(power, float(np.abs(matrix_power_via_jordan(dec, j) - naive).max()))
                naive = naive @ abar
    return [Check("jordan", "reconstruction_4x4", recon[4], JORDAN_TOL),
            Check("jordan", "reconstruction_8x8", recon[8], JORDAN_TOL),
            Check("jordan", "power_vs_naive_j<=32", power, JORDAN_TOL)]


def attention_checks(seed: int = 0, trials: int = 40) -> list[Check]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        d = int(rng.integers(1, 9))
        T = int(rng.integers(1, 33))
        zeros = int(rng.integers(0, 2)) if d > 1 else 0
        abar, _, _, _ = random_transition(rng, d, zeros=zeros)
        bbar = rng.normal(size=d)
        worst = max(worst, ssm_as_attention_check(abar, bbar, rng.normal(size=T)))

    T, d_in, dh, heads = 7, 4, 3, 2
    x = rng.normal(size=(T, d_in))
    weights = {
        "wq": [rng.normal(size=(d_in, dh)) for _ in range(heads)],
        "wk": [rng.normal(size=(d_in, dh)) for _ in range(heads)],
        "wv": [rng.normal(size=(d_in, dh)) for _ in range(heads)],
        "wo": rng.normal(size=(heads * dh, d_in)),
    }
    head = GatedHead(0.3, [build_rel_pe("real", (0.8,), T), build_rel_pe("cyclical1", (1.2, 0.5), T)])
    gated = mamba_sa(x, head, weights, gate=0.0).data
    plain = causal_attention(x, weights).data
    gate_diff = float(np.abs(gated - plain).max()) if not np.array_equal(gated, plain) else 0.0
    return [Check("attention", "ssm_as_attention", worst, ATTN_TOL),
            Check("attention", "gate_off_equals_causal_attention", gate_diff, 0.0, exact=True)]


def run_suite(name: str) -> list[Check]:
    runners = {"grad": grad_checks, "scan": scan_checks, "jordan": jordan_checks,
               "attention": attention_checks}
    if name == "all":
        return [c for s in SUITES for c in runners[s]()]
    if name not in runners:
        raise ValueError(f"unknown suite {name!r}; choose from {SUITES + ('all',)}")
    return runners[name]()
