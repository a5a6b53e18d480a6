import math

import numpy as np
import pytest

from s6la.cnn import (Bottleneck, CnnNet, CnnS6laBlock, init_hidden, latent_update,
                      residual_aggregation_view, rla_baseline_step, stage_downsample)
from s6la.harness.verify import cnn_stack_case
from s6la.nn import Conv
from s6la.ssm import DiscretizedSsm, SsmParams, discretize, recurrent_scan
from s6la.tensor import Parameter, as_tensor, conv2d, finite_difference_check


def _zero(module):
    for p in module.parameters():
        p.data = np.zeros_like(p.data)


# -- latent state -------------------------------------------------------------

def test_init_hidden_shape_and_determinism():
    h = init_hidden(3, 5, 7, seed=2)
    assert h.shape == (3, 5, 7)
    np.testing.assert_array_equal(h, init_hidden(3, 5, 7, seed=2))


def test_init_hidden_statistics():
    n = 16
    h = init_hidden(25, 250, n, seed=0)  # 10^5 samples
    m = h.size
    var = 2.0 / n
    assert abs(h.mean()) < 3 * math.sqrt(var / m)
    # standard error of the sample variance for a normal is var * sqrt(2 / (m - 1))
    assert abs(h.var() - var) < 3 * var * math.sqrt(2.0 / (m - 1))


def test_latent_update_scalar_closed_form():
    h = latent_update(np.array([1.0]), 0.1, np.array([2.0]), np.array([3.0]),
                      SsmParams(np.array([-1.0])))
    assert h.data[0] == pytest.approx(math.exp(-0.1) + 0.6, abs=1e-15)
    assert h.data[0] == pytest.approx(1.504837, abs=1e-6)


def test_latent_update_zero_delta_keeps_state():
    rng = np.random.default_rng(0)
    h = rng.normal(size=(2, 3, 3, 4))
    out = latent_update(h, np.zeros((2, 3, 3, 1)), rng.normal(size=(2, 3, 3, 4)),
                        rng.normal(size=(2, 3, 3, 1)), SsmParams(-np.arange(1.0, 5.0)))
    np.testing.assert_array_equal(out.data, h)


# -- pooling ------------------------------------------------------------------

def test_downsample_cases():
    const = np.full((4, 4, 3), 1.7)
    np.testing.assert_array_equal(stage_downsample(const).data, np.full((2, 2, 3), 1.7))
    patch = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(2, 2, 1)
    assert stage_downsample(patch).data.item() == 2.5
    x = np.random.default_rng(1).normal(size=(8, 8, 2))
    np.testing.assert_allclose(stage_downsample(stage_downsample(x)).data, stage_downsample(x, 4).data,
                               atol=1e-15)
    with pytest.raises(ValueError):
        stage_downsample(np.zeros((3, 4, 1)))


# -- rla baseline -------------------------------------------------------------

def test_rla_zero_convs():
    rng = np.random.default_rng(0)
    agg, x = rng.normal(size=(3, 3, 2)), rng.normal(size=(3, 3, 2))
    zero = lambda t: t * 0.0  # noqa: E731
    a2, x2 = rla_baseline_step(agg, x, zero, zero)
    np.testing.assert_array_equal(a2.data, agg)
    np.testing.assert_array_equal(x2.data, x)


def test_rla_identity_conv_integrates():
    rng = np.random.default_rng(1)
    xs = [rng.normal(size=(3, 3, 2))]
    agg = np.zeros((3, 3, 2))
    ident = lambda t: t  # noqa: E731
    zero = lambda t: t * 0.0  # noqa: E731
    total = np.zeros((3, 3, 2))
    for _ in range(4):
        total = total + xs[-1]
        agg, x = rla_baseline_step(agg, xs[-1], ident, zero)
        np.testing.assert_allclose(agg.data, total, atol=1e-15)
        xs.append(x.data)


def test_rla_matches_direct_sum():
    rng = np.random.default_rng(2)
    k1 = [rng.normal(size=(1, 1, 2, 2)) for _ in range(3)]
    k3 = [rng.normal(size=(3, 3, 2, 2)) * 0.3 for _ in range(3)]
    x = rng.normal(size=(4, 4, 2))
    agg = np.zeros_like(x)
    xs = [x]
    for i in range(3):
        agg, x = rla_baseline_step(agg, x, lambda t, k=k1[i]: conv2d(t, k), lambda t, k=k3[i]: conv2d(t, k))
        agg, x = agg.data, x.data
        xs.append(x)
    direct = sum(conv2d(xs[i], k1[i]).data for i in range(3))
    np.testing.assert_allclose(agg, direct, atol=1e-13)
    np.testing.assert_allclose(xs[3], conv2d(direct, k3[2]).data + xs[2], atol=1e-13)


def test_rla_shape_mismatch():
    with pytest.raises(ValueError):
        rla_baseline_step(np.zeros((2, 2, 1)), np.zeros((2, 2, 2)), lambda t: t, lambda t: t)


# -- residual aggregation view ------------------------------------------------

def test_aggregation_view_cases():
    rng = np.random.default_rng(3)
    x0 = rng.normal(size=(4, 4, 3))
    convs = [Conv(rng, 3, 3, 3) for _ in range(4)]
    aggs, outs = residual_aggregation_view(convs[:1], x0)
    np.testing.assert_array_equal(aggs[0].data, convs[0](x0).data + x0)
    aggs, outs = residual_aggregation_view([lambda t: t * 0.0] * 3, x0)
    assert all(np.array_equal(o.data, x0) for o in outs)
    aggs, outs = residual_aggregation_view(convs, x0)
    x = as_tensor(x0)
    for a, o, f in zip(aggs, outs, convs):
        x = x + f(x)
        np.testing.assert_array_equal(o.data, x.data)
        np.testing.assert_array_equal(a.data, x.data)


# -- block --------------------------------------------------------------------

def test_bottleneck_starts_at_zero():
    rng = np.random.default_rng(0)
    out = Bottleneck(rng, 5, 3, 4)(rng.normal(size=(2, 3, 3, 5)))
    np.testing.assert_array_equal(out.data, np.zeros((2, 3, 3, 3)))


def test_zero_block_is_residual_identity():
    rng = np.random.default_rng(1)
    blk = CnnS6laBlock(rng, 4, 3)
    _zero(blk.block)
    x = rng.normal(size=(2, 3, 3, 4))
    x_next, _ = blk(x, rng.normal(size=(2, 3, 3, 3)))
    np.testing.assert_array_equal(x_next.data, x)


def test_block_h_update_matches_scan_positionwise():
    rng = np.random.default_rng(2)
    blk = CnnS6laBlock(rng, 3, 4)
    for p in blk.block.parameters():
        p.data = rng.normal(0, 0.3, p.shape)
    x, h = rng.normal(size=(3, 3, 3)), rng.normal(size=(3, 3, 4))
    _, h_next = blk(x, h)
    o = blk.block(np.concatenate([x, h], axis=-1))
    u, delta, b = blk.selective_params(o)
    a = blk.ssm.a.data
    for i in range(3):
        for j in range(3):
            disc = discretize(delta.data[i, j], SsmParams(a), b.data[i, j])
            ref = recurrent_scan(u.data[i, j], disc, h[i, j])[-1].data
            assert np.abs(ref - h_next.data[i, j]).max() == 0.0


def test_block_spatial_mismatch():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        CnnS6laBlock(rng, 3, 2)(np.zeros((3, 3, 3)), np.zeros((2, 2, 2)))


@pytest.mark.parametrize("kw", [{}, {"pool_delta": "global"}, {"selective": False}])
def test_two_block_stack_gradients(kw):
    loss, params = cnn_stack_case(np.random.default_rng(5), **kw)
    for p in params:
        assert finite_difference_check(loss, p) < 1e-4, p.name


def test_block_params_cover_selective_heads():
    blk = CnnS6laBlock(np.random.default_rng(0), 3, 2)
    names = {n for n, _ in blk.named_parameters()}
    assert {"w_u.weight", "w_delta.weight", "w_b.weight", "a_log"} <= names


def test_global_delta_is_spatially_constant():
    rng = np.random.default_rng(3)
    blk = CnnS6laBlock(rng, 3, 2, pool_delta="global")
    o = rng.normal(size=(2, 4, 4, 3))
    _, delta, b = blk.selective_params(o)
    assert delta.shape == (2, 1, 1, 1) and b.shape == (2, 1, 1, 2)


# -- network ------------------------------------------------------------------

@pytest.mark.parametrize("agg", ["none", "rla", "s6la"])
def test_net_shapes(agg):
    net = CnnNet((8, 8, 1), 4, width=4, latent_n=4, blocks=(1, 1), aggregation=agg)
    assert net(np.zeros((3, 8, 8, 1))).shape == (3, 4)
    tab = CnnNet((2,), 3, width=4, latent_n=4, blocks=(2,), aggregation=agg)
    assert tab(np.zeros((5, 2))).shape == (5, 3)


def test_net_batch_permutation_equivariance():
    rng = np.random.default_rng(4)
    net = CnnNet((2,), 3, width=4, latent_n=4, blocks=(3,))
    for p in net.parameters():
        p.data = p.data + rng.normal(0, 0.1, p.shape)
    x = rng.normal(size=(6, 2))
    perm = rng.permutation(6)
    np.testing.assert_allclose(net(x[perm]).data, net(x).data[perm], atol=1e-14)


def test_net_rejects_unpoolable_extent():
    with pytest.raises(ValueError):
        CnnNet((6, 6, 1), 2, width=4, latent_n=4, blocks=(1, 1, 1))


def test_fixed_latent_ablation():
    net = CnnNet((2,), 3, width=4, latent_n=4, blocks=(2,), trainable_h=False)
    assert "h0" not in dict(net.named_parameters())
    x = np.random.default_rng(0).normal(size=(4, 2))
    np.testing.assert_array_equal(net(x).data, net(x).data)
    for p in net.parameters():
        p.data = p.data + 0.1
    assert not np.array_equal(net(x, training=True).data, net(x, training=True).data)


def test_shared_transition_across_blocks():
    net = CnnNet((2,), 3, width=4, latent_n=4, blocks=(3,))
    assert all(blk.a_log is net.a_log for blk in net.layers)
    assert isinstance(net.a_log, Parameter)
    assert sum(1 for n, _ in net.named_parameters() if n.endswith("a_log")) == 1
