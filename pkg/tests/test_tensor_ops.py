"""Tensor engine: op contracts against naive oracles, tape gradients,
and the deterministic RNG."""

import numpy as np
import pytest

from tilemamba import tensor as T
from tilemamba.errors import ConfigError, ContractError, DimensionError
from tilemamba.tensor import RngStream, Tensor


# -- oracles -------------------------------------------------------------------


def conv2d_loop(x, w, b=None, stride=1, padding=1, groups=1):
    """Direct quadruple-loop cross-correlation."""
    bsz, cin, h, wd = x.shape
    cout, cpg, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((bsz, cout, ho, wo), dtype=x.dtype)
    cog = cout // groups
    for n in range(bsz):
        for o in range(cout):
            g = o // cog
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for c in range(cpg):
                        for u in range(kh):
                            for v in range(kw):
                                acc += (xp[n, g * cpg + c,
                                           i * stride + u, j * stride + v]
                                        * w[o, c, u, v])
                    out[n, o, i, j] = acc
            if b is not None:
                out[n, o] += b[o]
    return out


def linear_loop(x, w, b=None):
    lead = x.shape[:-1]
    x2 = x.reshape(-1, x.shape[-1])
    out = np.zeros((x2.shape[0], w.shape[0]), dtype=x.dtype)
    for n in range(x2.shape[0]):
        for o in range(w.shape[0]):
            out[n, o] = (x2[n] * w[o]).sum() + (b[o] if b is not None else 0.0)
    return out.reshape(lead + (w.shape[0],))


def rel_err(a, b):
    denom = max(np.abs(a).max(), np.abs(b).max(), 1e-12)
    return np.abs(a - b).max() / denom


# -- conv2d -----------------------------------------------------------------------


def test_conv2d_all_ones_overlap_counts():
    x = Tensor(np.ones((1, 1, 3, 3)))
    w = Tensor(np.ones((1, 1, 3, 3)))
    out = T.conv2d(x, w, padding=1)
    expected = np.array([[4, 6, 4], [6, 9, 6], [4, 6, 4]], dtype=np.float32)
    assert np.array_equal(out.data[0, 0], expected)


def test_conv2d_depthwise_identity_kernel():
    rng = RngStream(0)
    x = Tensor(rng.normal((2, 5, 6, 6), dtype=np.float64))
    w = np.zeros((5, 1, 3, 3))
    w[:, 0, 1, 1] = 1.0
    out = T.conv2d(x, Tensor(w), padding=1, groups=5)
    assert np.allclose(out.data, x.data)


def test_conv2d_depthwise_7x7_matches_loop_oracle():
    rng = RngStream(1)
    x = rng.normal((2, 4, 8, 8))
    w = rng.normal((4, 1, 7, 7), 0.3)
    out = T.conv2d(Tensor(x), Tensor(w), padding=3, groups=4)
    assert rel_err(out.data, conv2d_loop(x, w, padding=3, groups=4)) <= 1e-6


@pytest.mark.parametrize("case", range(100))   # 50 shapes per op
def test_conv2d_linear_random_shapes_vs_oracle(case):
    rng = RngStream(1000 + case)
    if case % 2 == 0:
        bsz = int(rng.integers(1, 3))
        groups = int(rng.integers(1, 4))
        cpg = int(rng.integers(1, 4))
        cin = groups * cpg
        cog = int(rng.integers(1, 4))
        cout = groups * cog
        k = int(rng.integers(1, 4))
        stride = int(rng.integers(1, 3))
        pad = int(rng.integers(0, 3))
        size = int(rng.integers(k, k + 5))
        x = rng.normal((bsz, cin, size, size))
        w = rng.normal((cout, cpg, k, k), 0.5)
        b = rng.normal((cout,), 0.5)
        out = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad, groups)
        assert rel_err(out.data, conv2d_loop(x, w, b, stride, pad, groups)) <= 1e-6
    else:
        fin = int(rng.integers(1, 7))
        fout = int(rng.integers(1, 7))
        lead = tuple(int(d) for d in rng.integers(1, 4, (2,)))
        x = rng.normal(lead + (fin,))
        w = rng.normal((fout, fin))
        b = rng.normal((fout,))
        out = T.linear(Tensor(x), Tensor(w), Tensor(b))
        assert rel_err(out.data, linear_loop(x, w, b)) <= 1e-6


def test_conv2d_contract_errors():
    x = Tensor(np.zeros((1, 4, 5, 5)))
    with pytest.raises(ConfigError):
        T.conv2d(x, Tensor(np.zeros((4, 1, 3, 3))), groups=3)
    with pytest.raises(DimensionError):
        T.conv2d(x, Tensor(np.zeros((4, 2, 3, 3))), groups=1)
    with pytest.raises(DimensionError):
        T.conv2d(x, Tensor(np.zeros((4, 4, 9, 9))))


# -- linear ------------------------------------------------------------------------


def test_linear_identity_and_constant():
    rng = RngStream(2)
    x = rng.normal((3, 4))
    out = T.linear(Tensor(x), Tensor(np.eye(4)), Tensor(np.zeros(4)))
    assert np.allclose(out.data, x)
    out = T.linear(Tensor(x), Tensor(np.zeros((2, 4))), Tensor(np.array([3.0, -1.0])))
    assert np.allclose(out.data, np.broadcast_to([3.0, -1.0], (3, 2)))


def test_linear_dimension_error():
    with pytest.raises(DimensionError):
        T.linear(Tensor(np.zeros((2, 5))), Tensor(np.zeros((3, 4))))


# -- layer_norm -----------------------------------------------------------------------


def test_layer_norm_constant_input_collapses_to_zero():
    x = Tensor(np.full((2, 3, 4), 7.0))
    out = T.layer_norm(x, Tensor(np.ones(4)), Tensor(np.zeros(4)))
    assert np.allclose(out.data, 0.0)


def test_layer_norm_already_normalized():
    x = Tensor(np.array([[1.0, -1.0]]))
    out = T.layer_norm(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=0.0)
    assert np.allclose(out.data, [[1.0, -1.0]])


def test_layer_norm_statistics():
    rng = RngStream(3)
    x = Tensor(rng.normal((4, 6, 8)))
    out = T.layer_norm(x, Tensor(np.ones(8)), Tensor(np.zeros(8))).data
    assert np.abs(out.mean(axis=-1)).max() <= 1e-6
    assert np.abs(out.var(axis=-1) - 1.0).max() <= 1e-4


def test_layer_norm_empty_channel_axis():
    with pytest.raises(DimensionError):
        T.layer_norm(Tensor(np.zeros((2, 0))), Tensor(np.zeros(0)),
                     Tensor(np.zeros(0)))


# -- activations -----------------------------------------------------------------------


def test_activation_fixed_points():
    z = Tensor(np.array(0.0))
    assert T.activation("gelu", z).item() == 0.0
    assert T.activation("sigmoid", z).item() == 0.5
    assert T.activation("relu", Tensor(np.array(-2.0))).item() == 0.0


def test_silu_hand_value():
    out = T.silu(Tensor(np.array(1.0, dtype=np.float64)))
    assert abs(out.item() - 0.7310585786300049) <= 1e-9


def test_gelu_asymptotic_identity():
    out = T.gelu(Tensor(np.array(10.0, dtype=np.float64)))
    assert abs(out.item() - 10.0) <= 1e-6


def test_unknown_activation():
    with pytest.raises(ConfigError):
        T.activation("tanh", Tensor(np.zeros(2)))


# -- pooling ------------------------------------------------------------------------


def test_adaptive_avg_to_1x1_is_mean():
    x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
    out = T.pool2d("adaptive_avg", x, (1, 1))
    assert out.data.reshape(()) == pytest.approx(2.5)


def test_channelwise_max():
    x = np.zeros((1, 2, 1, 1))
    x[0, 0] = 1.0
    x[0, 1] = 3.0
    out = T.pool2d("channelwise_max_over_C", Tensor(x))
    assert out.data.reshape(()) == 3.0


def test_pooling_constant_invariance():
    x = Tensor(np.full((2, 3, 4, 4), 0.7))
    for kind, hw in (("adaptive_avg", (2, 2)), ("global_avg", None),
                     ("channelwise_max_over_C", None),
                     ("channelwise_avg_over_C", None)):
        out = T.pool2d(kind, x, hw)
        assert np.allclose(out.data, 0.7)


def test_adaptive_avg_unequal_bins_match_rule():
    rng = RngStream(4)
    x = rng.normal((1, 1, 7, 5))
    out = T.pool2d("adaptive_avg", Tensor(x), (4, 2)).data
    for i in range(4):
        for j in range(2):
            h0, h1 = int(np.floor(i * 7 / 4)), int(np.ceil((i + 1) * 7 / 4))
            w0, w1 = int(np.floor(j * 5 / 2)), int(np.ceil((j + 1) * 5 / 2))
            assert out[0, 0, i, j] == pytest.approx(x[0, 0, h0:h1, w0:w1].mean())


def test_pool_output_larger_than_input_rejected():
    with pytest.raises(ConfigError):
        T.pool2d("adaptive_avg", Tensor(np.zeros((1, 1, 2, 2))), (3, 3))


# -- softmax -------------------------------------------------------------------------


def test_softmax_symmetry_and_hand_value():
    out = T.softmax(Tensor(np.array([0.0, 0.0])))
    assert np.allclose(out.data, [0.5, 0.5])
    out = T.softmax(Tensor(np.array([np.log(2.0), 0.0], dtype=np.float64)))
    assert np.allclose(out.data, [2.0 / 3.0, 1.0 / 3.0], atol=1e-12)


def test_softmax_shift_invariance_and_normalization():
    rng = RngStream(5)
    x = rng.normal((6, 9))
    a = T.softmax(Tensor(x)).data
    b = T.softmax(Tensor(x + 13.7)).data
    assert np.abs(a - b).max() <= 1e-7
    assert np.abs(a.sum(axis=-1) - 1.0).max() <= 1e-7


# -- split / concat / permute -----------------------------------------------------------


def test_split_channels_ranges():
    x = np.arange(16, dtype=np.float32).reshape(1, 16, 1, 1)
    parts = T.split_channels(Tensor(x), 4)
    for i, p in enumerate(parts):
        assert np.array_equal(p.data[0, :, 0, 0], np.arange(4 * i, 4 * i + 4))


def test_split_concat_round_trip_bit_exact():
    rng = RngStream(6)
    x = Tensor(rng.normal((2, 16, 3, 5)))
    back = T.concat_channels(list(T.split_channels(x, 4)))
    assert np.array_equal(back.data, x.data)


def test_split_indivisible_rejected():
    with pytest.raises(ConfigError):
        T.split_channels(Tensor(np.zeros((1, 10, 2, 2))), 4)


def test_concat_single_identity_and_mismatch():
    x = Tensor(RngStream(7).normal((2, 3, 4, 4)))
    assert np.array_equal(T.concat_channels([x]).data, x.data)
    y = Tensor(np.zeros((2, 3, 5, 4)))
    with pytest.raises(DimensionError):
        T.concat_channels([x, y])


def test_permute_round_trip_and_index_formula():
    rng = RngStream(8)
    x = Tensor(rng.normal((2, 3, 4, 5)))
    perm = T.permute(x, (0, 2, 3, 1))
    back = T.permute(perm, (0, 3, 1, 2))
    assert np.array_equal(back.data, x.data)
    assert np.array_equal(T.permute(x, (0, 1, 2, 3)).data, x.data)
    m = Tensor(rng.normal((2, 3)))
    t = T.permute(m, (1, 0)).data
    for i in range(2):
        for j in range(3):
            assert t[j, i] == m.data[i, j]


def test_permute_invalid_order():
    with pytest.raises(ConfigError):
        T.permute(Tensor(np.zeros((2, 3))), (0, 0))


# -- backward / gradcheck ----------------------------------------------------------------


def test_backward_sum_of_squares():
    x = Tensor(np.arange(6, dtype=np.float64).reshape(2, 3), requires_grad=True)
    x.zero_grad()
    T.reduce_sum(T.mul(x, x)).backward()
    assert np.array_equal(x.grad, 2 * x.data)


def test_backward_unused_leaf_gets_zero():
    x = Tensor(np.ones(3), requires_grad=True)
    unused = Tensor(np.ones(3), requires_grad=True)
    x.zero_grad()
    unused.zero_grad()
    T.reduce_sum(T.mul(x, x)).backward()
    assert np.array_equal(unused.grad, np.zeros(3))


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        T.mul(x, x).backward()


def test_two_layer_chain_matches_finite_differences():
    rng = RngStream(9)
    w1 = Tensor(rng.normal((4, 5), 0.5), requires_grad=True)
    b1 = Tensor(rng.normal((4,), 0.5), requires_grad=True)
    w2 = Tensor(rng.normal((1, 4), 0.5), requires_grad=True)
    x = Tensor(rng.normal((3, 5)), requires_grad=True)

    def f():
        h = T.gelu(T.linear(x, w1, b1))
        return T.reduce_sum(T.linear(h, w2))

    assert T.gradcheck_parameters(f, [x, w1, b1, w2]) <= 1e-4


def test_gradcheck_linear_is_exact():
    rng = RngStream(10)
    x = Tensor(rng.normal((4,)), requires_grad=True)
    coef = Tensor(rng.normal((4,)))
    err = T.finite_diff_gradcheck(lambda v: T.reduce_sum(T.mul(coef, v)), x)
    assert err <= 1e-7


def test_gradcheck_layer_norm_composite():
    rng = RngStream(11)
    x = Tensor(rng.normal((3, 6)), requires_grad=True)
    g = Tensor(rng.normal((6,)), requires_grad=True)
    b = Tensor(rng.normal((6,)), requires_grad=True)
    coef = Tensor(rng.normal((3, 6)))
    f = lambda: T.reduce_sum(T.mul(coef, T.layer_norm(x, g, b)))
    assert T.gradcheck_parameters(f, [x, g, b]) <= 1e-4


def test_gradcheck_rejects_f32():
    x = Tensor(np.ones(2, dtype=np.float32), requires_grad=True)
    with pytest.raises(ContractError):
        T.finite_diff_gradcheck(lambda v: T.reduce_sum(v), x)


@pytest.mark.parametrize("seed", range(10))
def test_every_op_gradcheck_random_points(seed):
    """Spec invariant: each differentiable op at random 64-bit points."""
    rng = RngStream(200 + seed)
    x = Tensor(rng.normal((2, 4, 5, 5)), requires_grad=True)
    w = Tensor(rng.normal((4, 1, 3, 3), 0.4), requires_grad=True)
    coef = Tensor(rng.normal((2, 4, 5, 5)))

    def f():
        h = T.conv2d(x, w, padding=1, groups=4)
        h = T.silu(h)
        return T.reduce_sum(T.mul(coef, h))

    assert T.gradcheck_parameters(f, [x, w]) <= 1e-4


# -- rng ----------------------------------------------------------------------------------


def test_rng_identical_state_identical_output():
    a = RngStream(42)
    b = RngStream(42)
    for _ in range(3):
        assert np.array_equal(a.normal((4, 4)), b.normal((4, 4)))
    assert a.state() == b.state()


def test_rng_draw_counter_advances_stream():
    a = RngStream(42)
    first = a.normal((8,))
    second = a.normal((8,))
    assert not np.array_equal(first, second)
    replay = RngStream(42, draws=1).normal((8,))
    assert np.array_equal(second, replay)


def test_rng_children_are_decoupled():
    root = RngStream(7)
    a = root.child("data")
    b = root.child("noise")
    assert a.seed != b.seed
    assert not np.array_equal(a.normal((4,)), b.normal((4,)))
    assert np.array_equal(RngStream(7).child("data").normal((4,)),
                          RngStream(7).child("data").normal((4,)))


def test_forward_bit_identical_across_runs():
    rng1 = RngStream(13)
    rng2 = RngStream(13)
    x1 = Tensor(rng1.normal((2, 3, 8, 8)))
    x2 = Tensor(rng2.normal((2, 3, 8, 8)))
    w1 = Tensor(rng1.normal((3, 1, 3, 3)))
    w2 = Tensor(rng2.normal((3, 1, 3, 3)))
    out1 = T.gelu(T.conv2d(x1, w1, padding=1, groups=3))
    out2 = T.gelu(T.conv2d(x2, w2, padding=1, groups=3))
    assert np.array_equal(out1.data, out2.data)


# -- salt & pepper noise --------------------------------------------------------------------


def test_salt_pepper_zero_probability_is_identity():
    x = Tensor(RngStream(14).normal((2, 3, 4, 4)))
    out = T.salt_pepper_noise(x, 0.0, 0.0, RngStream(0))
    assert out is x


def test_salt_pepper_full_salt_saturates_to_channel_max():
    rng = RngStream(15)
    x = Tensor(rng.normal((2, 3, 5, 5)))
    out = T.salt_pepper_noise(x, 1.0, 0.0, RngStream(1))
    cmax = x.data.max(axis=(2, 3), keepdims=True)
    assert np.array_equal(out.data, np.broadcast_to(cmax, x.data.shape))


def test_salt_pepper_corruption_fraction():
    x = Tensor(RngStream(16).uniform((4, 4, 250, 250)).astype(np.float32))
    out = T.salt_pepper_noise(x, 0.05, 0.05, RngStream(2))
    frac = (out.data != x.data).mean()
    assert abs(frac - 0.10) <= 0.01


def test_salt_pepper_invalid_probabilities():
    x = Tensor(np.zeros((1, 1, 2, 2)))
    with pytest.raises(ConfigError):
        T.salt_pepper_noise(x, 0.7, 0.5, RngStream(0))
