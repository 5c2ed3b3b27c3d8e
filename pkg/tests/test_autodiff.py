import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cthdiff import autodiff as ad
from cthdiff.autodiff import DimensionError, NonFiniteError, Tape, Tensor

from _helpers import check_op, numeric_grad, rel_error

OP_TOL = 1e-6


# ---------------------------------------------------------------- conv1d

def test_conv_zero_input_gives_bias(rng):
    w = Tensor(rng.standard_normal((3, 2, 3)))
    b = Tensor(np.array([0.5, -1.0, 2.0]))
    out = ad.conv1d(Tensor(np.zeros((2, 9))), w, b, padding=1)
    assert np.array_equal(out.data, np.repeat(b.data[:, None], 9, axis=1))


def test_conv_identity_kernel(rng):
    x = rng.standard_normal((4, 11))
    w = np.zeros((4, 4, 1))
    w[np.arange(4), np.arange(4), 0] = 1.0
    out = ad.conv1d(Tensor(x), Tensor(w), Tensor(np.zeros(4)))
    assert np.array_equal(out.data, x)


def test_conv_weight_gradient_of_sum(rng):
    x = rng.standard_normal((2, 8))
    w = rng.standard_normal((3, 2, 3))
    b = rng.standard_normal(3)

    def f(wa):
        return float(ad.conv1d(Tensor(x), Tensor(wa), Tensor(b), padding=1).data.sum())

    wt = Tensor(w.copy(), requires_grad=True)
    with Tape() as tape:
        s = ad.sum(ad.conv1d(Tensor(x), wt, Tensor(b), padding=1))
    ad.backward(tape, s)
    assert rel_error(wt.grad, numeric_grad(f, [w], 0)) < OP_TOL


@pytest.mark.parametrize("padding,stride", [(1, 1), (0, 1), (1, 2), (2, 1)])
def test_conv_gradcheck_all_inputs(rng, padding, stride):
    x, w, b = rng.standard_normal((2, 3, 9)), rng.standard_normal((4, 2, 3)), rng.standard_normal(4)
    err = check_op(lambda x, w, b: ad.conv1d(x, w, b, padding=padding, stride=stride), [x, w, b])
    assert err < OP_TOL


def test_conv_output_length(rng):
    out = ad.conv1d(Tensor(rng.standard_normal((2, 10))), Tensor(rng.standard_normal((3, 2, 5))), padding=1)
    assert out.shape == (3, 10 + 2 - 5 + 1)


def test_conv_stride_two_halves_with_ceil(rng):
    out = ad.conv1d(Tensor(rng.standard_normal((2, 1, 17))), Tensor(rng.standard_normal((2, 2, 3))),
                    padding=1, stride=2)
    assert out.shape == (2, 1, 9)


def test_conv_shape_mismatch_names_axis(rng):
    with pytest.raises(DimensionError, match="channel"):
        ad.conv1d(Tensor(rng.standard_normal((3, 8))), Tensor(rng.standard_normal((2, 2, 3))))


def test_conv_batched_matches_per_item(rng):
    x = rng.standard_normal((3, 4, 12))
    w, b = rng.standard_normal((5, 3, 3)), rng.standard_normal(5)
    batched = ad.conv1d(Tensor(x), Tensor(w), Tensor(b), padding=1).data
    for n in range(4):
        single = ad.conv1d(Tensor(x[:, n]), Tensor(w), Tensor(b), padding=1).data
        np.testing.assert_allclose(batched[:, n], single, rtol=0, atol=1e-13)


# ---------------------------------------------------------------- attention

def test_attention_single_position(rng):
    c = 4
    x = rng.standard_normal((c, 1))
    wq, wk, wv, wo = (rng.standard_normal((c, c)) for _ in range(4))
    a = ad.attention_weights(x, wq, wk)
    assert a.shape == (1, 1, 1, 1) and a[0, 0, 0, 0] == 1.0
    out = ad.self_attention_1d(*(Tensor(v) for v in (x, wq, wk, wv, wo)))
    np.testing.assert_allclose(out.data, wo @ wv @ x, rtol=1e-13)


def test_attention_zero_logits_is_uniform(rng):
    c, L = 3, 7
    x = rng.standard_normal((c, L))
    wv, wo = rng.standard_normal((c, c)), rng.standard_normal((c, c))
    z = np.zeros((c, c))
    out = ad.self_attention_1d(Tensor(x), Tensor(z), Tensor(z), Tensor(wv), Tensor(wo)).data
    expected = wo @ (wv @ x).mean(axis=1, keepdims=True)
    np.testing.assert_allclose(out, np.repeat(expected, L, axis=1), rtol=1e-12)
    np.testing.assert_allclose(ad.attention_weights(x, z, z), 1.0 / L)


def test_attention_rows_sum_to_one(rng):
    c = 4
    a = ad.attention_weights(rng.standard_normal((c, 3, 6)), rng.standard_normal((c, c)),
                             rng.standard_normal((c, c)), heads=2)
    np.testing.assert_allclose(a.sum(axis=-1), 1.0, rtol=1e-13)


@pytest.mark.parametrize("heads", [1, 2])
def test_attention_gradcheck(rng, heads):
    c, L = 4, 6
    arrays = [rng.standard_normal((c, L))] + [rng.standard_normal((c, c)) for _ in range(4)]
    assert check_op(lambda *t: ad.self_attention_1d(*t, heads=heads), arrays) < OP_TOL


def test_attention_gradcheck_batched(rng):
    c = 4
    arrays = [rng.standard_normal((c, 2, 5))] + [rng.standard_normal((c, c)) for _ in range(4)]
    assert check_op(ad.self_attention_1d, arrays) < OP_TOL


def test_attention_rejects_non_square(rng):
    x = Tensor(rng.standard_normal((4, 5)))
    sq = Tensor(np.eye(4))
    with pytest.raises(DimensionError, match="wk"):
        ad.self_attention_1d(x, sq, Tensor(np.ones((4, 3))), sq, sq)


def test_attention_rejects_bad_head_count(rng):
    x = Tensor(rng.standard_normal((4, 5)))
    sq = Tensor(np.eye(4))
    with pytest.raises(DimensionError, match="heads"):
        ad.self_attention_1d(x, sq, sq, sq, sq, heads=3)


# ---------------------------------------------------------------- group norm

def test_group_norm_constant_input():
    out = ad.group_norm(Tensor(np.full((4, 6), 3.7)), 2, Tensor(np.ones(4)), Tensor(np.zeros(4)))
    # the group mean of a constant is exact only up to one rounding of the sum
    np.testing.assert_allclose(out.data, 0.0, atol=1e-12)


def test_group_norm_zero_gamma_gives_beta(rng):
    beta = rng.standard_normal(4)
    out = ad.group_norm(Tensor(rng.standard_normal((4, 6))), 2, Tensor(np.zeros(4)), Tensor(beta))
    np.testing.assert_array_equal(out.data, np.repeat(beta[:, None], 6, axis=1))


def test_group_norm_standardizes_groups(rng):
    x = 5.0 + 3.0 * rng.standard_normal((6, 2, 10))
    out = ad.group_norm(Tensor(x), 3, Tensor(np.ones(6)), Tensor(np.zeros(6)), eps=1e-12).data
    grouped = out.reshape(3, 2, 2, 10).transpose(0, 2, 1, 3).reshape(3, 2, -1)
    np.testing.assert_allclose(grouped.mean(axis=-1), 0.0, atol=1e-12)
    np.testing.assert_allclose(grouped.var(axis=-1), 1.0, rtol=1e-9)


@pytest.mark.parametrize("shape,groups", [((4, 6), 2), ((6, 3, 5), 3), ((4, 7), 4)])
def test_group_norm_gradcheck(rng, shape, groups):
    c = shape[0]
    arrays = [rng.standard_normal(shape), 1 + 0.3 * rng.standard_normal(c), rng.standard_normal(c)]
    assert check_op(lambda x, g, b: ad.group_norm(x, groups, g, b), arrays) < OP_TOL


def test_group_norm_groups_must_divide():
    with pytest.raises(DimensionError, match="groups"):
        ad.group_norm(Tensor(np.ones((6, 4))), 4, Tensor(np.ones(6)), Tensor(np.zeros(6)))


# ---------------------------------------------------------------- small ops

def test_silu_zero_and_values():
    x = np.array([0.0, 1.0, -2.0])
    out = ad.silu(Tensor(x)).data
    np.testing.assert_allclose(out, x / (1 + np.exp(-x)), rtol=1e-15)
    assert out[0] == 0.0


def test_concat_example():
    out = ad.concat_channels(Tensor(np.zeros((1, 5))), Tensor(np.ones((1, 5)))).data
    assert np.all(out[0] == 0) and np.all(out[1] == 1)


def test_concat_length_mismatch():
    with pytest.raises(DimensionError, match="length"):
        ad.concat_channels(Tensor(np.zeros((1, 5))), Tensor(np.zeros((1, 6))))


def test_concat_then_slice_recovers(rng):
    a, b = rng.standard_normal((2, 3, 5)), rng.standard_normal((3, 3, 5))
    cat = ad.concat_channels(Tensor(a), Tensor(b))
    assert np.array_equal(ad.slice_channels(cat, 0, 2).data, a)
    assert np.array_equal(ad.slice_channels(cat, 2, 5).data, b)


@pytest.mark.parametrize("name,build,shapes", [
    ("linear", lambda x, w, b: ad.linear(x, w, b), [(3, 4), (5, 4), (5,)]),
    ("silu", ad.silu, [(3, 7)]),
    ("add_broadcast", ad.add, [(3, 4, 5), (3, 1, 1)]),
    ("sub", ad.sub, [(3, 5), (3, 5)]),
    ("mul_broadcast", ad.mul, [(2, 3, 5), (1, 3, 1)]),
    ("square", ad.square, [(4, 3)]),
    ("sum_axes", lambda x: ad.sum(x, axis=(0, 2)), [(2, 3, 4)]),
    ("mean", ad.mean, [(3, 4)]),
    ("reshape", lambda x: ad.reshape(x, (6, 2)), [(3, 4)]),
    ("transpose", ad.transpose, [(3, 4)]),
    ("concat", ad.concat_channels, [(2, 5), (3, 5)]),
    ("slice", lambda x: ad.slice_channels(x, 1, 3), [(4, 5)]),
    ("upsample_even", lambda x: ad.upsample2(x, 10), [(2, 5)]),
    ("upsample_crop", lambda x: ad.upsample2(x, 17), [(2, 3, 9)]),
])
def test_small_op_gradcheck(rng, name, build, shapes):
    assert check_op(build, [rng.standard_normal(s) for s in shapes]) < OP_TOL, name


def test_upsample_rejects_bad_length():
    with pytest.raises(DimensionError):
        ad.upsample2(Tensor(np.ones((1, 4))), 9)


def test_linear_shape_error():
    with pytest.raises(DimensionError, match="in-dim"):
        ad.linear(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))


# ---------------------------------------------------------------- backward

def test_backward_identity():
    x = Tensor(np.array(2.5), requires_grad=True)
    with Tape() as tape:
        y = ad.mul(x, 1.0)
    ad.backward(tape, y, seed=np.array(1.0))
    assert x.grad == 1.0


def test_backward_sum_of_squares():
    x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    with Tape() as tape:
        y = ad.sum(ad.mul(x, x))
    ad.backward(tape, y)
    np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])


def test_backward_empty_tape_is_noop():
    x = Tensor(np.ones(3), requires_grad=True)
    tape = Tape()
    ad.backward(tape, x)
    assert len(tape) == 0


def test_unreached_leaf_gets_zero_gradient():
    x = Tensor(np.ones(3), requires_grad=True)
    unused = Tensor(np.ones((2, 2)), requires_grad=True)
    with Tape() as tape:
        y = ad.sum(ad.square(x))
    ad.backward(tape, y, params=[x, unused])
    assert np.array_equal(unused.grad, np.zeros((2, 2)))


def test_seed_shape_must_match():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = ad.square(x)
    with pytest.raises(DimensionError):
        ad.backward(tape, y, seed=np.ones(4))


def test_tape_is_topologically_ordered(rng):
    x = Tensor(rng.standard_normal((2, 6)), requires_grad=True)
    w = Tensor(rng.standard_normal((2, 2, 3)), requires_grad=True)
    with Tape() as tape:
        ad.sum(ad.silu(ad.conv1d(x, w, padding=1)))
    seen = {id(x), id(w)}
    for out, inputs, _ in tape.nodes:
        assert all(id(i) in seen or not i.requires_grad for i in inputs)
        seen.add(id(out))


@settings(max_examples=25, deadline=None)
@given(a=st.floats(-5, 5, allow_nan=False).filter(lambda v: abs(v) > 1e-3), seed=st.integers(0, 1000))
def test_backward_linear_in_seed(a, seed):
    r = np.random.default_rng(seed)
    x0, w0 = r.standard_normal((3, 7)), r.standard_normal((4, 3, 3))
    s = r.standard_normal((4, 7))

    def grads(scale):
        x, w = Tensor(x0.copy(), requires_grad=True), Tensor(w0.copy(), requires_grad=True)
        with Tape() as tape:
            y = ad.silu(ad.conv1d(x, w, padding=1))
        ad.backward(tape, y, seed=scale * s)
        return x.grad, w.grad

    gx1, gw1 = grads(1.0)
    gxa, gwa = grads(a)
    np.testing.assert_allclose(gxa, a * gx1, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(gwa, a * gw1, rtol=1e-12, atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(c_in=st.integers(1, 4), c_out=st.integers(1, 4), length=st.integers(3, 12),
       k=st.sampled_from([1, 3, 5]), seed=st.integers(0, 10_000))
def test_conv_gradcheck_property(c_in, c_out, length, k, seed):
    r = np.random.default_rng(seed)
    arrays = [r.standard_normal((c_in, length)), r.standard_normal((c_out, c_in, k)), r.standard_normal(c_out)]
    assert check_op(lambda x, w, b: ad.conv1d(x, w, b, padding=(k - 1) // 2), arrays, seed) < OP_TOL


def test_forward_is_bit_deterministic(rng):
    x, w = rng.standard_normal((3, 2, 17)), rng.standard_normal((3, 3, 3))
    a = ad.self_attention_1d(ad.conv1d(Tensor(x), Tensor(w), padding=1), *(Tensor(np.eye(3)) for _ in range(4)))
    b = ad.self_attention_1d(ad.conv1d(Tensor(x), Tensor(w), padding=1), *(Tensor(np.eye(3)) for _ in range(4)))
    assert a.data.tobytes() == b.data.tobytes()


def test_float32_stays_float32(rng):
    x = Tensor(rng.standard_normal((2, 5)).astype(np.float32))
    y = ad.add(ad.mul(x, 2.0), 1.0)
    assert y.dtype == np.float32


def test_check_finite_mode():
    ad.set_check_finite(True)
    try:
        with pytest.raises(NonFiniteError):
            ad.add(Tensor(np.array([np.inf])), 1.0)
    finally:
        ad.set_check_finite(False)


def test_no_tape_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with Tape() as tape:
        ad.square(Tensor(np.ones(2)))
    assert len(tape) == 0
    ad.square(x)  # no active tape; must not fail
