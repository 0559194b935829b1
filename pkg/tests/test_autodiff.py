import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from poseattn import autodiff as ad
from poseattn.autodiff import Array, Tape

from conftest import GRAD_TOL, grad_check


def away_from_zero(rng, shape, lo=0.1):
    x = rng.uniform(lo, 1.0, shape)
    return x * rng.choice([-1.0, 1.0], shape)


# ---------------------------------------------------------------- gradient checks per op


@pytest.mark.parametrize(
    "name, fn, shapes",
    [
        ("add-broadcast", lambda p: ad.add(p[0], p[1]), [(3, 4), (4,)]),
        ("mul-broadcast", lambda p: ad.mul(p[0], p[1]), [(2, 3, 4), (3, 1)]),
        ("neg", lambda p: ad.neg(p[0]), [(5,)]),
        ("sub", lambda p: p[0] - p[1], [(3,), (3,)]),
        ("sigmoid", lambda p: ad.sigmoid(p[0]), [(4, 3)]),
        ("tanh", lambda p: ad.tanh(p[0]), [(4, 3)]),
        ("getitem-slice", lambda p: ad.getitem(p[0], (slice(None), slice(1, 3))), [(3, 4)]),
        ("getitem-fancy-repeat", lambda p: ad.getitem(p[0], np.array([0, 2, 2, 1])), [(3, 2)]),
        ("reshape", lambda p: ad.reshape(p[0], (6, 2)), [(3, 4)]),
        ("transpose", lambda p: ad.transpose(p[0], (2, 0, 1)), [(2, 3, 4)]),
        ("concat", lambda p: ad.concat([p[0], p[1]], axis=-1), [(2, 3), (2, 5)]),
        ("stack", lambda p: ad.stack([p[0], p[1]], axis=-1), [(2, 3), (2, 3)]),
        ("sum-axis", lambda p: ad.sum(p[0], axis=1), [(3, 4, 2)]),
        ("mean", lambda p: ad.mean(p[0]), [(3, 4)]),
        ("affine-vector", lambda p: ad.affine(p[0], p[1], p[2]), [(5,), (3, 5), (3,)]),
        ("affine-batch", lambda p: ad.affine(p[0], p[1], p[2]), [(4, 5), (3, 5), (3,)]),
        ("matvec", lambda p: ad.matvec(p[0], p[1]), [(2, 6, 4), (2, 4)]),
        ("softmax", lambda p: ad.softmax(p[0], axis=-1), [(3, 5)]),
        ("softmax-axis0", lambda p: ad.softmax(p[0], axis=0), [(4, 2)]),
        ("cross-entropy", lambda p: ad.cross_entropy(p[0], [2, 0, 1]), [(3, 4)]),
        ("cross-entropy-vector", lambda p: ad.cross_entropy(p[0], 3), [(5,)]),
    ],
)
def test_op_gradients(name, fn, shapes, rng):
    arrays = [away_from_zero(rng, s) for s in shapes]
    assert grad_check(fn, arrays) < GRAD_TOL


def test_relu_gradient_away_from_kink(rng):
    x = away_from_zero(rng, (4, 6), lo=0.05)
    assert grad_check(lambda p: ad.relu(p[0]), [x]) < GRAD_TOL


@pytest.mark.parametrize("padding, kshape", [("SAME", (3, 3)), ("SAME", (4, 2)), ("VALID", (3, 2)), ("SAME", (1, 1))])
def test_conv2d_gradient(padding, kshape, rng):
    x = rng.normal(size=(2, 5, 6, 3))
    k = rng.normal(size=kshape + (3, 4))
    b = rng.normal(size=4)
    err = grad_check(lambda p: ad.conv2d(p[0], p[1], p[2], padding), [x, k, b])
    assert err < GRAD_TOL


def test_conv2d_unbatched_gradient(rng):
    err = grad_check(lambda p: ad.conv2d(p[0], p[1], None, "SAME"), [rng.normal(size=(4, 5, 2)), rng.normal(size=(3, 3, 2, 3))])
    assert err < GRAD_TOL


@pytest.mark.parametrize("shape", [(2, 4, 6, 3), (1, 5, 7, 2), (3, 3, 2)])
def test_maxpool_gradient(shape, rng):
    # distinct values keep every window away from ties
    x = rng.permutation(np.prod(shape)).reshape(shape) * 0.1
    assert grad_check(lambda p: ad.maxpool2d(p[0]), [x]) < GRAD_TOL


def test_lstm_step_gradient(rng):
    hid, inp = 3, 4
    arrays = [
        rng.normal(size=(2, inp)),
        rng.normal(size=(2, hid)),
        rng.normal(size=(2, hid)),
        rng.normal(size=(4 * hid, inp)) * 0.5,
        rng.normal(size=(4 * hid, hid)) * 0.5,
        rng.normal(size=4 * hid),
    ]

    def fn(p):
        h, c = ad.lstm_step(p[0], p[1], p[2], {"wx": p[3], "wh": p[4], "b": p[5]})
        return ad.concat([h, c], axis=-1)

    assert grad_check(fn, arrays) < GRAD_TOL


def test_dropout_gradient_with_fixed_mask(rng):
    x = away_from_zero(rng, (5, 4))
    err = grad_check(lambda p: ad.dropout(p[0], 0.3, True, 7), [x])
    assert err < GRAD_TOL


# ---------------------------------------------------------------- forward oracles


def naive_conv(x, k, b, padding):
    kh, kw, c, f = k.shape
    if padding == "SAME":
        t, l = (kh - 1) // 2, (kw - 1) // 2
        x = np.pad(x, ((0, 0), (t, kh - 1 - t), (l, kw - 1 - l), (0, 0)))
    bsz, h, w, _ = x.shape
    out = np.zeros((bsz, h - kh + 1, w - kw + 1, f))
    for n in range(bsz):
        for i in range(out.shape[1]):
            for j in range(out.shape[2]):
                for o in range(f):
                    out[n, i, j, o] = np.sum(x[n, i : i + kh, j : j + kw, :] * k[:, :, :, o]) + b[o]
    return out


@pytest.mark.parametrize("padding", ["SAME", "VALID"])
def test_conv2d_matches_loops(padding, rng):
    x, k, b = rng.normal(size=(2, 6, 7, 3)), rng.normal(size=(4, 3, 3, 2)), rng.normal(size=2)
    got = ad.conv2d(Array(x), Array(k), Array(b), padding).data
    np.testing.assert_allclose(got, naive_conv(x, k, b, padding), rtol=1e-12, atol=1e-12)


def test_conv2d_same_keeps_extent_and_valid_shrinks():
    x = Array(np.ones((1, 20, 30, 3)))
    assert ad.conv2d(x, Array(np.ones((8, 3, 3, 2))), None, "SAME").shape == (1, 20, 30, 2)
    assert ad.conv2d(x, Array(np.ones((8, 3, 3, 2))), None, "VALID").shape == (1, 13, 28, 2)
    with pytest.raises(ValueError):
        ad.conv2d(Array(np.ones((1, 2, 2, 3))), Array(np.ones((3, 3, 3, 1))), None, "VALID")


def test_maxpool_odd_extent_and_ties():
    x = np.arange(15, dtype=float).reshape(1, 3, 5, 1)
    y = ad.maxpool2d(Array(x)).data
    assert y.shape == (1, 2, 3, 1)
    np.testing.assert_array_equal(y[0, :, :, 0], [[6, 8, 9], [11, 13, 14]])
    tie = Array(np.ones((2, 2, 1)), requires_grad=True)
    with Tape():
        (g,) = ad.backward(ad.sum(ad.maxpool2d(tie)), [tie])
    np.testing.assert_array_equal(g[:, :, 0], [[1, 0], [0, 0]])


def test_lstm_matches_hand_formula(rng):
    hid, inp = 2, 3
    x, h, c = rng.normal(size=inp), rng.normal(size=hid), rng.normal(size=hid)
    wx, wh, b = rng.normal(size=(4 * hid, inp)), rng.normal(size=(4 * hid, hid)), rng.normal(size=4 * hid)
    z = wx @ x + wh @ h + b
    sig = lambda v: 1 / (1 + np.exp(-v))
    i, f, g, o = sig(z[:2]), sig(z[2:4]), np.tanh(z[4:6]), sig(z[6:])
    c2 = f * c + i * g
    h2 = o * np.tanh(c2)
    hn, cn = ad.lstm_step(Array(x), Array(h), Array(c), {"wx": Array(wx), "wh": Array(wh), "b": Array(b)})
    np.testing.assert_allclose(hn.data, h2, rtol=1e-12)
    np.testing.assert_allclose(cn.data, c2, rtol=1e-12)


def test_cross_entropy_value():
    z = np.array([[1.0, 2.0, 0.5], [0.0, 0.0, 0.0]])
    want = np.mean([-np.log(np.exp(2.0) / np.exp(z[0]).sum()), np.log(3.0)])
    assert ad.cross_entropy(Array(z), [1, 2]).data == pytest.approx(want, rel=1e-12)
    with pytest.raises(ValueError):
        ad.cross_entropy(Array(z), [1, 3])


def test_dropout_scaling_and_eval_identity():
    x = Array(np.ones(10000))
    y = ad.dropout(x, 0.5, True, 0).data
    assert set(np.unique(y)) <= {0.0, 2.0}
    assert abs(y.mean() - 1.0) < 0.05
    assert ad.dropout(x, 0.5, False) is x
    with pytest.raises(ValueError):
        ad.dropout(x, 1.0, True, 0)


def test_sigmoid_is_stable_for_large_inputs():
    y = ad.sigmoid(Array(np.array([-800.0, 0.0, 800.0]))).data
    np.testing.assert_array_equal(y, [0.0, 0.5, 1.0])


# ---------------------------------------------------------------- tape semantics


def test_no_recording_outside_tape():
    w = Array(np.ones(3), requires_grad=True)
    y = ad.mul(w, 2.0)
    assert not y.requires_grad
    with pytest.raises(ValueError, match="not on a tape"):
        ad.backward(ad.sum(y))


def test_backward_visits_nodes_in_reverse_and_zero_for_unreachable():
    a = Array(np.array([1.0, 2.0]), requires_grad=True)
    unused = Array(np.ones(4), requires_grad=True)
    with Tape() as tape:
        b = ad.mul(a, a)
        c = ad.sum(b)
        ga, gu = ad.backward(c, [a, unused])
    assert tape.backward_order == sorted(tape.backward_order, reverse=True)
    np.testing.assert_array_equal(ga, [2.0, 4.0])
    np.testing.assert_array_equal(gu, np.zeros(4))


def test_nonscalar_loss_rejected():
    a = Array(np.ones(3), requires_grad=True)
    with Tape():
        with pytest.raises(ValueError, match="scalar"):
            ad.backward(ad.mul(a, 2.0), [a])


def test_shared_input_accumulates():
    a = Array(np.array(3.0), requires_grad=True)
    with Tape():
        (g,) = ad.backward(ad.add(ad.mul(a, a), a), [a])
    assert g == pytest.approx(7.0)


def test_shape_errors():
    with pytest.raises(ValueError):
        ad.affine(Array(np.ones(3)), Array(np.ones((2, 4))))
    with pytest.raises(ValueError):
        ad.matvec(Array(np.ones((2, 3, 4))), Array(np.ones((2, 3))))


# ---------------------------------------------------------------- properties


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 9)), elements=st.floats(-500, 500)))
def test_softmax_is_a_distribution(x):
    p = ad.softmax(Array(x), axis=-1).data
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6), st.integers(1, 3)), elements=st.floats(-1e3, 1e3)))
def test_maxpool_output_is_window_max(x):
    y = ad.maxpool2d(Array(x)).data
    for i in range(y.shape[0]):
        for j in range(y.shape[1]):
            np.testing.assert_array_equal(y[i, j], x[2 * i : 2 * i + 2, 2 * j : 2 * j + 2].max(axis=(0, 1)))
