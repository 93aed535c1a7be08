import numpy as np
import pytest

from crowdflow import layers as L
from crowdflow import tensor as T
from crowdflow.acfm import AcfmParams, acfm_run, acfm_step, attention_map, init_acfm
from crowdflow.tensor import Tensor


def make_params(rng, c_in=3, c=2, bias_scale=0.3):
    p = init_acfm(c_in, c, rng)
    for lstm in (p.lstm1, p.lstm2):
        lstm.b.data[...] = rng.normal(0, bias_scale, size=lstm.b.shape)
    return p


def seq(rng, steps=3, c_in=3, h=4, w=4):
    return [Tensor(rng.normal(size=(c_in, h, w))) for _ in range(steps)]


# ---------------------------------------------------------------------------
# attention map


def test_attention_zero_kernel():
    h1, x = Tensor(np.ones((2, 3, 3))), Tensor(np.ones((3, 3, 3)))
    w0 = attention_map(h1, x, Tensor(np.zeros((1, 5, 1, 1))), Tensor([0.0]))
    assert w0.shape == (1, 3, 3) and np.all(w0.data == 0.5)
    w10 = attention_map(h1, x, Tensor(np.zeros((1, 5, 1, 1))), Tensor([10.0]))
    np.testing.assert_allclose(w10.data, 0.9999546021312976, rtol=1e-15)


def test_attention_per_pixel_dot_product(rng):
    h1, x = rng.normal(size=(2, 2, 2)), rng.normal(size=(3, 2, 2))
    k, b = rng.normal(size=(1, 5, 1, 1)), rng.normal(size=1)
    out = attention_map(Tensor(h1), Tensor(x), Tensor(k), Tensor(b)).data
    stacked = np.concatenate([h1, x])  # hidden state first, input second
    for y in range(2):
        for xx in range(2):
            z = k[0, :, 0, 0] @ stacked[:, y, xx] + b[0]
            np.testing.assert_allclose(out[0, y, xx], 1.0 / (1.0 + np.exp(-z)), rtol=1e-14)


def test_attention_shape_mismatch():
    with pytest.raises(ValueError):
        attention_map(Tensor(np.ones((2, 3, 3))), Tensor(np.ones((3, 3, 4))), Tensor(np.zeros((1, 5, 1, 1))), Tensor([0.0]))


def test_acfm_params_reject_non_pointwise_kernel(rng):
    p = init_acfm(3, 2, rng)
    with pytest.raises(ValueError):
        AcfmParams(p.lstm1, L.zeros((1, 5, 3, 3)), L.zeros(1), p.lstm2)
    with pytest.raises(ValueError):
        AcfmParams(p.lstm1, L.zeros((2, 5, 1, 1)), L.zeros(1), p.lstm2)


# ---------------------------------------------------------------------------
# step and run


def test_step_with_saturated_attention_matches_plain_lstm(rng):
    p = make_params(rng)
    p.attn_w.data[...] = 0.0
    p.attn_b.data[...] = 30.0
    zeros = L.ConvLstmState.zeros((2, 4, 4))
    x = seq(rng, 1)[0]
    _, s2, w = acfm_step(zeros, zeros, x, p)
    plain = L.convlstm_step(zeros, x, p.lstm2)
    np.testing.assert_allclose(s2.h.data, plain.h.data, atol=1e-4)
    assert w.shape == (1, 4, 4)


def test_run_with_bias_30_matches_plain_second_lstm(rng):
    """sigmoid(30) differs from 1 by ~1e-13, far inside the 1e-9 budget."""
    p = make_params(rng)
    p.attn_w.data[...] *= 1e-3
    p.attn_b.data[...] = 30.0
    xs = [Tensor(rng.uniform(-1, 1, size=(3, 4, 4))) for _ in range(4)]
    h_acfm, _ = acfm_run(xs, p)
    h_plain, _ = L.convlstm_run(xs, p.lstm2)
    np.testing.assert_allclose(h_acfm.data, h_plain.data, rtol=0, atol=1e-9)


def test_zero_input_zero_state():
    p = init_acfm(3, 2, 0)
    zeros = L.ConvLstmState.zeros((2, 4, 4))
    _, s2, w = acfm_step(zeros, zeros, Tensor(np.zeros((3, 4, 4))), p)
    assert np.all(w.data == 0.5)
    assert np.all(s2.h.data == 0.0)


def test_run_trace_length_and_base_case(rng):
    p = make_params(rng)
    xs = seq(rng, 5)
    h, trace = acfm_run(xs, p)
    assert len(trace) == len(trace.h1) == len(trace.h2) == 5
    assert trace.attention_maps().shape == (5, 1, 4, 4)
    assert all(np.all((a.data > 0) & (a.data < 1)) for a in trace.attention)
    h1, tr1 = acfm_run(xs[:1], p)
    zeros = L.ConvLstmState.zeros((2, 4, 4))
    _, s2, w = acfm_step(zeros, zeros, xs[0], p)
    np.testing.assert_array_equal(h1.data, s2.h.data)
    np.testing.assert_array_equal(tr1.attention[0].data, w.data)


def test_run_is_order_sensitive_and_deterministic(rng):
    p = make_params(rng)
    xs = seq(rng, 3)
    a, _ = acfm_run(xs, p)
    b, _ = acfm_run(xs[::-1], p)
    assert np.abs(a.data - b.data).max() > 1e-6
    np.testing.assert_array_equal(a.data, acfm_run(xs, p)[0].data)


def test_run_rejects_empty_and_ragged(rng):
    p = make_params(rng)
    with pytest.raises(ValueError):
        acfm_run([], p)
    with pytest.raises(ValueError):
        acfm_run([Tensor(np.zeros((3, 4, 4))), Tensor(np.zeros((3, 4, 5)))], p)


def test_batched_run_equals_per_sample(rng):
    p = make_params(rng)
    xs = [rng.normal(size=(2, 3, 4, 4)) for _ in range(3)]
    hb, tb = acfm_run([Tensor(x) for x in xs], p)
    for i in range(2):
        hi, ti = acfm_run([Tensor(x[i]) for x in xs], p)
        np.testing.assert_allclose(hb.data[i], hi.data, atol=1e-13)
        np.testing.assert_allclose(tb.attention[-1].data[i], ti.attention[-1].data, atol=1e-13)


# ---------------------------------------------------------------------------
# gradients


def _loss_fn(p, xs, target):
    def build():
        h, _ = acfm_run(xs, p)
        d = T.sub(h, Tensor(target))
        return T.mean(T.mul(d, d))

    return build


@pytest.mark.parametrize("seed", range(5))
def test_acfm_gradients_match_finite_differences(seed):
    from test_tensor import assert_matches_fd

    r = np.random.default_rng(seed)
    p = make_params(r, c_in=2, c=2)
    p.attn_b.data[...] = r.normal(0, 0.5, size=1)
    xs = seq(r, 2, c_in=2, h=3, w=3)
    target = r.normal(size=(2, 3, 3))
    params = [t for _, t in L.named_parameters(p)]
    assert_matches_fd(_loss_fn(p, xs, target), params)


def test_attention_bias_moves_loss_even_with_zero_kernel(rng):
    p = make_params(rng)
    p.attn_w.data[...] = 0.0
    xs, target = seq(rng, 3), rng.normal(size=(2, 4, 4))
    build = _loss_fn(p, xs, target)
    with T.Tape() as tape:
        loss = build()
    T.zero_grad([p.attn_b])
    T.backward(loss, tape)
    (fd,) = T.finite_difference_gradient(lambda: build().item(), [p.attn_b])
    assert abs(fd[0]) > 1e-6
    np.testing.assert_allclose(p.attn_b.grad, fd, rtol=1e-6)
