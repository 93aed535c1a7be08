import dataclasses

import numpy as np
import pytest

from crowdflow import tensor as T
from crowdflow.acfm import AcfmParams
from crowdflow.gradcheck import random_batch
from crowdflow.layers import ConvLstmParams
from crowdflow.spn import (
    SpnConfig,
    Variant,
    embed_timestep,
    forward,
    fuse_and_predict,
    fusion_weight,
    init_params,
    periodic_branch,
    sequential_branch,
)
from crowdflow.tensor import Tensor


def features(rng, k, c=32, h=4, w=4):
    return [Tensor(rng.normal(size=(c, h, w))) for _ in range(k)]


def test_variant_parse_accepts_published_names():
    assert Variant.parse("SPN-w/o-Fusion") is Variant.SPN_NO_FUSION
    assert Variant.parse("srnn-w/o-attention") is Variant.SRNN_NO_ATTN
    assert Variant.parse("PRNN_NO_ATTN") is Variant.PRNN_NO_ATTN
    with pytest.raises(ValueError):
        Variant.parse("LSTM")


def test_variant_flags():
    assert [v for v in Variant if v.uses_seq] == [Variant.SCNN, Variant.SRNN_NO_ATTN, Variant.SRNN, Variant.SPN_NO_FUSION, Variant.SPN]
    assert [v for v in Variant if v.uses_per] == [Variant.PCNN, Variant.PRNN_NO_ATTN, Variant.PRNN, Variant.SPN_NO_FUSION, Variant.SPN]


def test_dataset_presets():
    tb, bn = SpnConfig.taxibj(), SpnConfig.bikenyc()
    assert (tb.h, tb.w, tb.n, tb.m, tb.n_units, tb.ext_length) == (32, 32, 3, 2, 12, 59)
    assert (bn.h, bn.w, bn.n, bn.m, bn.n_units, bn.ext_length) == (16, 8, 5, 7, 4, 38)


def test_config_validation():
    with pytest.raises(ValueError):
        SpnConfig(4, 4, n=0).validate(Variant.SRNN)
    SpnConfig(4, 4, n=0).validate(Variant.PRNN)
    with pytest.raises(ValueError):
        SpnConfig(4, 4, m=0).validate(Variant.SPN)
    with pytest.raises(ValueError):
        SpnConfig(0, 4).validate()


@pytest.mark.parametrize("variant", list(Variant))
def test_params_only_hold_used_parts(small_config, variant):
    p = init_params(small_config, variant, 0)
    assert (p.seq is not None) == (variant.uses_seq and not variant.is_cnn)
    assert (p.per is not None) == (variant.uses_per and not variant.is_cnn)
    assert (p.fusion is not None) == (variant is Variant.SPN)
    if p.seq is not None:
        assert isinstance(p.seq, AcfmParams if variant.attention else ConvLstmParams)
    names = [n for n, _ in p.named()]
    assert len(names) == len(set(names))
    assert all(np.all(np.isfinite(t.data)) for t in p.tensors())


def test_init_is_seed_deterministic(small_config):
    a, b = init_params(small_config, Variant.SPN, 3), init_params(small_config, Variant.SPN, 3)
    for x, y in zip(a.tensors(), b.tensors()):
        np.testing.assert_array_equal(x.data, y.data)


# ---------------------------------------------------------------------------
# embedding and branches


def test_embed_channel_count_and_separation(small_config, rng):
    p = init_params(small_config, Variant.SPN, 0)
    m1, m2 = rng.uniform(-1, 1, size=(2, 2, 4, 4))
    e1, e2 = rng.uniform(size=(2, small_config.ext_length))
    base = embed_timestep(Tensor(m1), Tensor(e1), p, 4, 4).data
    assert base.shape == (32, 4, 4)
    np.testing.assert_array_equal(embed_timestep(Tensor(m1), Tensor(e2), p, 4, 4).data[:16], base[:16])
    np.testing.assert_array_equal(embed_timestep(Tensor(m2), Tensor(e1), p, 4, 4).data[16:], base[16:])


def test_embed_zero_params(small_config, rng):
    p = init_params(small_config, Variant.SPN, 0)
    for t in p.tensors():
        t.data[...] = 0.0
    p.ext.fc2_b.data[...] = rng.normal(size=p.ext.fc2_b.shape)
    out = embed_timestep(Tensor(rng.uniform(-1, 1, (2, 4, 4))), Tensor(rng.uniform(size=small_config.ext_length)), p, 4, 4).data
    assert np.all(out[:16] == 0.0)
    np.testing.assert_array_equal(out[16:], p.ext.fc2_b.data.reshape(16, 4, 4))


def test_branch_shapes_and_length_checks(small_config, rng):
    p = init_params(small_config, Variant.SPN, 0)
    s_f, trace = sequential_branch(features(rng, 2), p, n=2)
    p_f, _ = periodic_branch(features(rng, 2), p, m=2)
    assert s_f.shape == p_f.shape == (16, 4, 4)
    assert len(trace) == 2
    with pytest.raises(ValueError):
        sequential_branch(features(rng, 3), p, n=2)
    with pytest.raises(ValueError):
        periodic_branch(features(rng, 1), p, m=2)


def test_periodic_branch_ignores_sequential_parameters(small_config, rng):
    p = init_params(small_config, Variant.SPN, 0)
    per = features(rng, 2)
    before = periodic_branch(per, p)[0].data
    for t in (p.seq.lstm1.w_x, p.seq_conv.w):
        t.data[...] = rng.normal(size=t.shape)
    np.testing.assert_array_equal(periodic_branch(per, p)[0].data, before)


# ---------------------------------------------------------------------------
# fusion


def test_fusion_weight_zero_and_saturated(small_config, rng):
    p = init_params(small_config, Variant.SPN, 0)
    s_f, p_f = Tensor(rng.normal(size=(3, 16, 4, 4))), Tensor(rng.normal(size=(3, 16, 4, 4)))
    e = Tensor(rng.uniform(0, 4, size=(3, small_config.ext_length)))
    p.fusion.zero_()
    np.testing.assert_array_equal(fusion_weight(s_f, p_f, e, p.fusion).data, 0.5)
    p.fusion.fc2_b.data[...] = -20.0
    np.testing.assert_allclose(fusion_weight(s_f, p_f, e, p.fusion).data, 2.0611536181902037e-09, rtol=1e-12)


def test_fusion_weight_range(small_config, rng):
    p = init_params(small_config, Variant.SPN, 0)
    s_f, p_f = Tensor(rng.normal(0, 5, size=(50, 16, 4, 4))), Tensor(rng.normal(0, 5, size=(50, 16, 4, 4)))
    r = fusion_weight(s_f, p_f, Tensor(rng.uniform(0, 4, size=(50, small_config.ext_length))), p.fusion).data
    assert r.shape == (50, 1)
    assert np.all((r > 0) & (r < 1))


def test_fuse_endpoints_ignore_the_other_branch(small_config, rng):
    out = init_params(small_config, Variant.SPN, 0).out
    s_f, p_f, p_alt = (Tensor(rng.normal(size=(16, 4, 4))) for _ in range(3))
    np.testing.assert_array_equal(fuse_and_predict(s_f, p_f, 1.0, out).data, fuse_and_predict(s_f, p_alt, 1.0, out).data)
    np.testing.assert_array_equal(fuse_and_predict(s_f, p_f, 0.0, out).data, fuse_and_predict(p_alt, p_f, 0.0, out).data)
    from crowdflow.layers import conv

    np.testing.assert_array_equal(fuse_and_predict(s_f, p_f, 1.0, out).data, T.tanh(conv(s_f, out)).data)


def test_fuse_equal_branches_independent_of_r(small_config, rng):
    out = init_params(small_config, Variant.SPN, 0).out
    s_f = Tensor(rng.normal(size=(16, 4, 4)))
    ref = fuse_and_predict(s_f, s_f, 0.0, out).data
    for r in (0.1, 0.5, 0.93, 1.0):
        np.testing.assert_allclose(fuse_and_predict(s_f, s_f, r, out).data, ref, atol=1e-14)


# ---------------------------------------------------------------------------
# forward


@pytest.mark.parametrize("variant", list(Variant))
def test_forward_shapes_and_range(small_config, variant, rng):
    p = init_params(small_config, variant, 1)
    pred, trace = forward(random_batch(small_config, 3, rng), variant, p, small_config)
    assert pred.shape == (3, 2, 4, 4)
    assert np.all((pred.data > -1) & (pred.data < 1))
    assert (trace.r is not None) == variant.is_spn
    has_attn = variant.attention and not variant.is_cnn
    assert (trace.seq is not None) == (has_attn and variant.uses_seq)
    assert (trace.per is not None) == (has_attn and variant.uses_per)


def test_forward_unbatched_equivalent(small_config, rng):
    p = init_params(small_config, Variant.SPN, 1)
    batch = random_batch(small_config, 3, rng)
    full = forward(batch, Variant.SPN, p)[0].data
    for i in range(3):
        one = dataclasses.replace(batch, **{f.name: getattr(batch, f.name)[i:i + 1] for f in dataclasses.fields(batch)})
        np.testing.assert_allclose(forward(one, Variant.SPN, p)[0].data[0], full[i], atol=1e-13)


def test_spn_with_zeroed_fusion_equals_no_fusion(small_config, rng):
    p = init_params(small_config, Variant.SPN, 2)
    p.fusion.zero_()
    batch = random_batch(small_config, 4, rng)
    a = forward(batch, Variant.SPN, p)[0].data
    b = forward(batch, Variant.SPN_NO_FUSION, dataclasses.replace(p, fusion=None))[0].data
    np.testing.assert_array_equal(a, b)


def test_srnn_ignores_periodic_inputs_and_parameters(small_config, rng):
    p = init_params(small_config, Variant.SPN, 4)
    batch = random_batch(small_config, 2, rng)
    out = forward(batch, Variant.SRNN, p)[0].data
    other = dataclasses.replace(batch, per_maps=rng.uniform(-1, 1, batch.per_maps.shape))
    np.testing.assert_array_equal(forward(other, Variant.SRNN, p)[0].data, out)

    with T.Tape() as tape:
        pred, _ = forward(batch, Variant.SRNN, p)
        loss = T.mean(T.mul(pred, pred))
    T.zero_grad(p.tensors())
    T.backward(loss, tape)
    per_names = [n for n, _ in p.named() if n.startswith(("per.", "per_conv.", "fusion."))]
    assert per_names
    for name, t in p.named():
        if name in per_names:
            assert np.all(t.grad == 0.0), name
    assert np.any(p.seq.attn_w.grad != 0.0)


def test_forward_rejects_mismatched_inputs(small_config, rng):
    batch = random_batch(small_config, 2, rng)
    spn = init_params(small_config, Variant.SPN, 0)
    with pytest.raises(ValueError):
        forward(batch, Variant.PCNN, spn)
    with pytest.raises(ValueError):
        forward(batch, Variant.SRNN_NO_ATTN, spn)
    with pytest.raises(ValueError):
        forward(batch, Variant.SPN, dataclasses.replace(spn, fusion=None))
    short = dataclasses.replace(batch, per_maps=batch.per_maps[:, :0], per_ext=batch.per_ext[:, :0])
    with pytest.raises(ValueError):
        forward(short, Variant.PRNN, init_params(small_config, Variant.PRNN, 0))
    with pytest.raises(ValueError):
        forward(batch, Variant.SPN, spn, dataclasses.replace(small_config, n=3))
