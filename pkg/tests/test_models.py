import numpy as np
import pytest

from sparsecast import autodiff as ad
from sparsecast.attention import OpCounters
from sparsecast.autodiff import DimensionError
from sparsecast.gradcheck import check_gradients
from sparsecast.memory import AttentionIndexMemory
from sparsecast.models import (
    ForwardContext,
    InformerLite,
    MLinear,
    ModelConfig,
    build_model,
    make_decoder_input,
)


def mlinear(**kw):
    base = dict(model="mlinear", L=8, S=4, n_channels=2)
    base.update(kw)
    return MLinear(ModelConfig(**base))


def informer(**kw):
    base = dict(model="informer_lite", L=8, S=4, n_channels=2, d_model=4, n_heads=2)
    base.update(kw)
    return InformerLite(ModelConfig(**base))


# ------------------------------------------------------------------ MLinear


def test_ci_zero_weights_zero_output(rng):
    m = mlinear()
    m.ci_weights.data[...] = 0
    assert not np.any(m.ci_forward(rng.standard_normal((8, 2))).data)


def test_ci_hand_product():
    m = mlinear(L=2, S=1, n_channels=1)
    m.ci_weights.data[...] = [[[1.0], [1.0]]]
    np.testing.assert_array_equal(m.ci_forward([[3.0], [4.0]]).data, [[7.0]])


def test_cd_hand_product():
    m = mlinear(L=2, S=1, n_channels=1)
    m.cd_weight.data[...] = [[2.0], [0.0]]
    np.testing.assert_array_equal(m.cd_forward([[3.0], [4.0]]).data, [[6.0]])


def test_ci_column_formula_and_permutation(rng):
    m = mlinear(n_channels=3)
    x = rng.standard_normal((8, 3))
    out = m.ci_forward(x).data
    for i in range(3):
        np.testing.assert_allclose(out[:, i], m.ci_weights.data[i].T @ x[:, i], atol=1e-14)
    perm = [2, 0, 1]
    m.ci_weights.data[...] = m.ci_weights.data[perm]
    np.testing.assert_allclose(m.ci_forward(x[:, perm]).data, out[:, perm], atol=1e-14)


def test_ci_channel_independence(rng):
    m = mlinear(n_channels=3)
    x = rng.standard_normal((8, 3))
    y = x.copy()
    y[:, 1] += rng.standard_normal(8)
    a, b = m.ci_forward(x).data, m.ci_forward(y).data
    np.testing.assert_array_equal(a[:, [0, 2]], b[:, [0, 2]])
    assert np.any(a[:, 1] != b[:, 1])


def test_cd_duplicate_channels_identical(rng):
    m = mlinear(n_channels=2)
    col = rng.standard_normal((8, 1))
    out = m.cd_forward(np.hstack([col, col])).data
    np.testing.assert_array_equal(out[:, 0], out[:, 1])


def test_single_channel_ci_equals_cd(rng):
    m = mlinear(n_channels=1)
    m.cd_weight.data[...] = m.ci_weights.data[0]
    x = rng.standard_normal((8, 1))
    np.testing.assert_array_equal(m.ci_forward(x).data, m.cd_forward(x).data)


def test_channel_mismatch_errors(rng):
    m = mlinear(n_channels=2)
    with pytest.raises(DimensionError):
        m.ci_forward(rng.standard_normal((8, 3)))
    with pytest.raises(DimensionError):
        m.cd_forward(rng.standard_normal((7, 2)))
    with pytest.raises(DimensionError):
        m.mix_forward(np.ones((4, 2)), np.ones((4, 1)))


def test_mix_zero_weight_zero_output(rng):
    m = mlinear()
    m.mix_weight.data[...] = 0
    assert not np.any(m.mix_forward(rng.standard_normal((4, 2)), rng.standard_normal((4, 2))).data)


@pytest.mark.parametrize("kind", ["sequence_mix", "feature_mix"])
def test_mix_symmetry_channel_constant(kind):
    m = mlinear(mapping_kind=kind, n_channels=3)
    m.mix_weight.data[...] = np.vstack([np.eye(4), np.zeros((4, 4))])
    col = np.array([[0.5], [-1.0], [2.0], [0.25]])
    x = np.tile(col, (1, 3))
    out = m.mix_forward(x, x).data
    # every channel sees the same modulation
    np.testing.assert_allclose(out, np.tile(out[:, :1], (1, 3)), atol=1e-14)
    # and mix_weight = [I; 0] keeps only the modulated CI rows
    gate = out[:, 0] / col[:, 0]
    np.testing.assert_allclose(gate, gate[0], atol=1e-12)


def test_mix_scalar_oracle():
    # n=1, S=1, P=1: every softmax is over one element, so the gate is rho_v @ Z
    m = mlinear(L=2, S=1, n_channels=1, P=1)
    m.rho_v.data[...] = [[0.1, 0.2], [0.3, -0.1]]
    m.mix_weight.data[...] = [[1.0], [2.0]]
    # Z = [2, 3] -> v = [0.8, 0.3] -> Z_mod = [3.6, 3.9] -> 3.6 + 2 * 3.9
    np.testing.assert_allclose(m.mix_forward([[2.0]], [[3.0]]).data, [[11.4]], atol=1e-13)


@pytest.mark.parametrize("kind", ["sequence_mix", "feature_mix"])
def test_mlinear_forward_shapes_and_determinism(kind, rng):
    m = mlinear(mapping_kind=kind, n_channels=3)
    x = rng.standard_normal((5, 8, 3))
    heads = m.forward(x)
    assert [h.shape for h in heads] == [(5, 4, 3)] * 3
    again = m.forward(x)
    for a, b in zip(heads, again):
        np.testing.assert_array_equal(a.data, b.data)
    np.testing.assert_array_equal(m.predict(x).data, heads[2].data)
    for b in range(5):
        np.testing.assert_allclose(m.predict(x[b]).data, heads[2].data[b], atol=1e-13)


def test_mlinear_seeded_init():
    a, b, c = mlinear(seed=3), mlinear(seed=3), mlinear(seed=4)
    for k, v in a.state_dict().items():
        np.testing.assert_array_equal(v, b.state_dict()[k])
        assert np.all(np.abs(v) <= 1 / np.sqrt(8))  # every fan-in is L = 2S = 8 here
    assert not np.array_equal(a.cd_weight.data, c.cd_weight.data)


def test_mlinear_counter_linear_in_channels(rng):
    counts = []
    for n in (2, 4, 8):
        m = mlinear(S=16, n_channels=n)
        m.predict(rng.standard_normal((8, n)))
        counts.append(m.counters.multiplies_total)
    # sequence_mix attends over the channel axis: 2 * d_k * d_v * n
    assert counts == [2 * 2 * 2 * n for n in (2, 4, 8)]


@pytest.mark.parametrize("seed", [0, 1, 2])
@pytest.mark.parametrize("kind", ["sequence_mix", "feature_mix"])
def test_mlinear_end_to_end_gradients(kind, seed):
    m = mlinear(mapping_kind=kind, seed=seed, P=2)
    x = np.random.default_rng(seed).standard_normal((3, 8, 2))
    target = np.random.default_rng(seed + 10).standard_normal((3, 4, 2))

    def loss():
        ci, cd, mix = m.forward(x)
        return ad.add(ad.add(ad.mean(ad.square(ad.sub(ci, target))), ad.mean(ad.square(ad.sub(cd, target)))),
                      ad.mean(ad.square(ad.sub(mix, target))))

    assert max(check_gradients(loss, m.parameters())) <= 1e-4


# -------------------------------------------------------------- InformerLite


def test_decoder_input_start_token(rng):
    x = rng.standard_normal((8, 2))
    dec = make_decoder_input(x, 4, 3).data
    np.testing.assert_array_equal(dec[:4], x[4:])
    assert dec.shape == (7, 2) and not np.any(dec[4:])


def test_informer_has_three_sites_and_shapes(rng):
    m = informer()
    mem = AttentionIndexMemory(warmup_epochs=0)
    ctx = ForwardContext("train", memory=mem)
    out = m(rng.standard_normal((3, 8, 2)), ctx)
    assert out.shape == (3, 4, 2)
    assert sorted(mem.keys()) == [(l, h) for l in range(3) for h in range(2)]


def test_predict_mode_skips_measurement(rng):
    m = informer(L=32, S=8, d_model=8)
    mem = AttentionIndexMemory(warmup_epochs=0)
    x = rng.standard_normal((2, 32, 2))
    train_ctx = ForwardContext("train", memory=mem)
    m(x, train_ctx)
    assert train_ctx.counters.measurement_dot_products > 0
    mem.freeze()
    ctx = ForwardContext("predict", memory=mem)
    m(x, ctx)
    assert ctx.counters.measurement_dot_products == 0


def test_predict_requires_frozen_complete_memory(rng):
    m = informer()
    x = rng.standard_normal((8, 2))
    with pytest.raises(RuntimeError):
        m(x, ForwardContext("predict", memory=AttentionIndexMemory()))
    mem = AttentionIndexMemory(warmup_epochs=0)
    m(x, ForwardContext("train", memory=mem))
    mem.entries.pop((1, 0))
    mem.freeze()
    with pytest.raises(KeyError, match=r"layer=1, head=0"):
        m(x, ForwardContext("predict", memory=mem))


def test_full_budget_matches_dense_twin(rng):
    big = dict(u_factor=1e6, sample_factor=1e6, L=16, S=4, d_model=8)
    sparse, dense = informer(**big), informer(attention="full", **big)
    x = rng.standard_normal((2, 16, 2))
    a = sparse(x, ForwardContext("train", memory=AttentionIndexMemory())).data
    b = dense(x, ForwardContext("train")).data
    np.testing.assert_allclose(a, b, atol=1e-6)


def test_index_round_trip_bit_identical(rng):
    m = informer(L=32, S=8, d_model=8)
    x = rng.standard_normal((2, 32, 2))
    mem = AttentionIndexMemory(warmup_epochs=0)
    train_out = m(x, ForwardContext("train", memory=mem, rng=np.random.default_rng(9))).data
    mem.freeze()
    pred_out = m(x, ForwardContext("predict", memory=mem)).data
    np.testing.assert_array_equal(pred_out, train_out)


def test_recompute_mode_records_nothing(rng):
    m = informer()
    mem = AttentionIndexMemory()
    ctx = ForwardContext("recompute", memory=mem)
    m(rng.standard_normal((8, 2)), ctx)
    assert list(mem.keys()) == [] and len(ctx.used_indices) == 6


def test_informer_shape_error(rng):
    with pytest.raises(DimensionError):
        informer()(rng.standard_normal((7, 2)), ForwardContext("recompute"))


@pytest.mark.parametrize("seed", [0, 1, 2])
@pytest.mark.parametrize("attention", ["prophet", "full"])
def test_informer_end_to_end_gradients(attention, seed):
    m = informer(seed=seed, attention=attention, u_factor=1.0)
    r = np.random.default_rng(seed)
    x, target = r.standard_normal((2, 8, 2)), r.standard_normal((2, 4, 2))
    mem = AttentionIndexMemory(warmup_epochs=0)
    m(x, ForwardContext("train", memory=mem))
    mem.freeze()

    def loss():
        return ad.mean(ad.square(ad.sub(m(x, ForwardContext("predict", memory=mem)), target)))

    assert max(check_gradients(loss, m.parameters())) <= 1e-4


def test_build_model_dispatch():
    assert isinstance(build_model(ModelConfig()), MLinear)
    assert isinstance(build_model(ModelConfig(model="informer_lite")), InformerLite)
    with pytest.raises(ValueError):
        ModelConfig(model="lstm")
    with pytest.raises(ValueError):
        ModelConfig(d_model=5, n_heads=2)


def test_state_dict_round_trip(rng):
    a, b = informer(seed=1), informer(seed=2)
    b.load_state_dict(a.state_dict())
    x = rng.standard_normal((8, 2))
    ctx = lambda: ForwardContext("recompute", rng=np.random.default_rng(0))  # noqa: E731
    np.testing.assert_array_equal(a(x, ctx()).data, b(x, ctx()).data)
    with pytest.raises(KeyError):
        b.load_state_dict({})


def test_counters_default_fresh():
    assert ForwardContext().counters.as_dict() == OpCounters().as_dict()
