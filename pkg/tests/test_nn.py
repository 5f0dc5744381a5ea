import numpy as np
import pytest

from pivotseg import autograd as ag
from pivotseg.autograd import Tape, Tensor, grad_check
from pivotseg.nn import (
    GRU,
    MLP,
    BiGRU,
    ConfigError,
    Conv1d,
    Dropout,
    DropoutRNG,
    Embedding,
    LayerNorm,
    Linear,
    MultiHeadAttention,
    SandwichBlock,
    bigru_forward,
    conv1d_forward,
    count_macs,
    mha_forward,
    mlp_forward,
    sandwich_block,
)

from conftest import GRAD_TOL


def weighted_sum(t):
    return ag.tsum(t * Tensor(np.cos(np.arange(t.data.size)).reshape(t.shape)))


def zero_params(module):
    for p in module.parameters():
        p.data[...] = 0.0


# -- MLP ------------------------------------------------------------------


def test_mlp_zero_weights_sigmoid_is_half(rng):
    mlp = MLP([5, 7, 3], rng, final_sigmoid=True)
    zero_params(mlp)
    out = mlp_forward(Tensor(rng.normal(size=(4, 5))), mlp).data
    assert out.shape == (4, 3) and np.all(out == 0.5)


def test_mlp_identity_layer_is_passthrough(rng):
    mlp = MLP([4, 4], rng, activation="none")
    mlp.layers[0].weight.data[...] = np.eye(4)
    x = rng.normal(size=(3, 4))
    np.testing.assert_array_equal(mlp(Tensor(x)).data, x)


def test_mlp_sigmoid_output_in_open_interval(rng):
    mlp = MLP([3, 6, 2], rng, final_sigmoid=True)
    out = mlp(Tensor(rng.normal(scale=3.0, size=(50, 3)))).data
    assert np.all((out > 0) & (out < 1))


def test_mlp_gradient_three_layers(rng):
    mlp = MLP([4, 6, 5, 3], rng)
    x = Tensor(rng.normal(size=(5, 4)))
    assert grad_check(lambda: weighted_sum(mlp(x)), mlp.parameters()) < GRAD_TOL


def test_linear_dimension_mismatch(rng):
    with pytest.raises(ag.ShapeError):
        Linear(4, 2, rng)(Tensor(np.ones((3, 5))))


def test_mlp_rejects_unknown_activation(rng):
    with pytest.raises(ConfigError):
        MLP([2, 2], rng, activation="gelu")


# -- GRU ------------------------------------------------------------------


def test_bigru_single_step(rng):
    gru = BiGRU(6, 6, rng)
    out, g = bigru_forward(Tensor(rng.normal(size=(1, 6))), gru)
    assert out.shape == (1, 6) and g.shape == (1, 6)
    assert np.all(np.isfinite(out.data)) and np.all(np.isfinite(g.data))


def test_bigru_empty_sequence_rejected(rng):
    with pytest.raises(ValueError):
        BiGRU(3, 3, rng)(Tensor(np.zeros((0, 3))))


def test_bigru_all_zero_parameters_give_constant_bias_rows(rng):
    gru = BiGRU(4, 4, rng)
    zero_params(gru)
    gru.proj.bias.data[...] = [0.5, -1.0, 2.0, 0.0]
    out, g = gru(Tensor(np.zeros((5, 4))))
    np.testing.assert_array_equal(out.data, np.tile(gru.proj.bias.data, (5, 1)))
    np.testing.assert_array_equal(g.data[0], gru.proj.bias.data)


def test_gru_zero_recurrent_weights_follow_bias_recurrence(rng):
    """With no recurrent weights and zero input, h_t = c * (1 - z^t)."""
    gru = GRU(3, 3, rng)
    zero_params(gru)
    bz, br, bn = 0.4, -0.2, 0.7
    gru.w.bias.data[...] = [bz] * 3 + [br] * 3 + [bn] * 3
    states = gru(Tensor(np.zeros((4, 3))))
    z = 1.0 / (1.0 + np.exp(-bz))
    c = np.tanh(bn)
    for t, h in enumerate(states, 1):
        np.testing.assert_allclose(h.data, c * (1 - z**t), rtol=1e-14)


def test_bigru_gradient(rng):
    gru = BiGRU(6, 6, rng)
    x = ag.Param(rng.normal(size=(5, 6)), name="x")

    def loss():
        out, g = gru(x)
        return weighted_sum(out) + ag.tsum(g)

    assert grad_check(loss, gru.parameters() + [x]) < GRAD_TOL


def test_bigru_is_order_sensitive(rng):
    gru = BiGRU(4, 4, rng)
    x = rng.normal(size=(6, 4))
    _, g1 = gru(Tensor(x))
    _, g2 = gru(Tensor(x[::-1].copy()))
    assert not np.allclose(g1.data, g2.data)


# -- attention ------------------------------------------------------------


def test_mha_single_token(rng):
    mha = MultiHeadAttention(8, 4, rng)
    x = Tensor(rng.normal(size=(1, 8)))
    out = mha_forward(x, mha).data
    np.testing.assert_array_equal(mha.last_weights, np.ones((4, 1, 1)))
    np.testing.assert_allclose(out, mha.o(mha.v(x)).data, rtol=1e-14)


def test_mha_identical_rows_get_uniform_weights(rng):
    mha = MultiHeadAttention(8, 2, rng)
    row = rng.normal(size=8)
    mha(Tensor(np.tile(row, (5, 1))))
    np.testing.assert_allclose(mha.last_weights, 0.2, atol=1e-12)


def test_mha_weights_row_stochastic(rng):
    mha = MultiHeadAttention(8, 4, rng)
    mha(Tensor(rng.normal(scale=4.0, size=(3, 7, 8))))
    np.testing.assert_allclose(mha.last_weights.sum(axis=-1), 1.0, atol=1e-9)


def test_mha_masked_keys_are_ignored(rng):
    mha = MultiHeadAttention(8, 2, rng)
    x = rng.normal(size=(6, 8))
    mask = np.array([True, True, True, True, False, False])
    y = x.copy()
    y[~mask] = rng.normal(scale=100.0, size=(2, 8))
    a = mha(Tensor(x), mask).data
    assert np.all(mha.last_weights[..., ~mask] == 0.0)
    b = mha(Tensor(y), mask).data
    np.testing.assert_array_equal(a[mask], b[mask])


def test_mha_heads_must_divide_d(rng):
    with pytest.raises(ConfigError):
        MultiHeadAttention(6, 4, rng)


def test_mha_gradient(rng):
    mha = MultiHeadAttention(8, 2, rng)
    x = ag.Param(rng.normal(size=(5, 8)), name="x")
    assert grad_check(lambda: weighted_sum(mha(x)), mha.parameters() + [x]) < GRAD_TOL


def test_mac_counter_records_scores(rng):
    mha = MultiHeadAttention(8, 2, rng)
    with count_macs() as c:
        mha(Tensor(rng.normal(size=(3, 5, 8))))
    assert c.score_macs == 3 * 5 * 5 * 8 and c.context_macs == c.score_macs and c.calls == 1


def test_sandwich_block_gradient(rng):
    blk = SandwichBlock(8, 2, rng)
    x = ag.Param(rng.normal(size=(4, 8)), name="x")
    loss = lambda: weighted_sum(sandwich_block(x, blk))  # noqa: E731
    assert grad_check(loss, blk.parameters() + [x]) < GRAD_TOL


def test_sandwich_block_output_is_layer_normalised(rng):
    blk = SandwichBlock(8, 2, rng)
    y = blk(Tensor(rng.normal(size=(6, 8)))).data
    np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=-1), 1.0, atol=1e-8)


def test_layer_norm_module_constant_row_gives_bias(rng):
    ln = LayerNorm(4)
    ln.bias.data[...] = [1.0, 2.0, 3.0, 4.0]
    np.testing.assert_array_equal(ln(Tensor(np.full((2, 4), 7.0))).data[0], [1, 2, 3, 4])


# -- convolution ----------------------------------------------------------


def test_conv_width_one_identity(rng):
    conv = Conv1d(4, 4, 1, rng)
    conv.kernel.data[0] = np.eye(4)
    x = rng.normal(size=(6, 4))
    np.testing.assert_array_equal(conv1d_forward(Tensor(x), conv, 1).data, x)


@pytest.mark.parametrize("width", [1, 3, 5])
def test_conv_impulse_gives_box(width, rng):
    conv = Conv1d(1, 1, 5, rng)
    conv.kernel.data[...] = 1.0 / width
    x = np.zeros((9, 1))
    x[4] = 1.0
    out = conv(Tensor(x), width).data[:, 0]
    expected = np.zeros(9)
    expected[4 - width // 2 : 4 + width // 2 + 1] = 1.0 / width
    np.testing.assert_allclose(out, expected, atol=1e-15)


def test_conv_wider_than_sequence_is_allowed(rng):
    conv = Conv1d(2, 3, 9, rng)
    out = conv(Tensor(rng.normal(size=(2, 2))), 9)
    assert out.shape == (2, 3)


def test_conv_zero_width_is_config_error(rng):
    conv = Conv1d(2, 2, 3, rng)
    with pytest.raises(ConfigError):
        conv1d_forward(Tensor(np.ones((4, 2))), conv, 0)
    with pytest.raises(ConfigError):
        Conv1d(2, 2, 0, rng)


def test_conv_is_local(rng):
    conv = Conv1d(3, 3, 3, rng)
    x = rng.normal(size=(10, 3))
    y = x.copy()
    y[9] += 5.0
    a, b = conv(Tensor(x)).data, conv(Tensor(y)).data
    np.testing.assert_array_equal(a[:8], b[:8])
    assert not np.allclose(a[8:], b[8:])


def test_conv_gradient(rng):
    conv = Conv1d(4, 4, 3, rng)
    x = ag.Param(rng.normal(size=(6, 4)), name="x")
    assert grad_check(lambda: weighted_sum(conv(x, 3)), conv.parameters() + [x]) < GRAD_TOL


# -- dropout and embedding ------------------------------------------------


def test_dropout_fraction_within_binomial_bound():
    p, n = 0.4, 20000
    drop = Dropout(p, DropoutRNG(5)).train()
    out = drop(Tensor(np.ones(n))).data
    zeros = np.mean(out == 0)
    assert abs(zeros - p) <= 3 * np.sqrt(p * (1 - p) / n)
    np.testing.assert_allclose(out[out != 0], 1.0 / (1 - p))


def test_dropout_eval_is_identity(rng):
    drop = Dropout(0.4, DropoutRNG(0))
    drop.eval()
    x = Tensor(rng.normal(size=(10, 10)))
    assert drop(x) is x


def test_dropout_rate_validated():
    with pytest.raises(ConfigError):
        Dropout(1.0, None)


def test_embedding_lookup(rng):
    emb = Embedding(5, 4, rng)
    out = emb([2, 2, 3]).data
    np.testing.assert_array_equal(out[0], out[1])
    assert not np.allclose(out[0], out[2])
    with pytest.raises(IndexError):
        emb([5])
    with pytest.raises(IndexError):
        emb([-1])


def test_embedding_gradient_only_on_looked_up_rows(rng):
    emb = Embedding(5, 3, rng)
    ag.zero_grads(emb.parameters())
    with Tape() as tape:
        loss = weighted_sum(emb([1, 3, 1]))
    tape.backward(loss)
    assert np.all(emb.table.grad[[0, 2, 4]] == 0.0)
    assert np.any(emb.table.grad[1] != 0) and np.any(emb.table.grad[3] != 0)
    assert grad_check(lambda: weighted_sum(emb([1, 3, 1])), emb.parameters()) < GRAD_TOL
