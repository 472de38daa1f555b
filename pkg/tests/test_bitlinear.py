import numpy as np
import pytest

from bittraj import autodiff as ad
from bittraj.autodiff import Tensor
from bittraj.bitlinear import (
    BitLinear,
    QuantMode,
    count_replacement_sites,
    frozen_quantization,
    replace_linear_with_quantization,
    set_quant_mode,
)
from bittraj.model import ModelConfig, Seq2SeqModel, build_model
from bittraj.nn import Linear, Module
from bittraj.model import EncoderBlock

import oracles


def make_layer(rng, in_f, out_f, mode, bias=True, **kw):
    layer = BitLinear(in_f, out_f, bias=bias, mode=mode, **kw)
    layer.weight = Tensor(rng.normal(size=(out_f, in_f)), requires_grad=True, dtype=np.float64)
    if bias:
        layer.bias = Tensor(rng.normal(size=out_f), requires_grad=True, dtype=np.float64)
    return layer


@pytest.mark.parametrize("mode", ["none", "both", "activ", "weight"])
def test_forward_matches_scalar_oracle(mode, rng, kernel_path):
    layer = make_layer(rng, 9, 4, mode)
    x = rng.normal(size=(3, 9))
    y = layer(Tensor(x, dtype=np.float64)).data
    w = layer.weight.data.tolist()
    b = layer.bias.data.tolist()
    for row, yr in zip(x, y):
        np.testing.assert_allclose(yr, oracles.bitlinear_row(row.tolist(), w, b, mode), rtol=1e-9, atol=1e-9)


def test_weight_mode_applies_no_layer_norm(rng):
    layer = make_layer(rng, 5, 3, "weight", bias=False)
    x = rng.normal(5.0, 3.0, size=(2, 5))
    codes, beta = layer.ternary_codes()
    np.testing.assert_allclose(layer(Tensor(x, dtype=np.float64)).data, x @ codes.T / beta, rtol=1e-12)


def test_sign_matrix_weight_mode_is_plain_product(rng):
    layer = make_layer(rng, 6, 5, "weight", bias=False, eps=1e-12)
    s = rng.choice([-1.0, 1.0], size=(5, 6))
    layer.weight = Tensor(s, requires_grad=True, dtype=np.float64)
    x = rng.normal(size=(4, 6))
    np.testing.assert_allclose(layer(Tensor(x, dtype=np.float64)).data, x @ s.T, rtol=1e-10)


@pytest.mark.parametrize("mode", ["weight", "both"])
def test_weight_rescale_keeps_codes_and_scales_output(mode, rng):
    layer = make_layer(rng, 8, 6, mode, bias=False, eps=0.0)
    x = Tensor(rng.normal(size=(3, 8)), dtype=np.float64)
    codes, _ = layer.ternary_codes()
    y = layer(x).data
    for c in (0.05, 7.0):
        scaled = make_layer(rng, 8, 6, mode, bias=False, eps=0.0)
        scaled.weight = Tensor(c * layer.weight.data, dtype=np.float64)
        np.testing.assert_array_equal(scaled.ternary_codes()[0], codes)
        np.testing.assert_allclose(scaled(x).data, c * y, rtol=1e-9)


def test_bias_policies_at_zero_input(rng):
    lit = make_layer(rng, 4, 3, "weight", bias_policy="literal")
    post = BitLinear.from_linear(lit, "weight", bias_policy="post_dequant")
    zero = Tensor(np.zeros((1, 4)), dtype=np.float64)
    _, beta = lit.ternary_codes()
    np.testing.assert_allclose(lit(zero).data[0], lit.bias.data / beta, rtol=1e-12)
    np.testing.assert_allclose(post(zero).data[0], lit.bias.data, rtol=1e-12)


def test_gradients_reach_weights_and_inputs(rng):
    for mode in ("both", "activ", "weight"):
        layer = make_layer(rng, 6, 4, mode)
        x = Tensor(rng.normal(size=(2, 6)), requires_grad=True, dtype=np.float64)
        ad.sum_all(ad.mul(layer(x), Tensor(rng.normal(size=(2, 4))))).backward()
        assert np.any(layer.weight.grad != 0)
        assert np.any(x.grad != 0)
        assert layer.bias.grad is not None


def test_weight_gradient_is_straight_through(rng):
    # with every code in range, dL/dW equals dL/dWq
    layer = make_layer(rng, 5, 3, "weight", bias=False)
    x = rng.normal(size=(2, 5))
    up = rng.normal(size=(2, 3))
    layer(Tensor(x, dtype=np.float64)).backward(up)
    _, beta = layer.ternary_codes()
    in_range = np.abs(np.round(beta * layer.weight.data)) <= 1
    np.testing.assert_allclose(layer.weight.grad, np.where(in_range, up.T @ x, 0.0), rtol=1e-12)


def test_frozen_matches_unfrozen(rng):
    layer = make_layer(rng, 7, 5, "both")
    x = Tensor(rng.normal(size=(2, 7)), dtype=np.float64)
    y = layer(x).data
    with frozen_quantization(layer):
        np.testing.assert_allclose(layer(x).data, y, rtol=1e-12)
    assert layer._frozen is None


# -- replacement ---------------------------------------------------------------

class Holder(Module):
    def __init__(self):
        super().__init__()
        self.a = Linear(3, 4)
        self.b = Linear(4, 2)


def test_replace_is_idempotent_and_shares_parameters():
    h = Holder()
    w = h.a.weight
    replace_linear_with_quantization(h, "weight")
    assert isinstance(h.a, BitLinear) and h.a.weight is w
    first = h.a
    replace_linear_with_quantization(h, "activ")
    assert h.a is first and h.a.mode == QuantMode.WEIGHT


def test_replace_bare_linear_returns_bitlinear():
    lin = Linear(3, 2)
    out = replace_linear_with_quantization(lin, "both")
    assert isinstance(out, BitLinear) and out.weight is lin.weight


def test_tied_head_stays_tied():
    m = build_model(ModelConfig.toy(vocab_size=30), "weight")
    assert m.lm_head.weight is m.shared.weight


def test_census_t5_small_shape():
    m = Seq2SeqModel(ModelConfig(6, 6, 16, 32, 2, vocab_size=20))
    assert tuple(count_replacement_sites(m)) == (36, 60, 1, 97)
    replace_linear_with_quantization(m, "both")
    assert tuple(count_replacement_sites(m)) == (36, 60, 1, 97)


def test_census_encoder_only_fragment():
    class Frag(Module):
        def __init__(self):
            super().__init__()
            self.encoder = EncoderBlock(ModelConfig(1, 0, 8, 16, 2, vocab_size=10), np.random.default_rng(0), 0.02)

    assert tuple(count_replacement_sites(Frag())) == (6, 0, 0, 6)


def test_set_quant_mode_switches_forward(rng):
    layer = make_layer(rng, 4, 3, "none", bias=False)
    x = Tensor(rng.normal(size=(1, 4)), dtype=np.float64)
    plain = layer(x).data
    set_quant_mode(layer, "weight")
    codes, beta = layer.ternary_codes()
    np.testing.assert_allclose(layer(x).data, x.data @ codes.T / beta)
    set_quant_mode(layer, "none")
    np.testing.assert_allclose(layer(x).data, plain)


def test_unknown_mode_rejected():
    with pytest.raises(ValueError):
        QuantMode.parse("int4")
    assert QuantMode.parse("Activation") == QuantMode.ACTIV
