import math

import numpy as np
import pytest

from bittraj import autodiff as ad
from bittraj.model import (
    ModelConfig,
    SamplingConfig,
    SequenceTooLong,
    build_model,
    draw_tokens,
    generate,
    temperature_probs,
)

CFG = ModelConfig(2, 2, 32, 64, 4, vocab_size=40, max_seq_len=24)


@pytest.fixture(params=["none", "both", "weight", "activ"])
def model(request):
    return build_model(CFG, request.param, seed=3)


def test_logits_shape_and_initial_loss_is_finite(model):
    src = np.array([[5, 6, 7, 1], [8, 9, 1, 0]])
    tgt_in = np.array([[0, 4, 5], [0, 6, 0]])
    logits = model(src, tgt_in)
    assert logits.shape == (2, 3, 40)
    loss = model.loss(src, tgt_in, np.array([[4, 5, 1], [6, 1, 0]]))
    assert math.isfinite(float(loss.data))


def test_incremental_decode_matches_full_pass(model):
    src = np.array([[5, 6, 7, 8, 1], [9, 10, 1, 0, 0]])
    tgt = np.array([[0, 3, 4, 5, 6], [0, 7, 8, 9, 10]])
    with ad.no_grad():
        memory = model.encode(src)
        full = model.decode(tgt, memory, src).data
        state = model.start_state(memory, src)
        steps = [model.decode_step(state, tgt[:, i]).data for i in range(tgt.shape[1])]
    np.testing.assert_allclose(np.stack(steps, axis=1), full, atol=1e-4, rtol=1e-4)


def test_generate_cache_equals_no_cache(model):
    src = np.array([[5, 6, 7, 1]])
    s = SamplingConfig(temperature=0.0, max_new_tokens=8)
    assert generate(model, src, s, use_cache=True) == generate(model, src, s, use_cache=False)


def test_padding_does_not_change_encoding():
    m = build_model(CFG, "none", seed=1)
    with ad.no_grad():
        a = m.decode(np.array([[0, 3]]), m.encode(np.array([[5, 6, 1]])), np.array([[5, 6, 1]])).data
        src = np.array([[5, 6, 1, 0, 0]])
        b = m.decode(np.array([[0, 3]]), m.encode(src), src).data
    np.testing.assert_allclose(a, b, atol=1e-5)


def test_sampling_seeded_and_budgeted():
    m = build_model(CFG, "none", seed=0)
    src = np.array([[5, 6, 7, 1]])
    s = SamplingConfig(temperature=0.7, max_new_tokens=6, seed=11)
    a = generate(m, src, s, n_samples=3)
    assert a == generate(m, src, s, n_samples=3)
    assert len(a) == 3 and all(len(x) <= 6 for x in a)
    assert all(1 not in x for x in a)


def test_too_long_and_bad_ids():
    m = build_model(CFG, "none")
    with pytest.raises(SequenceTooLong):
        m.encode(np.ones((1, 25), dtype=int))
    with pytest.raises(IndexError):
        m.encode(np.array([[40]]))


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(d_model=30, n_heads=4)
    with pytest.raises(ValueError):
        SamplingConfig(temperature=-1)
    assert ModelConfig.t5_small().d_model == 512


def test_temperature_probs_oracle():
    z = np.array([1.0, 2.0, 0.5])
    t = 0.7
    e = [math.exp(v / t) for v in z]
    np.testing.assert_allclose(temperature_probs(z, t), [v / sum(e) for v in e], rtol=1e-12)
    np.testing.assert_array_equal(temperature_probs(z, 0.0), [0, 1, 0])


def test_draw_tokens_frequencies():
    logits = np.log(np.array([[0.2, 0.5, 0.3]]))
    rng = np.random.default_rng(0)
    draws = np.array([draw_tokens(logits, 1.0, rng)[0] for _ in range(20000)])
    freq = np.bincount(draws, minlength=3) / len(draws)
    np.testing.assert_allclose(freq, [0.2, 0.5, 0.3], atol=0.015)
    assert draw_tokens(logits, 0.0, rng)[0] == 1
