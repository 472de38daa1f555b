import json
import time

import numpy as np
import pytest

from bittraj import autodiff as ad
from bittraj.bitlinear import frozen_quantization
from bittraj.deploy import (
    BENCH_FIELDS,
    PackedLinear,
    bench,
    export_model,
    memory_report,
    pack,
    packed_from_bitlinear,
    summarize,
)
from bittraj.bitlinear import BitLinear
from bittraj.autodiff import Tensor
from bittraj.model import ModelConfig, SamplingConfig, build_model

CFG = ModelConfig(1, 1, 32, 64, 4, vocab_size=50, max_seq_len=32)
SRC = np.array([[5, 6, 7, 8, 1], [9, 10, 11, 1, 0]])
TGT = np.array([[0, 3, 4, 5], [0, 6, 7, 8]])


def frozen_logits(model):
    with ad.no_grad(), frozen_quantization(model):
        return model(SRC, TGT).data


@pytest.mark.parametrize("encoding", ["two_bit", "base243"])
def test_weight_export_matches_frozen_model(encoding, kernel_path):
    m = build_model(CFG, "weight", seed=2)
    dep = export_model(m, encoding)
    assert len(dep.packed_layers()) == 6 + 10 + 1
    assert np.max(np.abs(dep.forward(SRC, TGT) - frozen_logits(m))) <= 1e-4


def test_both_export_close_to_frozen_model():
    # INT8 rounding can flip near ties, so only a loose bound here
    m = build_model(CFG, "both", seed=2)
    diff = np.abs(export_model(m).forward(SRC, TGT) - frozen_logits(m))
    assert np.median(diff) <= 1e-4 and np.max(diff) <= 5e-2


def test_none_and_activ_export_pack_nothing():
    for mode in ("none", "activ"):
        m = build_model(CFG, mode, seed=2)
        dep = export_model(m)
        assert dep.packed_layers() == []
        np.testing.assert_allclose(dep.forward(SRC, TGT), frozen_logits(m), atol=1e-6)


def test_export_leaves_source_model_untouched():
    m = build_model(CFG, "weight", seed=2)
    before = frozen_logits(m)
    export_model(m)
    np.testing.assert_array_equal(frozen_logits(m), before)


def test_packed_linear_literal_bias_with_activation_quant(rng):
    layer = BitLinear(8, 3, bias=True, mode="both")
    layer.bias = Tensor(rng.normal(size=3).astype(np.float32), requires_grad=True)
    x = rng.normal(size=(4, 8)).astype(np.float32)
    with ad.no_grad():
        ref = layer(Tensor(x)).data
    got = packed_from_bitlinear(layer)(x).data
    np.testing.assert_allclose(got, ref, atol=1e-4)


def test_memory_ratio_per_packed_tensor():
    dep = export_model(build_model(CFG, "weight"))
    rep = memory_report(dep)
    packed = [t for t in rep.tensors if t.kind == "packed"]
    assert packed
    for t in packed:
        if t.numel >= 1024:
            assert 2 * t.numel / t.nbytes >= 7.0, t


def test_memory_ratio_grows_with_width():
    ratios = []
    for d_ff in (64, 256, 1024):
        cfg = ModelConfig(1, 1, 32, d_ff, 4, vocab_size=50)
        m = build_model(cfg, "weight")
        ratios.append(memory_report(m).total / memory_report(export_model(m)).total)
    assert ratios[0] < ratios[1] < ratios[2]


def test_memory_counts_tied_weight_once():
    m = build_model(CFG, "none")
    names = [t.name for t in memory_report(m).tensors]
    assert "shared.weight" in names and "lm_head.weight" not in names


def test_summarize_consistency():
    r = summarize([0.1, 0.3, 0.2], batch=2, bytes_total=100)
    assert r.repeats == 3 and r.total_s == pytest.approx(0.6)
    assert r.seq_per_s == pytest.approx(6 / 0.6)
    assert r.mean_ms == pytest.approx(100.0)
    assert r.p50_ms == pytest.approx(100.0)
    with pytest.raises(ValueError):
        summarize([], 1, 0)


def test_bench_single_repeat_json():
    dep = export_model(build_model(CFG, "weight"))
    r = bench(dep, SRC[:1], repeats=1, warmup=0, max_new_tokens=4)
    d = json.loads(r.to_json())
    assert set(BENCH_FIELDS) <= set(d)
    assert d["repeats"] == 1
    assert d["seq_per_s"] == pytest.approx(d["repeats"] / d["total_s"])
    with pytest.raises(ValueError):
        bench(dep, SRC[:1], repeats=0)


def test_packed_not_slower_than_unpack_per_call(rng):
    codes = rng.integers(-1, 2, size=(512, 512))
    fast = PackedLinear(pack(codes, scale=0.1))
    slow = PackedLinear(pack(codes, scale=0.1), naive=True)
    x = rng.normal(size=(4, 512)).astype(np.float32)
    np.testing.assert_allclose(fast(x).data, slow(x).data, atol=1e-4)

    def best(layer):
        times = []
        for _ in range(5):
            t0 = time.perf_counter()
            layer(x)
            times.append(time.perf_counter() - t0)
        return min(times)

    best(fast)
    assert best(fast) <= 1.5 * best(slow)
