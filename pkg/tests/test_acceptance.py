"""Acceptance criteria, one test per criterion.

Each test records a one-line verdict through ``acceptance_report``; the lines
are printed together at the end of the pytest run. Criteria 7 and 8 train
15 toy models each and dominate the runtime.
"""
import json
import time

import numpy as np
import pytest

from bittraj import autodiff as ad
from bittraj import cli
from bittraj.autodiff import Tensor, gradcheck
from bittraj.bitlinear import BitLinear, count_replacement_sites, frozen_quantization, ste_quantize
from bittraj.checkpoint import load_export, load_model
from bittraj.deploy import export_model, memory_report, pack, packed_matvec, reference_matvec, unpack
from bittraj.deploy.export import SCALE_BYTES
from bittraj.experiments import fig4_checks, fig4_experiment, format_fig4, stability_sweep
from bittraj.metrics import PredictionSet, aggregate, min_ade, min_fde
from bittraj.model import ModelConfig, Seq2SeqModel
from bittraj.quant import (
    INT8,
    TERNARY,
    absmax_scale,
    absmean_scale,
    quantize_activations_int8,
    quantize_weights_ternary,
    round_clamp,
)

import oracles

EPS = 1e-5


def _random_tensor(rng):
    shape = (int(rng.integers(1, 5)), int(rng.integers(1, 9)))
    kind = rng.integers(4)
    if kind == 0:  # exact halves exercise the tie rule
        return rng.integers(-600, 600, size=shape) / 2.0
    if kind == 1:
        return rng.normal(size=shape) * 10.0 ** rng.uniform(-3, 3)
    if kind == 2:
        return rng.standard_t(2, size=shape) * 50.0
    return np.where(rng.random(shape) < 0.3, 0.0, rng.normal(size=shape))


def test_criterion_1_quantizer_oracle_suite(acceptance_report):
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    code_dev = scale_dev = 0.0
    for _ in range(10_000):
        x = _random_tensor(rng)
        rows, flat = x.tolist(), x.ravel().tolist()

        got = round_clamp(x * 3.7, INT8)
        exp = [[oracles.round_clamp(v * 3.7, -128, 127) for v in r] for r in rows]
        code_dev = max(code_dev, float(np.max(np.abs(got - exp))))

        gamma = absmax_scale(x, INT8, EPS)
        exp_gamma = [oracles.absmax_gamma(r, EPS) for r in rows]
        scale_dev = max(scale_dev, float(np.max(np.abs(gamma[:, 0] - exp_gamma) / np.abs(exp_gamma))))
        beta = absmean_scale(x, EPS)
        exp_beta = oracles.absmean_beta(flat, EPS)
        scale_dev = max(scale_dev, abs(beta - exp_beta) / exp_beta)

        q, _ = quantize_activations_int8(x, EPS)
        exp_q = [[oracles.round_clamp(g * v, -128, 127) for v in r] for r, g in zip(rows, exp_gamma)]
        code_dev = max(code_dev, float(np.max(np.abs(q - exp_q))))

        t, _ = quantize_weights_ternary(x, EPS)
        exp_t = [[oracles.round_clamp(exp_beta * v, -1, 1) for v in r] for r in rows]
        code_dev = max(code_dev, float(np.max(np.abs(t - exp_t))))
    seconds = time.perf_counter() - t0
    ok = code_dev == 0 and scale_dev <= 1e-6 and seconds < 10
    acceptance_report(1, ok, f"10000 tensors, code dev {code_dev:g}, scale rel dev {scale_dev:.2e}, "
                             f"{seconds:.1f}s")
    assert code_dev == 0
    assert scale_dev <= 1e-6
    assert seconds < 10


def test_criterion_2_bitlinear_equivalence(acceptance_report):
    rng = np.random.default_rng(2)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(300):
        in_f, out_f = (int(v) for v in rng.integers(1, 9, size=2))
        if in_f == 1:
            in_f = 2  # LayerNorm of one feature is identically zero
        w = rng.normal(size=(out_f, in_f))
        b = rng.normal(size=out_f)
        x = rng.normal(size=(3, in_f)) * rng.uniform(0.1, 5)
        for mode in ("both", "activ", "weight"):
            layer = BitLinear(in_f, out_f, mode=mode)
            layer.weight = Tensor(w, requires_grad=True, dtype=np.float64)
            layer.bias = Tensor(b, requires_grad=True, dtype=np.float64)
            y = layer(Tensor(x, dtype=np.float64)).data
            exp = np.array([oracles.bitlinear_row(r, w.tolist(), b.tolist(), mode) for r in x.tolist()])
            worst = max(worst, float(np.max(np.abs(y - exp) / np.maximum(1.0, np.abs(exp)))))

    # W = c * S with S a sign matrix: Weight mode equals the full-precision layer
    sign_worst = 0.0
    for _ in range(200):
        in_f, out_f = (int(v) for v in rng.integers(1, 9, size=2))
        s = rng.choice([-1.0, 1.0], size=(out_f, in_f))
        c = float(10 ** rng.uniform(-2, 2))
        q = BitLinear(in_f, out_f, bias=False, mode="weight", eps=0.0)
        q.weight = Tensor(c * s, dtype=np.float64)
        full = BitLinear(in_f, out_f, bias=False, mode="none")
        full.weight = q.weight
        x = Tensor(rng.normal(size=(4, in_f)), dtype=np.float64)
        a, ref = q(x).data, full(x).data
        sign_worst = max(sign_worst, float(np.max(np.abs(a - ref) / np.maximum(1.0, np.abs(ref)))))
    seconds = time.perf_counter() - t0
    ok = worst <= 1e-5 and sign_worst <= 1e-6 and seconds < 10
    acceptance_report(2, ok, f"forward dev {worst:.1e}, sign identity dev {sign_worst:.1e}, {seconds:.1f}s")
    assert worst <= 1e-5
    assert sign_worst <= 1e-6
    assert seconds < 10


def _param(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True, dtype=np.float64)


def _grad_cases(r):
    ids = np.array([[0, 2, 2], [5, 1, 0]])
    targets = np.array([[1, 0, 3], [2, 2, 0]])
    return {
        "add": ((_param(r, 2, 3), _param(r, 3)), ad.add),
        "sub": ((_param(r, 2, 3), _param(r, 2, 3)), ad.sub),
        "mul": ((_param(r, 2, 3), _param(r, 1, 3)), ad.mul),
        "scale": ((_param(r, 4),), lambda a: ad.scale(a, -2.5)),
        "matmul": ((_param(r, 3, 4), _param(r, 4, 2)), ad.matmul),
        "batched_matmul": ((_param(r, 2, 3, 4), _param(r, 2, 4, 5)), ad.matmul),
        "transpose": ((_param(r, 2, 3, 4),), lambda a: ad.transpose(a, (0, 2, 1))),
        "reshape": ((_param(r, 2, 6),), lambda a: ad.reshape(a, (3, 4))),
        "concat": ((_param(r, 2, 3), _param(r, 2, 2)), lambda a, b: ad.concat([a, b], axis=1)),
        "softmax": ((_param(r, 3, 5),), ad.softmax),
        "gelu": ((_param(r, 3, 4),), ad.gelu),
        "layer_norm": ((_param(r, 3, 6),), lambda a: ad.layer_norm(a, 1e-5)),
        "sum": ((_param(r, 3, 4),), ad.sum_all),
        "mean": ((_param(r, 3, 4),), ad.mean_all),
        "embedding": ((_param(r, 6, 4),), lambda t: ad.embedding_lookup(t, ids)),
        "cross_entropy": ((_param(r, 2, 3, 6),), lambda a: ad.cross_entropy(a, targets, ignore_index=0)),
    }


def test_criterion_3_gradients(acceptance_report):
    rng = np.random.default_rng(3)
    t0 = time.perf_counter()
    worst, failed = 0.0, []
    for name, (inputs, fn) in _grad_cases(rng).items():
        out = fn(*inputs)
        w = Tensor(rng.normal(size=out.shape), dtype=np.float64)

        def f():
            return ad.sum_all(ad.mul(fn(*inputs), w))

        try:
            worst = max(worst, gradcheck(f, inputs, h=1e-3, rtol=1e-3))
        except AssertionError:
            failed.append(name)

    # clipped straight-through: backward is exactly the clamp-range mask
    ste_exact = True
    for qrange, spread in ((INT8, 150.0), (TERNARY, 1.5)):
        for _ in range(50):
            x = Tensor(rng.normal(0, spread, size=(5, 7)), requires_grad=True, dtype=np.float64)
            scale = float(rng.uniform(0.5, 2.0))
            up = rng.normal(size=(5, 7))
            ste_quantize(x, scale, qrange).backward(up)
            mask = [[qrange.lo <= oracles.round_half_away(scale * v) <= qrange.hi for v in row]
                    for row in x.data.tolist()]
            ste_exact &= bool(np.array_equal(x.grad, np.where(mask, up, 0.0)))
    seconds = time.perf_counter() - t0
    ok = not failed and ste_exact and seconds < 60
    acceptance_report(3, ok, f"{len(_grad_cases(rng))} ops, worst rel err {worst:.1e}, failed {failed}, "
                             f"STE mask exact {ste_exact}, {seconds:.1f}s")
    assert not failed
    assert ste_exact
    assert seconds < 60


def test_criterion_4_census(acceptance_report):
    # T5-small block layout (6 + 6 blocks) at a reduced width
    cfg = ModelConfig(6, 6, 16, 32, 2, vocab_size=20)
    census = tuple(count_replacement_sites(Seq2SeqModel(cfg)))
    ok = census == (36, 60, 1, 97)
    acceptance_report(4, ok, f"census {census}")
    assert census == (36, 60, 1, 97)


def test_criterion_5_packing(acceptance_report):
    rng = np.random.default_rng(5)
    t0 = time.perf_counter()
    round_trip = True
    matvec_dev = 0.0
    for _ in range(1000):
        rows, cols = (int(v) for v in rng.integers(1, 40, size=2))
        t = rng.integers(-1, 2, size=(rows, cols)).astype(np.int8)
        x = rng.normal(size=cols)
        b = rng.normal(size=rows)
        for enc in ("two_bit", "base243"):
            p = pack(t, enc, scale=float(rng.uniform(0.5, 3)))
            round_trip &= bool(np.array_equal(unpack(p), t))
            got, ref = packed_matvec(p, x, b), reference_matvec(p, x, b)
            matvec_dev = max(matvec_dev, float(np.max(np.abs(got - ref) / np.maximum(1.0, np.abs(ref)))))

    # storage of linear weights with at least 1024 entries and 32 inputs per row
    worst_ratio = np.inf
    shapes = [(int(r), int(c)) for r, c in zip(rng.integers(1, 256, 200), rng.integers(32, 1024, 200))]
    for rows, cols in [(32, 32), (64, 256), (256, 64), (512, 2048)] + shapes:
        if rows * cols < 1024:
            continue
        t = rng.integers(-1, 2, size=(rows, cols)).astype(np.int8)
        for enc in ("two_bit", "base243"):
            worst_ratio = min(worst_ratio, 2 * rows * cols / (pack(t, enc).nbytes + SCALE_BYTES))
    seconds = time.perf_counter() - t0
    ok = round_trip and matvec_dev <= 1e-5 and worst_ratio >= 7 and seconds < 60
    acceptance_report(5, ok, f"round trip {round_trip}, matvec dev {matvec_dev:.1e}, "
                             f"min 16-bit/packed ratio {worst_ratio:.2f}, {seconds:.1f}s")
    assert round_trip
    assert matvec_dev <= 1e-5
    assert worst_ratio >= 7
    assert seconds < 60


def test_criterion_6_metrics(acceptance_report):
    rng = np.random.default_rng(6)
    exact = True
    for _ in range(1000):
        k, t = int(rng.integers(1, 21)), int(rng.integers(1, 13))
        samples = rng.normal(size=(k, t, 2)) * 5
        gt = rng.normal(size=(t, 2)) * 5
        p = PredictionSet(samples, gt)
        s, g = samples.tolist(), gt.tolist()
        exact &= min_ade(p) == pytest.approx(oracles.min_over_samples(s, g, False), rel=1e-12, abs=0)
        exact &= min_fde(p) == pytest.approx(oracles.min_over_samples(s, g, True), rel=1e-12, abs=0)
    scenes = ("eth", "hotel", "univ", "zara1", "zara2")
    row = dict(zip(scenes, [(0.46, 0.62), (0.17, 0.27), (0.42, 0.80), (0.23, 0.40), (0.22, 0.39)]))
    avg = aggregate(row)[-1]
    row_ok = round(avg.ade, 2) == 0.30
    acceptance_report(6, exact and row_ok, f"1000 sets exact {exact}, published row mean ADE {avg.ade:.3f}")
    assert exact
    assert row_ok


@pytest.fixture(scope="session")
def fig4():
    return fig4_experiment(seeds=range(5))


@pytest.mark.slow
def test_criterion_7_training_ordering(fig4, acceptance_report):
    checks = fig4_checks(fig4)
    within_budget = fig4.seconds <= 15 * 60
    ok = all(checks.values()) and within_budget
    means = {m: np.mean([fig4.get(m, s).final for s in fig4.seeds]) for m in ("none", "weight", "activ")}
    plateaus = {m: np.mean([fig4.get(m, s).plateau for s in fig4.seeds]) for m in ("none", "weight", "activ")}
    detail = ", ".join(f"{k}={v}" for k, v in checks.items())
    acceptance_report(7, ok, f"{detail}; mean final {', '.join(f'{k} {v:.3f}' for k, v in means.items())}; "
                             f"mean plateau {', '.join(f'{k} {v:.0f}' for k, v in plateaus.items())}; "
                             f"{fig4.seconds / 60:.1f} min")
    print(format_fig4(fig4))
    assert within_budget
    assert checks["weight_le_1.25x_none_on_4of5"]
    assert checks["weight_lt_activ_on_4of5"]
    assert checks["activ_longest_plateau"]


@pytest.mark.slow
def test_criterion_8_stability_sweep(acceptance_report):
    rows, seconds = stability_sweep(seeds=range(5), lrs=(1e-4, 2e-4, 4e-4))
    diverged = [(r.lr, r.seed) for r in rows if r.diverged]
    ok = len(rows) == 15 and not diverged and seconds < 45 * 60
    acceptance_report(8, ok, f"{len(rows)} weight runs, diverged {diverged}, {seconds / 60:.1f} min")
    assert len(rows) == 15
    assert not diverged
    assert seconds < 45 * 60


PIPELINE_CFG = """\
synth_scenes_per_kind = 1
synth_agents = 3
precision = 0
max_neighbors = 0
vocab_size = 80
n_encoder_blocks = 1
n_decoder_blocks = 1
d_model = 32
d_ff = 64
n_heads = 4
max_seq_len = 128
batch_size = 8
max_steps = 20
mode = weight
repeats = 3
warmup = 1
"""


def test_criterion_9_end_to_end(tmp_path, acceptance_report):
    cfg_file = tmp_path / "run.cfg"
    cfg_file.write_text(PIPELINE_CFG)
    out = tmp_path / "run"
    common = ["--config", str(cfg_file), "--out", str(out)]
    codes = [
        cli.main(["tokenizer-train", *common]),
        cli.main(["train", *common, "--vocab", str(out / "vocab.txt")]),
        cli.main(["export", *common, "--checkpoint", str(out / "model.ckpt")]),
        cli.main(["bench", *common, "--export", str(out / "model.export"), "--vocab", str(out / "vocab.txt")]),
    ]

    model, _ = load_model(out / "model.ckpt")
    deploy, _ = load_export(out / "model.export")
    rng = np.random.default_rng(9)
    src = rng.integers(3, 80, size=(2, 30))
    tgt = rng.integers(3, 80, size=(2, 12))
    with frozen_quantization(model):
        qat = model(src, tgt).data
    logit_dev = float(np.max(np.abs(deploy.forward(src, tgt) - qat)))

    b = json.loads((out / "bench.json").read_text())
    fields = {"mean_ms", "p50_ms", "p95_ms", "seq_per_s", "bytes_total", "repeats", "total_s"}
    consistent = (fields <= set(b) and b["repeats"] == 3
                  and b["seq_per_s"] == pytest.approx(b["repeats"] * b["batch"] / b["total_s"], rel=1e-9)
                  and b["bytes_total"] == memory_report(deploy).total)
    ok = codes == [0, 0, 0, 0] and logit_dev <= 1e-4 and consistent
    acceptance_report(9, ok, f"exit codes {codes}, export vs frozen QAT logits {logit_dev:.1e}, "
                             f"bench JSON consistent {consistent}")
    assert codes == [0, 0, 0, 0]
    assert logit_dev <= 1e-4
    assert consistent
