"""Quantization-aware training loop, variant comparison and lr sweeps."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .bitlinear import QuantMode
from .model import ModelConfig, Seq2SeqModel, build_model
from .nn import LayerNorm, Module
from .tokenizer import Example, collate

LOG_COLUMNS = ("step", "epoch", "loss", "grad_norm", "lr")


class TrainingDiverged(RuntimeError):
    """Raised on a non-finite loss or gradient; carries a diagnostic snapshot."""

    def __init__(self, step: int, lr: float, layer: str | None, loss: float):
        self.step, self.lr, self.layer, self.loss = step, lr, layer, loss
        where = f", first non-finite tensor in {layer}" if layer else ""
        super().__init__(f"non-finite training state at step {step} (lr={lr:.3g}, loss={loss}){where}")


@dataclass
class TrainConfig:
    lr: float = 1e-4
    epochs: int = 8
    batch_size: int = 128
    grad_clip_norm: float = 1.0
    seed: int = 0
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    max_steps: int | None = None   # overrides epochs when set

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError("lr must be >= 0")
        if not self.grad_clip_norm > 0:
            raise ValueError("grad_clip_norm must be > 0")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        if self.max_steps is not None and self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")

    @classmethod
    def preset(cls, name: str, **overrides) -> TrainConfig:
        sizes = {"bs128": 128, "bs256": 256}
        if name not in sizes:
            raise ValueError(f"unknown preset {name!r}")
        return cls(batch_size=sizes[name], **overrides)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainLog:
    steps: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)

    def append(self, step: int, epoch: int, loss: float, grad_norm: float, lr: float) -> None:
        if self.steps and step <= self.steps[-1]["step"]:
            raise ValueError("step index must increase")
        self.steps.append({"step": step, "epoch": epoch, "loss": loss, "grad_norm": grad_norm, "lr": lr})

    @property
    def losses(self) -> np.ndarray:
        return np.array([r["loss"] for r in self.steps], dtype=np.float64)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for r in self.steps:
            w.writerow([r["step"], r["epoch"], repr(float(r["loss"])), repr(float(r["grad_norm"])),
                        repr(float(r["lr"]))])
        return buf.getvalue()

    def save(self, path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> TrainLog:
        log = cls()
        with open(path, newline="", encoding="utf-8") as f:
            for row in csv.DictReader(f):
                log.append(int(row["step"]), int(row["epoch"]), float(row["loss"]),
                           float(row["grad_norm"]), float(row["lr"]))
        return log


# ---------------------------------------------------------------------------
# optimisation pieces
# ---------------------------------------------------------------------------

def linear_decay(base_lr: float, step: int, total_steps: int) -> float:
    """lr for 0-based ``step`` under linear decay to 0 without warmup."""
    return base_lr * max(total_steps - step, 0) / total_steps


def global_grad_norm(params: Iterable[Tensor]) -> float:
    sq = 0.0
    for p in params:
        if p.grad is not None:
            sq += float(np.sum(np.square(p.grad, dtype=np.float64)))
    return math.sqrt(sq)


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Scale gradients in place so their global norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    norm = global_grad_norm(params)
    if norm > max_norm:
        factor = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= factor
    return norm


def no_decay_ids(model: Module) -> set[int]:
    """Parameters exempt from weight decay: norm gains and biases."""
    out = set()
    for _, m in model.named_modules():
        if isinstance(m, LayerNorm):
            out.add(id(m.weight))
        b = getattr(m, "bias", None)
        if isinstance(b, Tensor):
            out.add(id(b))
    return out


class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(self, named_params: Sequence[tuple[str, Tensor]], weight_decay: float = 0.01,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 no_decay: set[int] | None = None):
        self.params = [p for _, p in named_params]
        self.names = [n for n, _ in named_params]
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        no_decay = no_decay or set()
        self.decay = [id(p) not in no_decay for p in self.params]
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v, decay in zip(self.params, self.m, self.v, self.decay):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            if decay and self.weight_decay:
                p.data -= (lr * self.weight_decay) * p.data
            p.data -= (lr / c1) * m / (np.sqrt(v / c2) + self.eps)


def first_nonfinite(model: Module) -> str | None:
    for name, p in model.named_parameters():
        if not np.all(np.isfinite(p.data)) or (p.grad is not None and not np.all(np.isfinite(p.grad))):
            return name
    return None


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def batches_per_epoch(n: int, batch_size: int) -> int:
    return max(1, math.ceil(n / batch_size))


def total_steps(n_examples: int, cfg: TrainConfig) -> int:
    return cfg.max_steps or cfg.epochs * batches_per_epoch(n_examples, cfg.batch_size)


def train(model: Seq2SeqModel, data: Sequence[Example], cfg: TrainConfig,
          on_epoch: Callable[[int, Seq2SeqModel], dict] | None = None,
          stop_on_divergence: float | None = None) -> tuple[Seq2SeqModel, TrainLog]:
    """Teacher-forced cross-entropy training with AdamW, clipping and linear decay.

    Args:
        model: model to train in place.
        data: tokenized examples; loss covers answer tokens only.
        cfg: optimisation settings. Data order is reshuffled every epoch from
            ``cfg.seed``.
        on_epoch: optional callback returning per-epoch metrics for the log.
        stop_on_divergence: if set, stop early once a step loss exceeds this
            multiple of the first step's loss.

    Raises:
        TrainingDiverged: on a non-finite loss or gradient.
    """
    if not data:
        raise ValueError("no training examples")
    rng = np.random.default_rng(cfg.seed)
    params = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    opt = AdamW(params, cfg.weight_decay, cfg.beta1, cfg.beta2, cfg.adam_eps, no_decay_ids(model))
    plist = [p for _, p in params]
    n_total = total_steps(len(data), cfg)
    log = TrainLog()
    step, epoch = 0, 0
    while step < n_total:
        order = rng.permutation(len(data))
        for start in range(0, len(order), cfg.batch_size):
            if step >= n_total:
                break
            batch = [data[i] for i in order[start:start + cfg.batch_size]]
            src, tgt_in, tgt_out = collate(batch)
            lr = linear_decay(cfg.lr, step, n_total)
            model.zero_grad()
            loss = model.loss(src, tgt_in, tgt_out)
            lval = float(loss.data)
            if not math.isfinite(lval):
                raise TrainingDiverged(step, lr, first_nonfinite(model), lval)
            loss.backward()
            gnorm = clip_grad_norm(plist, cfg.grad_clip_norm)
            if not math.isfinite(gnorm):
                raise TrainingDiverged(step, lr, first_nonfinite(model), lval)
            opt.step(lr)
            log.append(step, epoch, lval, gnorm, lr)
            step += 1
            if stop_on_divergence and lval > stop_on_divergence * log.steps[0]["loss"]:
                return model, log
        if on_epoch is not None:
            log.epochs.append({"epoch": epoch, **on_epoch(epoch, model)})
        epoch += 1
    return model, log


# ---------------------------------------------------------------------------
# curve analysis
# ---------------------------------------------------------------------------

def smooth(losses, window: int = 50) -> np.ndarray:
    """Trailing moving average (shorter window at the start)."""
    x = np.asarray(losses, dtype=np.float64)
    if len(x) == 0:
        return x
    c = np.concatenate([[0.0], np.cumsum(x)])
    idx = np.arange(1, len(x) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def smoothed_final(losses, window: int = 50) -> float:
    x = np.asarray(losses, dtype=np.float64)
    return float(np.mean(x[-window:]))


def plateau_length(losses, frac: float = 0.5, window: int = 10) -> int:
    """Steps until the smoothed loss first drops below ``frac`` x the initial loss.

    Returns ``len(losses)`` if it never does.
    """
    s = smooth(losses, window)
    if len(s) == 0:
        return 0
    below = np.nonzero(s < frac * float(losses[0]))[0]
    return int(below[0]) if len(below) else len(s)


def is_diverged(losses, factor: float = 10.0) -> bool:
    x = np.asarray(losses, dtype=np.float64)
    if len(x) == 0:
        return False
    return bool(not np.all(np.isfinite(x)) or np.any(x > factor * x[0]))


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------

def compare_variants(data: Sequence[Example], model_cfg: ModelConfig, cfg: TrainConfig,
                     modes: Iterable[QuantMode | str] = (QuantMode.NONE, QuantMode.WEIGHT, QuantMode.ACTIV),
                     model_seed: int | None = None, **layer_kwargs) -> dict[QuantMode, TrainLog]:
    """Train one model per mode from identical initial weights and data order."""
    out = {}
    seed = cfg.seed if model_seed is None else model_seed
    for mode in modes:
        mode = QuantMode.parse(mode)
        model = build_model(model_cfg, mode, seed=seed, **layer_kwargs)
        _, log = train(model, data, cfg)
        out[mode] = log
    return out


@dataclass
class SweepRow:
    mode: str
    lr: float
    seed: int
    diverged: bool
    final_loss: float
    reason: str = ""

    def as_dict(self) -> dict:
        return asdict(self)


SWEEP_COLUMNS = ("mode", "lr", "seed", "diverged", "final_loss", "reason")
SWEEP_LRS = (1e-4, 2e-4, 4e-4)


def lr_sweep(data: Sequence[Example], model_cfg: ModelConfig, cfg: TrainConfig,
             lrs: Iterable[float] = SWEEP_LRS, modes: Iterable[QuantMode | str] = (QuantMode.WEIGHT,),
             seeds: Iterable[int] = (0,), divergence_factor: float = 10.0,
             smooth_window: int = 50, **layer_kwargs) -> list[SweepRow]:
    """One training run per (mode, lr, seed); flags NaN or loss > factor x initial."""
    rows = []
    for mode in modes:
        mode = QuantMode.parse(mode)
        for lr in lrs:
            for seed in seeds:
                run_cfg = TrainConfig(**{**cfg.to_dict(), "lr": lr, "seed": seed})
                model = build_model(model_cfg, mode, seed=seed, **layer_kwargs)
                try:
                    _, log = train(model, data, run_cfg, stop_on_divergence=divergence_factor)
                except TrainingDiverged as exc:
                    rows.append(SweepRow(mode.value, lr, seed, True, float("nan"), str(exc)))
                    continue
                div = is_diverged(log.losses, divergence_factor)
                rows.append(SweepRow(mode.value, lr, seed, div, smoothed_final(log.losses, smooth_window),
                                     "loss exceeded divergence factor" if div else ""))
    return rows


def write_sweep_csv(rows: Sequence[SweepRow], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for r in rows:
            w.writerow([r.mode, repr(r.lr), r.seed, int(r.diverged), repr(r.final_loss), r.reason])
