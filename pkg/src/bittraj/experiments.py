"""Desk-scale training experiments on the synthetic trajectory suite."""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .bitlinear import QuantMode
from .config import RunConfig
from .pipeline import examples, split_windows, train_tokenizer
from .tokenizer import BpeVocab, Example
from .trainer import (
    SWEEP_LRS,
    SweepRow,
    TrainLog,
    compare_variants,
    lr_sweep,
    plateau_length,
    smooth,
    smoothed_final,
)

# Toy protocol: 2+2 blocks, d_model 64, ~200 tokens, coarse integer pixels and
# no neighbours so a run fits in about a minute on one CPU core.
TOY_SUITE = RunConfig(precision=0, max_neighbors=0, synth_scenes_per_kind=4, vocab_size=200,
                      lr=1e-3, batch_size=16, max_steps=600, mode="none")
SMOOTH_WINDOW = 50


def toy_data(cfg: RunConfig = TOY_SUITE) -> tuple[BpeVocab, list[Example]]:
    train_w, _ = split_windows(cfg)
    vocab = train_tokenizer(train_w, cfg)
    return vocab, examples(vocab, train_w, cfg)


@dataclass
class VariantRun:
    mode: QuantMode
    seed: int
    log: TrainLog
    seconds: float

    @property
    def final(self) -> float:
        return smoothed_final(self.log.losses, SMOOTH_WINDOW)

    @property
    def plateau(self) -> int:
        return plateau_length(self.log.losses)

    def trends_down(self, window: int = SMOOTH_WINDOW) -> bool:
        """Smoothed curve ends below where it starts and below its midpoint."""
        s = smooth(self.log.losses, window)
        return bool(s[-1] < s[len(s) // 2] < s[window - 1])


@dataclass
class Fig4Result:
    runs: list[VariantRun] = field(default_factory=list)
    seconds: float = 0.0

    def get(self, mode, seed) -> VariantRun:
        mode = QuantMode.parse(mode)
        return next(r for r in self.runs if r.mode == mode and r.seed == seed)

    @property
    def seeds(self) -> list[int]:
        return sorted({r.seed for r in self.runs})

    def summary(self) -> list[dict]:
        rows = []
        for seed in self.seeds:
            row = {"seed": seed}
            for m in (QuantMode.NONE, QuantMode.WEIGHT, QuantMode.ACTIV):
                r = self.get(m, seed)
                row[f"{m.value}_final"] = r.final
                row[f"{m.value}_plateau"] = r.plateau
                row[f"{m.value}_initial"] = float(r.log.losses[0])
            rows.append(row)
        return rows


def fig4_experiment(seeds: Iterable[int] = range(5), cfg: RunConfig = TOY_SUITE,
                    data: Sequence[Example] | None = None) -> Fig4Result:
    """Train None / Weight / Activ per seed with identical data and initial weights."""
    if data is None:
        _, data = toy_data(cfg)
    res = Fig4Result()
    t0 = time.perf_counter()
    for seed in seeds:
        tcfg = cfg.replace(seed=seed).train_config()
        for mode in (QuantMode.NONE, QuantMode.WEIGHT, QuantMode.ACTIV):
            t = time.perf_counter()
            logs = compare_variants(data, cfg.model_config(), tcfg, [mode], **cfg.layer_kwargs())
            res.runs.append(VariantRun(mode, seed, logs[mode], time.perf_counter() - t))
    res.seconds = time.perf_counter() - t0
    return res


def stability_sweep(seeds: Iterable[int] = range(5), lrs: Iterable[float] = SWEEP_LRS,
                    modes=(QuantMode.WEIGHT,), cfg: RunConfig = TOY_SUITE,
                    data: Sequence[Example] | None = None) -> tuple[list[SweepRow], float]:
    if data is None:
        _, data = toy_data(cfg)
    t0 = time.perf_counter()
    rows = lr_sweep(data, cfg.model_config(), cfg.train_config(), lrs, modes, list(seeds),
                    smooth_window=SMOOTH_WINDOW, **cfg.layer_kwargs())
    return rows, time.perf_counter() - t0


def format_fig4(res: Fig4Result) -> str:
    lines = ["seed  none_final weight_final activ_final  none_plat weight_plat activ_plat"]
    for r in res.summary():
        lines.append(f"{r['seed']:>4}  {r['none_final']:>10.4f} {r['weight_final']:>12.4f} "
                     f"{r['activ_final']:>11.4f}  {r['none_plateau']:>9} {r['weight_plateau']:>11} "
                     f"{r['activ_plateau']:>10}")
    return "\n".join(lines)


def fig4_checks(res: Fig4Result) -> dict[str, bool]:
    """Per-seed ordering counts (4 of 5 seeds) and the mean plateau ordering."""
    seeds = res.seeds
    w_le_none = sum(res.get("weight", s).final <= 1.25 * res.get("none", s).final for s in seeds)
    w_lt_activ = sum(res.get("weight", s).final < res.get("activ", s).final for s in seeds)
    mean_plateau = {m: float(np.mean([res.get(m, s).plateau for s in seeds])) for m in ("none", "weight", "activ")}
    return {
        "weight_le_1.25x_none_on_4of5": w_le_none >= 4,
        "weight_lt_activ_on_4of5": w_lt_activ >= 4,
        "activ_longest_plateau": mean_plateau["activ"] > max(mean_plateau["none"], mean_plateau["weight"]),
    }
