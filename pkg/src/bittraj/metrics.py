"""Best-of-K displacement metrics and result tables."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

RESULT_COLUMNS = ("scene", "variant", "ADE", "FDE", "failure_rate", "samples")


@dataclass
class PredictionSet:
    """K sampled trajectories ``[K, T, 2]`` against a ground truth ``[T, 2]``."""
    samples: np.ndarray
    gt: np.ndarray
    failures: int = 0

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        self.gt = np.asarray(self.gt, dtype=np.float64)
        if self.samples.ndim == 2:
            self.samples = self.samples[None]
        if self.gt.ndim != 2 or self.gt.shape[1] != 2:
            raise ValueError(f"ground truth must be [T, 2], got {self.gt.shape}")
        if self.samples.ndim != 3 or self.samples.shape[1:] != self.gt.shape:
            raise ValueError(f"samples {self.samples.shape} do not match ground truth {self.gt.shape}")
        if self.samples.shape[0] < 1:
            raise ValueError("need at least one sample")

    @property
    def k(self) -> int:
        return self.samples.shape[0]

    def errors(self) -> np.ndarray:
        """Euclidean error per sample and step, ``[K, T]``."""
        return np.linalg.norm(self.samples - self.gt[None], axis=-1)


def ade_per_sample(pred: PredictionSet) -> np.ndarray:
    return pred.errors().mean(axis=1)


def fde_per_sample(pred: PredictionSet) -> np.ndarray:
    return pred.errors()[:, -1]


def min_ade(pred: PredictionSet) -> float:
    return float(ade_per_sample(pred).min())


def min_fde(pred: PredictionSet) -> float:
    return float(fde_per_sample(pred).min())


def fallback_prediction(obs: np.ndarray, horizon: int) -> np.ndarray:
    """Constant-position forecast used to score an undecodable sample."""
    return np.repeat(np.asarray(obs, dtype=np.float64)[-1:], horizon, axis=0)


@dataclass
class SceneResult:
    scene: str
    variant: str
    ade: float
    fde: float
    failure_rate: float = 0.0
    samples: int = 20


def evaluate(preds: Sequence[PredictionSet], scene: str, variant: str) -> SceneResult:
    """Mean minADE/minFDE over windows; failure rate over all drawn samples."""
    if not preds:
        raise ValueError("no predictions to evaluate")
    ade = float(np.mean([min_ade(p) for p in preds]))
    fde = float(np.mean([min_fde(p) for p in preds]))
    drawn = sum(p.k for p in preds)
    fails = sum(p.failures for p in preds)
    return SceneResult(scene, variant, ade, fde, fails / drawn, preds[0].k)


@dataclass
class ReportRow:
    scene: str
    ade: float
    fde: float
    delta_ade: float | None = None
    delta_fde: float | None = None


def aggregate(scene_results: Mapping[str, tuple[float, float]],
              baseline: Mapping[str, tuple[float, float]] | None = None) -> list[ReportRow]:
    """Per-scene rows plus an ``AVG`` row; deltas are method minus baseline.

    Args:
        scene_results: scene name -> (ADE, FDE) for the method.
        baseline: same keys for the reference method, or None.
    """
    if not scene_results:
        raise ValueError("no scene results")
    if baseline is not None and set(baseline) != set(scene_results):
        raise ValueError("baseline scenes differ from method scenes")
    rows = []
    for scene, (a, f) in scene_results.items():
        row = ReportRow(scene, float(a), float(f))
        if baseline is not None:
            ba, bf = baseline[scene]
            row.delta_ade, row.delta_fde = float(a) - ba, float(f) - bf
        rows.append(row)
    avg = ReportRow("AVG", float(np.mean([r.ade for r in rows])), float(np.mean([r.fde for r in rows])))
    if baseline is not None:
        avg.delta_ade = avg.ade - float(np.mean([b[0] for b in baseline.values()]))
        avg.delta_fde = avg.fde - float(np.mean([b[1] for b in baseline.values()]))
    rows.append(avg)
    return rows


def write_results_csv(results: Iterable[SceneResult], path, precision: int = 4) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(RESULT_COLUMNS)
        for r in results:
            w.writerow([r.scene, r.variant, f"{r.ade:.{precision}f}", f"{r.fde:.{precision}f}",
                        f"{r.failure_rate:.{precision}f}", r.samples])


def write_report_csv(rows: Sequence[ReportRow], path, precision: int = 4) -> None:
    """Scene table with optional delta columns (blank when no baseline)."""
    def fmt(v):
        return "" if v is None else f"{v:.{precision}f}"
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("scene", "ADE", "FDE", "dADE", "dFDE"))
        for r in rows:
            w.writerow([r.scene, fmt(r.ade), fmt(r.fde), fmt(r.delta_ade), fmt(r.delta_fde)])
