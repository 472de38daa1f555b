"""Data preparation and evaluation glue shared by the CLI and experiments."""
from __future__ import annotations

from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .config import RunConfig
from .metrics import PredictionSet, SceneResult, evaluate, fallback_prediction
from .model import SamplingConfig, Seq2SeqModel, generate
from .tokenizer import (
    TRAJ_ALPHABET,
    BpeVocab,
    DecodeFailure,
    Example,
    make_example,
    parse_trajectory,
    serialize_window,
    train_bpe,
)
from .trajdata import (
    SceneTable,
    TrajectoryWindow,
    leave_one_out_split,
    load_scene,
    make_windows,
    project_homography,
    synth_scene,
)

HOMOGRAPHY_SUFFIX = "_H.txt"


def load_scenes(cfg: RunConfig) -> dict[str, list[SceneTable]]:
    """Scene name -> tables. Reads ``data_dir`` or builds the synthetic suite."""
    if not cfg.data_dir:
        kinds = [k.strip() for k in cfg.synth_kinds.split(",") if k.strip()]
        return {k: [synth_scene(k, cfg.synth_agents, cfg.synth_noise, cfg.data_seed + 1000 * j + i,
                                n_frames=cfg.synth_frames, name=f"{k}_{i}")
                    for i in range(cfg.synth_scenes_per_kind)]
                for j, k in enumerate(kinds)}
    root = Path(cfg.data_dir)
    if not root.is_dir():
        raise FileNotFoundError(f"data directory {root} does not exist")
    out = {}
    for path in sorted(root.glob("*.txt")):
        if path.name.endswith(HOMOGRAPHY_SUFFIX):
            continue
        h = path.with_name(path.stem + HOMOGRAPHY_SUFFIX)
        out[path.stem] = [load_scene(path, h if h.exists() else None)]
    if not out:
        raise FileNotFoundError(f"no scene files in {root}")
    return out


def scene_windows(tables: Sequence[SceneTable], cfg: RunConfig) -> list[TrajectoryWindow]:
    out = []
    for t in tables:
        out += make_windows(t, cfg.obs_len, cfg.fut_len, cfg.stride, cfg.max_neighbors)
    return out


def split_windows(cfg: RunConfig, scenes: dict[str, list[SceneTable]] | None = None):
    """``(train_windows, {scene: test_windows})`` for the configured split.

    Without a held-out scene, every scene is used for training and evaluation.
    """
    scenes = load_scenes(cfg) if scenes is None else scenes
    if cfg.scene:
        train_names, test_name = leave_one_out_split(list(scenes), cfg.scene)
        test = {test_name: scene_windows(scenes[test_name], cfg)}
    else:
        train_names = list(scenes)
        test = {n: scene_windows(scenes[n], cfg) for n in scenes}
    train = [w for n in train_names for w in scene_windows(scenes[n], cfg)]
    return train, test


def corpus(windows: Sequence[TrajectoryWindow], cfg: RunConfig) -> list[str]:
    texts = []
    for w in windows:
        tt = serialize_window(w, cfg.precision, cfg.max_neighbors)
        texts += [tt.prompt, tt.answer]
    return texts


def train_tokenizer(windows: Sequence[TrajectoryWindow], cfg: RunConfig) -> BpeVocab:
    return train_bpe(corpus(windows, cfg), cfg.vocab_size, TRAJ_ALPHABET)


def examples(vocab: BpeVocab, windows: Sequence[TrajectoryWindow], cfg: RunConfig) -> list[Example]:
    return [make_example(vocab, w, cfg.precision, cfg.max_neighbors) for w in windows]


def to_world(points: np.ndarray, window: TrajectoryWindow) -> np.ndarray:
    return points if window.homography is None else project_homography(points, window.homography)


def prediction_set(texts: Sequence[str], window: TrajectoryWindow) -> PredictionSet:
    """Parse sampled answers; undecodable ones become constant-position forecasts."""
    horizon = len(window.fut)
    samples, failures = [], 0
    for text in texts:
        try:
            samples.append(parse_trajectory(text, horizon))
        except DecodeFailure:
            failures += 1
            samples.append(fallback_prediction(window.obs, horizon))
    world = np.stack([to_world(s, window) for s in samples])
    return PredictionSet(world, to_world(window.fut, window), failures)


TextSampler = Callable[[Sequence[TrajectoryWindow]], list[list[str]]]


def model_sampler(model: Seq2SeqModel, vocab: BpeVocab, cfg: RunConfig, batch: int = 16) -> TextSampler:
    """K answer texts per window from stochastic decoding."""
    def run(windows):
        out = []
        sampling = cfg.sampling_config()
        for start in range(0, len(windows), batch):
            chunk = windows[start:start + batch]
            ex = examples(vocab, chunk, cfg)
            width = max(len(e.src) for e in ex)
            src = np.zeros((len(ex), width), dtype=np.int64)
            for i, e in enumerate(ex):
                src[i, : len(e.src)] = e.src
            sc = SamplingConfig(sampling.temperature, sampling.max_new_tokens, sampling.seed + start)
            ids = generate(model, src, sc, n_samples=cfg.n_samples)
            for i in range(len(chunk)):
                out.append([vocab.decode(t) for t in ids[i * cfg.n_samples:(i + 1) * cfg.n_samples]])
        return out
    return run


def evaluate_scenes(sampler: TextSampler, test: dict[str, list[TrajectoryWindow]], variant: str,
                    max_windows: int = 0) -> list[SceneResult]:
    results = []
    for scene, windows in test.items():
        if max_windows:
            windows = windows[:max_windows]
        if not windows:
            continue
        texts = sampler(windows)
        preds = [prediction_set(t, w) for t, w in zip(texts, windows)]
        results.append(evaluate(preds, scene, variant))
    return results
