"""ETH/UCY-style scene tables, windowing, homography projection and a
synthetic scene generator."""
from __future__ import annotations

import warnings
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

OBS_LEN = 8
FUT_LEN = 12


class SceneFormatError(ValueError):
    pass


class ProjectionError(ValueError):
    pass


@dataclass
class SceneTable:
    """Rows of ``(frame_id, ped_id, x, y)`` sorted by frame then pedestrian."""
    frames: np.ndarray
    peds: np.ndarray
    xy: np.ndarray
    name: str = ""
    homography: np.ndarray | None = None

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.int64).reshape(-1)
        self.peds = np.asarray(self.peds, dtype=np.int64).reshape(-1)
        self.xy = np.asarray(self.xy, dtype=np.float64).reshape(-1, 2)
        if not (len(self.frames) == len(self.peds) == len(self.xy)):
            raise SceneFormatError("frames, peds and xy must have the same length")
        if len(self.frames):
            order = np.lexsort((self.peds, self.frames))
            self.frames, self.peds, self.xy = self.frames[order], self.peds[order], self.xy[order]
            key = np.stack([self.frames, self.peds], axis=1)
            dup = np.all(key[1:] == key[:-1], axis=1)
            if dup.any():
                i = int(np.argmax(dup))
                raise SceneFormatError(
                    f"duplicate (frame, ped) pair ({self.frames[i]}, {self.peds[i]}) in scene {self.name!r}")

    def __len__(self) -> int:
        return len(self.frames)

    def track(self, ped_id: int) -> tuple[np.ndarray, np.ndarray]:
        sel = self.peds == ped_id
        return self.frames[sel], self.xy[sel]

    def ped_ids(self) -> np.ndarray:
        return np.unique(self.peds)

    def frame_step(self) -> int:
        """Modal frame gap between consecutive observations of the same pedestrian."""
        gaps = []
        for p in self.ped_ids():
            f, _ = self.track(p)
            gaps.extend(np.diff(f).tolist())
        gaps = [g for g in gaps if g > 0]
        if not gaps:
            return 1
        counts = Counter(gaps)
        best = max(counts.values())
        return min(g for g, c in counts.items() if c == best)


@dataclass
class TrajectoryWindow:
    obs: np.ndarray                  # [obs_len, 2]
    fut: np.ndarray                  # [fut_len, 2]
    ped_id: int
    scene: str
    frames: np.ndarray               # [obs_len + fut_len]
    neighbors: list[tuple[int, np.ndarray]] = field(default_factory=list)
    homography: np.ndarray | None = None


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

def _as_int(tok: str, lineno: int, what: str) -> int:
    try:
        v = float(tok)
    except ValueError:
        raise SceneFormatError(f"line {lineno}: {what} {tok!r} is not a number") from None
    if not np.isfinite(v) or v != int(v):
        raise SceneFormatError(f"line {lineno}: {what} {tok!r} is not an integer")
    return int(v)


def parse_scene(text: str, name: str = "") -> SceneTable:
    frames, peds, xy = [], [], []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        cols = line.split()
        if len(cols) != 4:
            raise SceneFormatError(f"line {lineno}: expected 4 columns (frame_id ped_id x y), got {len(cols)}")
        frames.append(_as_int(cols[0], lineno, "frame_id"))
        peds.append(_as_int(cols[1], lineno, "ped_id"))
        try:
            x, y = float(cols[2]), float(cols[3])
        except ValueError:
            raise SceneFormatError(f"line {lineno}: non-numeric coordinate") from None
        if not (np.isfinite(x) and np.isfinite(y)):
            raise SceneFormatError(f"line {lineno}: non-finite coordinate")
        xy.append((x, y))
    return SceneTable(np.array(frames, dtype=np.int64), np.array(peds, dtype=np.int64),
                      np.array(xy, dtype=np.float64).reshape(-1, 2), name)


def load_scene(path, homography_path=None, name: str | None = None) -> SceneTable:
    """Read a whitespace-separated ``frame_id ped_id x y`` file."""
    path = Path(path)
    table = parse_scene(path.read_text(encoding="utf-8"), name or path.stem)
    if homography_path is not None:
        table.homography = load_homography(homography_path)
    return table


def save_scene(table: SceneTable, path) -> None:
    lines = [f"{f}\t{p}\t{x:.6f}\t{y:.6f}" for f, p, (x, y) in zip(table.frames, table.peds, table.xy)]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def load_homography(path) -> np.ndarray:
    rows = [ln.split() for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]
    if len(rows) != 3 or any(len(r) != 3 for r in rows):
        raise SceneFormatError(f"{path}: homography must be 3 lines of 3 floats")
    return np.array(rows, dtype=np.float64)


def save_homography(h: np.ndarray, path) -> None:
    Path(path).write_text("\n".join(" ".join(f"{v:.10g}" for v in row) for row in h) + "\n",
                          encoding="utf-8")


# ---------------------------------------------------------------------------
# windows and projection
# ---------------------------------------------------------------------------

def make_windows(table: SceneTable, obs_len: int = OBS_LEN, fut_len: int = FUT_LEN, stride: int = 1,
                 max_neighbors: int = 4, frame_step: int | None = None) -> list[TrajectoryWindow]:
    """Sliding windows over every contiguous run of each pedestrian's track.

    Neighbours are other pedestrians observed at all ``obs_len`` frames of the
    window, closest first at the last observed frame.
    """
    if obs_len < 1 or fut_len < 1 or stride < 1:
        raise ValueError("obs_len, fut_len and stride must be >= 1")
    step = frame_step or table.frame_step()
    total = obs_len + fut_len
    index = {(int(f), int(p)): i for i, (f, p) in enumerate(zip(table.frames, table.peds))}
    by_frame: dict[int, list[int]] = {}
    for f, p in zip(table.frames, table.peds):
        by_frame.setdefault(int(f), []).append(int(p))

    windows = []
    for ped in table.ped_ids():
        frames, xy = table.track(ped)
        run_start = 0
        for i in range(1, len(frames) + 1):
            if i < len(frames) and frames[i] - frames[i - 1] == step:
                continue
            for s in range(run_start, i - total + 1, stride):
                wf = frames[s:s + total]
                obs, fut = xy[s:s + obs_len], xy[s + obs_len:s + total]
                nbrs = []
                last = int(wf[obs_len - 1])
                for q in by_frame.get(last, []):
                    if q == ped:
                        continue
                    rows = [index.get((int(f), q)) for f in wf[:obs_len]]
                    if any(r is None for r in rows):
                        continue
                    nbrs.append((q, table.xy[rows]))
                nbrs.sort(key=lambda n: (float(np.linalg.norm(n[1][-1] - obs[-1])), n[0]))
                windows.append(TrajectoryWindow(obs.copy(), fut.copy(), int(ped), table.name,
                                                wf.copy(), nbrs[:max_neighbors], table.homography))
            run_start = i
    return windows


def project_homography(points, h) -> np.ndarray:
    """Map ``[..., 2]`` points through the 3x3 projective transform ``h``."""
    pts = np.asarray(points, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    if h.shape != (3, 3):
        raise ProjectionError(f"homography must be 3x3, got {h.shape}")
    flat = pts.reshape(-1, 2)
    hom = np.concatenate([flat, np.ones((len(flat), 1))], axis=1) @ h.T
    w = hom[:, 2:3]
    if np.any(np.abs(w) < 1e-12):
        raise ProjectionError("point maps to infinity (w' ~ 0)")
    return (hom[:, :2] / w).reshape(pts.shape)


def leave_one_out_split(scenes: Sequence[str] | Mapping[str, object], held_out: str):
    """Return ``(train, test)``: every scene but ``held_out``, and ``held_out``.

    For a mapping the result holds ``(name, value)`` pairs, otherwise names.
    """
    names = list(scenes)
    if held_out not in names:
        raise KeyError(f"unknown scene {held_out!r}; available: {', '.join(names)}")
    train = [n for n in names if n != held_out]
    if not train:
        warnings.warn("leave-one-out split has an empty training set", stacklevel=2)
    if isinstance(scenes, Mapping):
        return [(n, scenes[n]) for n in train], (held_out, scenes[held_out])
    return train, held_out


# ---------------------------------------------------------------------------
# synthetic scenes
# ---------------------------------------------------------------------------

SYNTH_KINDS = ("line", "turn", "crossing")
SYNTH_HOMOGRAPHY = np.diag([0.1, 0.1, 1.0])   # 10 px per metre


def arc_points(center, radius: float, phase: float, omega: float, n: int) -> np.ndarray:
    t = np.arange(n)
    ang = phase + omega * t
    return np.stack([center[0] + radius * np.cos(ang), center[1] + radius * np.sin(ang)], axis=1)


def synth_scene(kind: str, n_agents: int = 8, noise_sigma: float = 0.0, seed: int = 0,
                n_frames: int = 24, frame_step: int = 10, extent: float = 100.0,
                name: str | None = None) -> SceneTable:
    """Deterministic synthetic pedestrians in pixel space.

    ``line`` walks at constant velocity, ``turn`` follows constant-curvature
    arcs, ``crossing`` sends two groups across the scene centre at right
    angles. Tracks start at staggered frames so agents overlap in time.
    """
    if kind not in SYNTH_KINDS:
        raise ValueError(f"unknown synthetic scene kind {kind!r}")
    if n_frames < OBS_LEN + FUT_LEN:
        raise ValueError("n_frames must cover one observation + prediction window")
    rng = np.random.default_rng(seed)
    frames, peds, pts = [], [], []
    for a in range(n_agents):
        start = int(rng.integers(0, 6)) * frame_step
        if kind == "line":
            p0 = rng.uniform(0.2 * extent, 0.8 * extent, 2)
            heading = rng.uniform(0, 2 * np.pi)
            speed = rng.uniform(0.8, 2.0)
            track = p0 + np.outer(np.arange(n_frames), speed * np.array([np.cos(heading), np.sin(heading)]))
        elif kind == "turn":
            radius = rng.uniform(0.15, 0.35) * extent
            center = rng.uniform(0.35 * extent, 0.65 * extent, 2)
            phase = rng.uniform(0, 2 * np.pi)
            omega = rng.choice([-1.0, 1.0]) * rng.uniform(1.0, 2.0) / radius
            track = arc_points(center, radius, phase, omega, n_frames)
        else:
            speed = rng.uniform(1.0, 2.0)
            lane = rng.uniform(-0.1, 0.1) * extent
            mid = extent / 2
            if a % 2 == 0:
                p0 = np.array([mid - speed * n_frames / 2, mid + lane])
                v = np.array([speed, 0.0])
            else:
                p0 = np.array([mid + lane, mid - speed * n_frames / 2])
                v = np.array([0.0, speed])
            track = p0 + np.outer(np.arange(n_frames), v)
        if noise_sigma > 0:
            track = track + rng.normal(0, noise_sigma, track.shape)
        frames.extend(start + frame_step * np.arange(n_frames))
        peds.extend([a] * n_frames)
        pts.append(track)
    xy = np.concatenate(pts) if pts else np.zeros((0, 2))
    return SceneTable(np.array(frames, dtype=np.int64), np.array(peds, dtype=np.int64), xy,
                      name or f"synth_{kind}_{seed}", SYNTH_HOMOGRAPHY.copy())
