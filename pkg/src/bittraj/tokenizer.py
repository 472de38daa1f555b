"""Text serialization of trajectory windows and a small BPE tokenizer.

Serialization grammar (template version 1)::

    prompt  := question "|" agent ("|" agent)*
    question:= "?" ped_index ":" horizon
    agent   := index ":" points
    answer  := points
    points  := point (";" point)*
    point   := number "," number

Numbers are fixed-point decimals (``precision`` digits). Agent 0 is the
pedestrian to forecast, neighbours follow closest first.
"""
from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .trajdata import TrajectoryWindow

TEMPLATE_VERSION = 1
TRAJ_ALPHABET = "0123456789-.,;:|?"
SEPARATORS = frozenset(",;:|?")
PAD, EOS, UNK = "<pad>", "<eos>", "<unk>"
SPECIALS = (PAD, EOS, UNK)
PAD_ID, EOS_ID, UNK_ID = 0, 1, 2

_NUMBER = re.compile(r"-?\d+(?:\.\d+)?")


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

@dataclass
class TrajText:
    question: str
    context: str
    answer: str = ""

    @property
    def prompt(self) -> str:
        return f"{self.question}|{self.context}"


def format_number(v: float, precision: int) -> str:
    s = f"{v:.{precision}f}"
    if float(s) == 0.0:
        s = f"{0.0:.{precision}f}"
    return s


def format_points(points, precision: int = 2) -> str:
    return ";".join(f"{format_number(x, precision)},{format_number(y, precision)}" for x, y in points)


def serialize_window(window: TrajectoryWindow, precision: int = 2, max_neighbors: int | None = None) -> TrajText:
    nbrs = window.neighbors if max_neighbors is None else window.neighbors[:max_neighbors]
    agents = [f"0:{format_points(window.obs, precision)}"]
    agents += [f"{k}:{format_points(obs, precision)}" for k, (_, obs) in enumerate(nbrs, start=1)]
    return TrajText(f"?0:{len(window.fut)}", "|".join(agents), format_points(window.fut, precision))


class DecodeFailure(ValueError):
    """Generated answer text that does not parse into a trajectory."""

    TRUNCATED_PAIR = "truncated pair"
    NON_NUMERIC = "non-numeric token"
    LENGTH_OVERFLOW = "length overflow"
    TOO_FEW_POINTS = "too few points"

    def __init__(self, reason: str, detail: str = ""):
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason


def parse_answer(text, max_points: int = 64, max_chars: int = 4096) -> list[tuple[float, float]]:
    """Parse ``x,y;x,y;...`` into points.

    Raises :class:`DecodeFailure` (and nothing else) on malformed input,
    including bytes that are not UTF-8.
    """
    if isinstance(text, (bytes, bytearray)):
        try:
            text = bytes(text).decode("utf-8")
        except UnicodeDecodeError:
            raise DecodeFailure(DecodeFailure.NON_NUMERIC, "invalid utf-8") from None
    if not isinstance(text, str):
        raise DecodeFailure(DecodeFailure.NON_NUMERIC, f"unsupported type {type(text).__name__}")
    if len(text) > max_chars:
        raise DecodeFailure(DecodeFailure.LENGTH_OVERFLOW, f"{len(text)} characters")
    if text == "":
        return []
    parts = text.split(";")
    if len(parts) > max_points:
        raise DecodeFailure(DecodeFailure.LENGTH_OVERFLOW, f"{len(parts)} points")
    points = []
    for i, part in enumerate(parts):
        xy = part.split(",")
        if len(xy) != 2 or not xy[0] or not xy[1]:
            if len(xy) > 2:
                raise DecodeFailure(DecodeFailure.NON_NUMERIC, f"point {i}: {part[:32]!r}")
            raise DecodeFailure(DecodeFailure.TRUNCATED_PAIR, f"point {i}: {part[:32]!r}")
        if not (_NUMBER.fullmatch(xy[0]) and _NUMBER.fullmatch(xy[1])):
            raise DecodeFailure(DecodeFailure.NON_NUMERIC, f"point {i}: {part[:32]!r}")
        points.append((float(xy[0]), float(xy[1])))
    return points


def parse_trajectory(text, horizon: int, max_points: int | None = None) -> np.ndarray:
    """Parse an answer and keep its first ``horizon`` points."""
    pts = parse_answer(text, max_points=max_points or 4 * horizon)
    if len(pts) < horizon:
        raise DecodeFailure(DecodeFailure.TOO_FEW_POINTS, f"{len(pts)} < {horizon}")
    return np.array(pts[:horizon], dtype=np.float64)


# ---------------------------------------------------------------------------
# BPE
# ---------------------------------------------------------------------------

@dataclass
class BpeVocab:
    alphabet: str
    merges: list[tuple[str, str]] = field(default_factory=list)
    template_version: int = TEMPLATE_VERSION

    def __post_init__(self):
        if len(set(self.alphabet)) != len(self.alphabet):
            raise ValueError("alphabet has repeated symbols")
        if any(c.isspace() for c in self.alphabet):
            raise ValueError("alphabet may not contain whitespace")
        self.tokens: list[str] = list(SPECIALS) + list(self.alphabet)
        for a, b in self.merges:
            self.tokens.append(a + b)
        self.token_to_id = {}
        for i, t in enumerate(self.tokens):
            self.token_to_id.setdefault(t, i)
        self.ranks = {pair: r for r, pair in enumerate(self.merges)}
        self._cache: dict[str, tuple[str, ...]] = {}

    @property
    def size(self) -> int:
        return len(self.tokens)

    def __len__(self) -> int:
        return len(self.tokens)

    pad_id, eos_id, unk_id = PAD_ID, EOS_ID, UNK_ID

    # -- application ------------------------------------------------------
    def segment(self, chunk: str) -> tuple[str, ...]:
        """Apply merges (lowest rank first) to a chunk of in-alphabet symbols."""
        hit = self._cache.get(chunk)
        if hit is not None:
            return hit
        parts = list(chunk)
        while len(parts) > 1:
            best, best_rank = None, None
            for pair in zip(parts, parts[1:]):
                r = self.ranks.get(pair)
                if r is not None and (best_rank is None or r < best_rank):
                    best, best_rank = pair, r
            if best is None:
                break
            parts = _merge_word(parts, best)
        out = tuple(parts)
        if len(self._cache) < 200_000:
            self._cache[chunk] = out
        return out

    def encode(self, text: str) -> list[int]:
        ids: list[int] = []
        for chunk in _pretokenize(text, self.alphabet):
            if chunk is None:
                ids.append(UNK_ID)
            else:
                ids.extend(self.token_to_id[t] for t in self.segment(chunk))
        return ids

    def decode(self, ids: Iterable[int]) -> str:
        out = []
        for i in ids:
            i = int(i)
            if i in (PAD_ID, EOS_ID):
                continue
            if i == UNK_ID or not 0 <= i < len(self.tokens):
                out.append("�")
            else:
                out.append(self.tokens[i])
        return "".join(out)

    # -- file format --------------------------------------------------------
    def save(self, path) -> None:
        lines = [
            "#bpe-vocab v1",
            f"#template {self.template_version}",
            f"#specials pad={PAD_ID} eos={EOS_ID} unk={UNK_ID}",
            f"#alphabet {self.alphabet}",
        ]
        lines += [f"{a} {b}" for a, b in self.merges]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> BpeVocab:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if not lines or lines[0] != "#bpe-vocab v1":
            raise ValueError(f"{path}: not a bpe vocab file")
        header, merges = {}, []
        for n, line in enumerate(lines[1:], start=2):
            if line.startswith("#"):
                key, _, val = line[1:].partition(" ")
                header[key] = val
            elif line:
                parts = line.split(" ")
                if len(parts) != 2 or not parts[0] or not parts[1]:
                    raise ValueError(f"{path}: line {n}: malformed merge {line!r}")
                merges.append((parts[0], parts[1]))
        if header.get("specials") != f"pad={PAD_ID} eos={EOS_ID} unk={UNK_ID}":
            raise ValueError(f"{path}: unsupported special ids {header.get('specials')!r}")
        return cls(header.get("alphabet", ""), merges, int(header.get("template", TEMPLATE_VERSION)))


def _merge_word(parts: Sequence[str], pair: tuple[str, str]) -> list[str]:
    a, b = pair
    out, i = [], 0
    while i < len(parts):
        if i + 1 < len(parts) and parts[i] == a and parts[i + 1] == b:
            out.append(a + b)
            i += 2
        else:
            out.append(parts[i])
            i += 1
    return out


def _pretokenize(text: str, alphabet: str):
    """Yield merge-able chunks: separator symbols alone, other runs together.

    ``None`` stands for a symbol outside the alphabet.
    """
    allowed = set(alphabet)
    run: list[str] = []
    for ch in text:
        if ch not in allowed:
            if run:
                yield "".join(run)
                run = []
            yield None
        elif ch in SEPARATORS:
            if run:
                yield "".join(run)
                run = []
            yield ch
        else:
            run.append(ch)
    if run:
        yield "".join(run)


def train_bpe_with_segmentation(corpus: Iterable[str], vocab_size: int, alphabet: str | None = None):
    """Train merges and also return the training-time segmentation of every chunk."""
    corpus = list(corpus)
    if not corpus or not any(corpus):
        raise ValueError("cannot train a tokenizer on an empty corpus")
    if alphabet is None:
        alphabet = "".join(sorted({c for text in corpus for c in text}))
    base = len(SPECIALS) + len(alphabet)
    if vocab_size < base:
        raise ValueError(f"vocab_size {vocab_size} is smaller than the base vocabulary ({base})")

    counts = Counter(c for text in corpus for c in _pretokenize(text, alphabet) if c is not None)
    words = {w: list(w) for w in counts}
    merges: list[tuple[str, str]] = []
    while base + len(merges) < vocab_size:
        pairs: Counter = Counter()
        for w, parts in words.items():
            f = counts[w]
            for pair in zip(parts, parts[1:]):
                pairs[pair] += f
        if not pairs:
            break
        top = max(pairs.values())
        if top < 2:
            break
        best = min(p for p, c in pairs.items() if c == top)
        merges.append(best)
        for w, parts in words.items():
            if len(parts) > 1:
                words[w] = _merge_word(parts, best)
    vocab = BpeVocab(alphabet, merges)
    return vocab, {w: tuple(p) for w, p in words.items()}


def train_bpe(corpus: Iterable[str], vocab_size: int, alphabet: str | None = None) -> BpeVocab:
    """Greedy most-frequent-pair BPE; ties go to the lexicographically smallest pair."""
    return train_bpe_with_segmentation(corpus, vocab_size, alphabet)[0]


def encode(vocab: BpeVocab, text: str) -> list[int]:
    return vocab.encode(text)


def decode(vocab: BpeVocab, ids: Iterable[int]) -> str:
    return vocab.decode(ids)


# ---------------------------------------------------------------------------
# model inputs
# ---------------------------------------------------------------------------

@dataclass
class Example:
    src: list[int]
    tgt: list[int]        # answer tokens followed by EOS
    window: TrajectoryWindow | None = None
    text: TrajText | None = None


def make_example(vocab: BpeVocab, window: TrajectoryWindow, precision: int = 2,
                 max_neighbors: int | None = None) -> Example:
    tt = serialize_window(window, precision, max_neighbors)
    return Example(vocab.encode(tt.prompt) + [EOS_ID], vocab.encode(tt.answer) + [EOS_ID], window, tt)


def pad_batch(seqs: Sequence[Sequence[int]], pad_id: int = PAD_ID) -> np.ndarray:
    n = max((len(s) for s in seqs), default=0)
    out = np.full((len(seqs), n), pad_id, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out


def collate(examples: Sequence[Example]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(src, tgt_in, tgt_out)`` with the decoder shifted right by the pad/start id."""
    src = pad_batch([e.src for e in examples])
    tgt_out = pad_batch([e.tgt for e in examples])
    tgt_in = np.concatenate([np.full((len(examples), 1), PAD_ID, dtype=np.int64), tgt_out[:, :-1]], axis=1)
    tgt_in[tgt_in == EOS_ID] = PAD_ID
    return src, tgt_in, tgt_out
