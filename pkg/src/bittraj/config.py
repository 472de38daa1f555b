"""Plain-text run configuration: ``key = value`` lines, ``#`` comments."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .bitlinear import BiasPolicy, QuantMode, SteMode
from .model import ModelConfig, SamplingConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # data
    data_dir: str = ""                 # directory of scene files; empty = synthetic suite
    scene: str = ""                    # held-out scene for leave-one-out; empty = use all scenes
    synth_kinds: str = "line,turn,crossing"
    synth_scenes_per_kind: int = 4
    synth_agents: int = 8
    synth_noise: float = 0.0
    synth_frames: int = 24
    data_seed: int = 0
    obs_len: int = 8
    fut_len: int = 12
    stride: int = 1
    precision: int = 2
    max_neighbors: int = 2
    vocab_size: int = 200
    # model
    n_encoder_blocks: int = 2
    n_decoder_blocks: int = 2
    d_model: int = 64
    d_ff: int = 256
    n_heads: int = 4
    max_seq_len: int = 256
    tie_lm_head: bool = True
    # quantization
    mode: str = "weight"
    bias_policy: str = "literal"
    ste: str = "clipped"
    eps: float = 1e-5
    # training
    lr: float = 1e-4
    epochs: int = 8
    batch_size: int = 128
    grad_clip_norm: float = 1.0
    seed: int = 0
    weight_decay: float = 0.01
    max_steps: int = 0                 # 0 = run all epochs
    # sampling / evaluation
    temperature: float = 0.7
    max_new_tokens: int = 0            # 0 = derived from fut_len and precision
    n_samples: int = 20
    sampling_seed: int = 0
    max_eval_windows: int = 0          # 0 = every window
    # export / bench
    encoding: str = "two_bit"
    repeats: int = 10
    warmup: int = 1

    def __post_init__(self):
        try:
            QuantMode.parse(self.mode)
            BiasPolicy(self.bias_policy)
            SteMode(self.ste)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.encoding not in ("two_bit", "base243"):
            raise ConfigError(f"unknown encoding {self.encoding!r}")
        for name in ("obs_len", "fut_len", "stride", "n_samples", "repeats"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.precision < 0:
            raise ConfigError("precision must be >= 0")

    # -- views ----------------------------------------------------------------
    def model_config(self) -> ModelConfig:
        try:
            return ModelConfig(self.n_encoder_blocks, self.n_decoder_blocks, self.d_model, self.d_ff,
                               self.n_heads, self.vocab_size, self.max_seq_len, self.tie_lm_head)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def train_config(self) -> TrainConfig:
        try:
            return TrainConfig(self.lr, self.epochs, self.batch_size, self.grad_clip_norm, self.seed,
                               self.weight_decay, max_steps=self.max_steps or None)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def sampling_config(self) -> SamplingConfig:
        return SamplingConfig(self.temperature, self.new_token_budget(), self.sampling_seed)

    def layer_kwargs(self) -> dict:
        return {"bias_policy": self.bias_policy, "ste": self.ste, "eps": self.eps}

    def new_token_budget(self) -> int:
        if self.max_new_tokens:
            return self.max_new_tokens
        # every character of the answer as its own token (sign and three
        # integer digits per coordinate, "," and ";" per point), plus EOS
        width = 2 * (4 + self.precision + 1) + 2
        return self.fut_len * width + 1

    # -- text format ----------------------------------------------------------
    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(lines) + "\n"

    def replace(self, **kw) -> RunConfig:
        return _build(dataclasses.asdict(self) | kw)


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, raw: str):
    typ = _FIELD_TYPES[key]
    try:
        if typ == "bool":
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if typ == "int":
            return int(raw)
        if typ == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r} (expected {typ})") from None


def _build(values: dict) -> RunConfig:
    try:
        return RunConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def parse_overrides(pairs, base: dict | None = None) -> dict:
    out = dict(base or {})
    for item in pairs:
        key, sep, raw = item.partition("=")
        key, raw = key.strip(), raw.strip()
        if not sep:
            raise ConfigError(f"override {item!r} is not key=value")
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        out[key] = _coerce(key, raw)
    return out


def parse_config(text: str, source: str = "<config>") -> dict:
    values = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{n}: expected 'key = value'")
        if key not in _FIELD_TYPES:
            raise ConfigError(f"{source}:{n}: unknown config key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{n}: duplicate key {key!r}")
        values[key] = _coerce(key, raw)
    return values


def load_config(path=None, overrides=()) -> RunConfig:
    values = {}
    if path is not None:
        values = parse_config(Path(path).read_text(encoding="utf-8"), str(path))
    return _build(parse_overrides(overrides, values))
