"""T5-shaped encoder-decoder transformer with KV-cached decoding."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .bitlinear import (
    BitLinear,
    QuantMode,
    count_replacement_sites,
    frozen_quantization,
    replace_linear_with_quantization,
)
from .nn import Embedding, LayerNorm, Linear, Module, ModuleList

PAD_ID = 0
EOS_ID = 1
NEG_INF = np.float32(-1e9)


class SequenceTooLong(ValueError):
    pass


@dataclass
class ModelConfig:
    n_encoder_blocks: int = 2
    n_decoder_blocks: int = 2
    d_model: int = 64
    d_ff: int = 256
    n_heads: int = 4
    vocab_size: int = 200
    max_seq_len: int = 256
    tie_lm_head: bool = True
    pad_id: int = PAD_ID
    eos_id: int = EOS_ID

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        for name in ("n_encoder_blocks", "n_decoder_blocks"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("d_model", "d_ff", "n_heads", "vocab_size", "max_seq_len"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @classmethod
    def t5_small(cls, vocab_size: int = 32128, max_seq_len: int = 512) -> ModelConfig:
        return cls(6, 6, 512, 2048, 8, vocab_size, max_seq_len)

    @classmethod
    def toy(cls, vocab_size: int = 200, max_seq_len: int = 256) -> ModelConfig:
        return cls(2, 2, 64, 256, 4, vocab_size, max_seq_len)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SamplingConfig:
    temperature: float = 0.7
    max_new_tokens: int = 96
    seed: int = 0
    top_k: None = None  # sampling is over the full vocabulary

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.top_k is not None:
            raise ValueError("top-k sampling is not supported")


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------

def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    b, t, d = x.shape
    return ad.transpose(ad.reshape(x, (b, t, n_heads, d // n_heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, t, dh = x.shape
    return ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (b, t, h * dh))


class Attention(Module):
    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator, std: float):
        super().__init__()
        self.n_heads = n_heads
        self.q = Linear(d_model, d_model, bias=False, rng=rng, std=std)
        self.k = Linear(d_model, d_model, bias=False, rng=rng, std=std)
        self.v = Linear(d_model, d_model, bias=False, rng=rng, std=std)
        self.o = Linear(d_model, d_model, bias=False, rng=rng, std=std)
        self.scale = 1.0 / np.sqrt(d_model // n_heads)

    def project_kv(self, x: Tensor) -> tuple[Tensor, Tensor]:
        return _split_heads(self.k(x), self.n_heads), _split_heads(self.v(x), self.n_heads)

    def attend(self, x: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None) -> Tensor:
        q = _split_heads(self.q(x), self.n_heads)
        scores = ad.scale(ad.matmul(q, ad.transpose(k)), self.scale)
        if mask is not None:
            scores = scores + mask
        probs = ad.softmax(scores, axis=-1)
        return self.o(_merge_heads(ad.matmul(probs, v)))

    def forward(self, x: Tensor, kv_source: Tensor | None = None, mask=None) -> Tensor:
        k, v = self.project_kv(x if kv_source is None else kv_source)
        return self.attend(x, k, v, mask)


class FeedForward(Module):
    def __init__(self, d_model: int, d_ff: int, rng: np.random.Generator, std: float):
        super().__init__()
        self.wi = Linear(d_model, d_ff, bias=False, rng=rng, std=std)
        self.wo = Linear(d_ff, d_model, bias=False, rng=rng, std=std)

    def forward(self, x: Tensor) -> Tensor:
        return self.wo(ad.gelu(self.wi(x)))


class EncoderBlock(Module):
    def __init__(self, cfg: ModelConfig, rng, std):
        super().__init__()
        self.ln_attn = LayerNorm(cfg.d_model)
        self.self_attn = Attention(cfg.d_model, cfg.n_heads, rng, std)
        self.ln_ffn = LayerNorm(cfg.d_model)
        self.ffn = FeedForward(cfg.d_model, cfg.d_ff, rng, std)

    def forward(self, x: Tensor, mask) -> Tensor:
        x = x + self.self_attn(self.ln_attn(x), mask=mask)
        return x + self.ffn(self.ln_ffn(x))


class DecoderBlock(Module):
    def __init__(self, cfg: ModelConfig, rng, std):
        super().__init__()
        self.ln_self = LayerNorm(cfg.d_model)
        self.self_attn = Attention(cfg.d_model, cfg.n_heads, rng, std)
        self.ln_cross = LayerNorm(cfg.d_model)
        self.cross_attn = Attention(cfg.d_model, cfg.n_heads, rng, std)
        self.ln_ffn = LayerNorm(cfg.d_model)
        self.ffn = FeedForward(cfg.d_model, cfg.d_ff, rng, std)

    def forward(self, x: Tensor, memory: Tensor, self_mask, cross_mask) -> Tensor:
        x = x + self.self_attn(self.ln_self(x), mask=self_mask)
        x = x + self.cross_attn(self.ln_cross(x), kv_source=memory, mask=cross_mask)
        return x + self.ffn(self.ln_ffn(x))


class Encoder(Module):
    def __init__(self, cfg: ModelConfig, rng, std):
        super().__init__()
        self.pos = Embedding(cfg.max_seq_len, cfg.d_model, rng, std=0.1)
        self.blocks = ModuleList(EncoderBlock(cfg, rng, std) for _ in range(cfg.n_encoder_blocks))
        self.final_ln = LayerNorm(cfg.d_model)


class Decoder(Module):
    def __init__(self, cfg: ModelConfig, rng, std):
        super().__init__()
        self.pos = Embedding(cfg.max_seq_len, cfg.d_model, rng, std=0.1)
        self.blocks = ModuleList(DecoderBlock(cfg, rng, std) for _ in range(cfg.n_decoder_blocks))
        self.final_ln = LayerNorm(cfg.d_model)


@dataclass
class DecodeState:
    """Per-layer self-attention caches plus the precomputed cross-attention K/V."""
    self_k: list = field(default_factory=list)
    self_v: list = field(default_factory=list)
    cross_k: list = field(default_factory=list)
    cross_v: list = field(default_factory=list)
    cross_mask: np.ndarray | None = None
    tokens: list = field(default_factory=list)
    step: int = 0

    @property
    def cache_len(self) -> int:
        return 0 if not self.self_k or self.self_k[0] is None else self.self_k[0].shape[2]


class Seq2SeqModel(Module):
    """Encoder-decoder transformer over token ids.

    Linear sites per block: 4 (self-attention) + 2 (FFN) in the encoder,
    4 + 4 (cross-attention) + 2 in the decoder, plus the LM head.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.config = cfg
        rng = np.random.default_rng(seed)
        std = 0.02 / np.sqrt(2 * max(cfg.n_encoder_blocks + cfg.n_decoder_blocks, 1))
        self.shared = Embedding(cfg.vocab_size, cfg.d_model, rng, std=1.0)
        self.encoder = Encoder(cfg, rng, std)
        self.decoder = Decoder(cfg, rng, std)
        self.lm_head = Linear(cfg.d_model, cfg.vocab_size, bias=False, rng=rng, std=std)
        if cfg.tie_lm_head:
            self.lm_head.weight = self.shared.weight
        self.mode = QuantMode.NONE

    # -- helpers ---------------------------------------------------------------
    def _check_len(self, n: int, what: str) -> None:
        if n > self.config.max_seq_len:
            raise SequenceTooLong(f"{what} length {n} exceeds max_seq_len={self.config.max_seq_len}")

    def _check_ids(self, ids: np.ndarray) -> None:
        if ids.size and (ids.min() < 0 or ids.max() >= self.config.vocab_size):
            raise IndexError(f"token id outside [0, {self.config.vocab_size})")

    def src_mask(self, src_ids: np.ndarray) -> np.ndarray:
        return np.where(src_ids == self.config.pad_id, NEG_INF, np.float32(0))[:, None, None, :]

    def _head(self, x: Tensor) -> Tensor:
        if self.config.tie_lm_head:
            x = ad.scale(x, self.config.d_model ** -0.5)
        return self.lm_head(x)

    # -- full-sequence paths ----------------------------------------------------
    def encode(self, src_ids) -> Tensor:
        src = np.atleast_2d(np.asarray(src_ids, dtype=np.int64))
        self._check_len(src.shape[1], "source")
        self._check_ids(src)
        x = self.shared(src) + self.encoder.pos(np.arange(src.shape[1]))
        mask = self.src_mask(src)
        for blk in self.encoder.blocks:
            x = blk(x, mask)
        return self.encoder.final_ln(x)

    def decode(self, tgt_in, memory: Tensor, src_ids) -> Tensor:
        """Teacher-forced decoder pass; returns logits ``[B, T, V]``."""
        tgt = np.atleast_2d(np.asarray(tgt_in, dtype=np.int64))
        src = np.atleast_2d(np.asarray(src_ids, dtype=np.int64))
        t = tgt.shape[1]
        self._check_len(t, "target")
        self._check_ids(tgt)
        x = self.shared(tgt) + self.decoder.pos(np.arange(t))
        causal = np.triu(np.full((t, t), NEG_INF, np.float32), k=1)[None, None]
        cross = self.src_mask(src)
        for blk in self.decoder.blocks:
            x = blk(x, memory, causal, cross)
        return self._head(self.decoder.final_ln(x))

    def forward(self, src_ids, tgt_in) -> Tensor:
        return self.decode(tgt_in, self.encode(src_ids), src_ids)

    def loss(self, src_ids, tgt_in, tgt_out) -> Tensor:
        logits = self.forward(src_ids, tgt_in)
        return ad.cross_entropy(logits, tgt_out, ignore_index=self.config.pad_id)

    # -- incremental decoding -------------------------------------------------
    def start_state(self, memory: Tensor, src_ids) -> DecodeState:
        src = np.atleast_2d(np.asarray(src_ids, dtype=np.int64))
        st = DecodeState(cross_mask=self.src_mask(src))
        for blk in self.decoder.blocks:
            k, v = blk.cross_attn.project_kv(memory)
            st.cross_k.append(k)
            st.cross_v.append(v)
            st.self_k.append(None)
            st.self_v.append(None)
        return st

    def decode_step(self, state: DecodeState, token_ids) -> Tensor:
        """Feed one token per sequence; returns next-token logits ``[B, V]``."""
        tok = np.asarray(token_ids, dtype=np.int64).reshape(-1, 1)
        pos = state.step
        self._check_len(pos + 1, "target")
        self._check_ids(tok)
        x = self.shared(tok) + self.decoder.pos(np.array([pos]))
        for i, blk in enumerate(self.decoder.blocks):
            h = blk.ln_self(x)
            k_new, v_new = blk.self_attn.project_kv(h)
            if state.self_k[i] is None:
                state.self_k[i], state.self_v[i] = k_new, v_new
            else:
                state.self_k[i] = ad.concat([state.self_k[i], k_new], axis=2)
                state.self_v[i] = ad.concat([state.self_v[i], v_new], axis=2)
            x = x + blk.self_attn.attend(h, state.self_k[i], state.self_v[i], None)
            x = x + blk.cross_attn.attend(blk.ln_cross(x), state.cross_k[i], state.cross_v[i],
                                          state.cross_mask)
            x = x + blk.ffn(blk.ln_ffn(x))
        state.step += 1
        state.tokens.append(tok.reshape(-1))
        logits = self._head(self.decoder.final_ln(x))
        return ad.reshape(logits, (logits.shape[0], logits.shape[2]))


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------

def build_model(cfg: ModelConfig, mode: QuantMode | str = QuantMode.NONE, seed: int = 0,
                **layer_kwargs) -> Seq2SeqModel:
    """Build the transformer and replace all of its linear sites for ``mode``."""
    model = Seq2SeqModel(cfg, seed)
    replace_linear_with_quantization(model, mode, **layer_kwargs)
    model.mode = QuantMode.parse(mode)
    return model


def census(model: Module):
    return count_replacement_sites(model)


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def temperature_probs(logits: np.ndarray, temperature: float) -> np.ndarray:
    """softmax(logits / temperature) in float64; temperature 0 gives a one-hot argmax."""
    z = np.asarray(logits, dtype=np.float64)
    if temperature == 0:
        p = np.zeros_like(z)
        np.put_along_axis(p, z.argmax(axis=-1)[..., None], 1.0, axis=-1)
        return p
    z = z / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def draw_tokens(logits: np.ndarray, temperature: float, rng: np.random.Generator) -> np.ndarray:
    """One token per row of ``logits``: argmax at temperature 0, inverse-CDF draw otherwise."""
    logits = np.atleast_2d(logits)
    if temperature == 0:
        return logits.argmax(axis=-1)
    p = temperature_probs(logits, temperature)
    c = np.cumsum(p, axis=-1)
    u = rng.random(len(p))[:, None] * c[:, -1:]
    idx = (c <= u).sum(axis=-1)
    return np.minimum(idx, p.shape[-1] - 1)


def generate(model: Seq2SeqModel, src_ids, sampling: SamplingConfig, use_cache: bool = True,
             n_samples: int = 1) -> list[list[int]]:
    """Sample answers for each source row (``n_samples`` independent draws each).

    Rows are ordered source-major: all samples for source 0 first. The EOS
    token ends a sequence and is not included in the output.
    """
    src = np.atleast_2d(np.asarray(src_ids, dtype=np.int64))
    if n_samples > 1:
        src = np.repeat(src, n_samples, axis=0)
    b = src.shape[0]
    cfg = model.config
    rng = np.random.default_rng(sampling.seed)
    max_new = min(sampling.max_new_tokens, cfg.max_seq_len)
    out = [[] for _ in range(b)]
    done = np.zeros(b, dtype=bool)
    with ad.no_grad(), frozen_quantization(model):
        memory = model.encode(src)
        if use_cache:
            state = model.start_state(memory, src)
            nxt = np.full(b, cfg.pad_id, dtype=np.int64)
            for _ in range(max_new):
                logits = model.decode_step(state, nxt).data
                nxt = draw_tokens(logits, sampling.temperature, rng)
                _append(out, done, nxt, cfg.eos_id)
                if done.all():
                    break
        else:
            prefix = np.full((b, 1), cfg.pad_id, dtype=np.int64)
            for _ in range(max_new):
                logits = model.decode(prefix, memory, src).data[:, -1]
                nxt = draw_tokens(logits, sampling.temperature, rng)
                _append(out, done, nxt, cfg.eos_id)
                if done.all():
                    break
                prefix = np.concatenate([prefix, nxt[:, None]], axis=1)
    return out


def _append(out, done, nxt, eos_id) -> None:
    for i, t in enumerate(nxt):
        if done[i]:
            continue
        if t == eos_id:
            done[i] = True
        else:
            out[i].append(int(t))


def sample(model: Seq2SeqModel, src_ids, sampling: SamplingConfig) -> list[int]:
    """Single-sequence convenience wrapper around :func:`generate`."""
    return generate(model, np.asarray(src_ids).reshape(1, -1), sampling)[0]
