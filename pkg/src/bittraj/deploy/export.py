"""Frozen inference models with packed ternary weights, and memory accounting."""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .. import autodiff as ad
from .. import kernels
from ..autodiff import Tensor
from ..bitlinear import BiasPolicy, BitLinear, QuantMode
from ..model import ModelConfig, SamplingConfig, Seq2SeqModel, generate
from ..nn import Module
from ..quant import DEFAULT_EPS, INT8, absmax_scale
from .packing import PackedTernaryMatrix, pack, packed_matmul, unpack

SCALE_BYTES = 8   # per-tensor scale stored as float64


class PackedLinear(Module):
    """Inference-only linear layer over a packed ternary weight.

    With ``quantize_input`` the input goes through the same LayerNorm and
    per-token INT8 fake quantization as a BitLinear in ``both`` mode.
    ``naive`` unpacks the weight on every call (comparison baseline).
    """

    def __init__(self, packed: PackedTernaryMatrix, bias: np.ndarray | None = None,
                 bias_policy: BiasPolicy | str = BiasPolicy.LITERAL, quantize_input: bool = False,
                 eps: float = DEFAULT_EPS, ln_eps: float = 1e-5, naive: bool = False):
        super().__init__()
        self.packed = packed
        self.bias_arr = None if bias is None else np.asarray(bias, dtype=np.float32)
        self.bias_policy = BiasPolicy(bias_policy)
        self.quantize_input = quantize_input
        self.eps = eps
        self.ln_eps = ln_eps
        self.naive = naive
        self.in_features, self.out_features = packed.cols, packed.rows

    def forward(self, x) -> Tensor:
        x = np.asarray(ad.as_tensor(x).data, dtype=np.float32)
        if x.shape[-1] != self.in_features:
            raise ValueError(f"input of shape {x.shape} does not match packed matrix {self.packed.shape}")
        lead = x.shape[:-1]
        x2 = x.reshape(-1, self.in_features)
        gamma = np.ones((x2.shape[0], 1))
        if self.quantize_input:
            xn = ad.layer_norm(Tensor(x2), self.ln_eps).data
            gamma = absmax_scale(xn, INT8, self.eps)
            x2, _ = kernels.fake_quant(xn, gamma, INT8.lo, INT8.hi)
        if self.naive:
            acc = x2.astype(np.float64) @ unpack(self.packed).astype(np.float64).T
        else:
            acc = packed_matmul(self.packed, x2)
        y = acc * self.packed.scale
        if self.bias_arr is not None:
            b = self.bias_arr.astype(np.float64)
            y = y + (b if self.bias_policy == BiasPolicy.POST_DEQUANT else b * self.packed.scale / gamma)
        return Tensor(y.astype(np.float32).reshape(*lead, self.out_features))

    def __repr__(self) -> str:
        p = self.packed
        return f"PackedLinear({p.cols}, {p.rows}, encoding={p.encoding}, quantize_input={self.quantize_input})"


def packed_from_bitlinear(layer: BitLinear, encoding: str = "two_bit", naive: bool = False) -> PackedLinear:
    codes, beta = layer.ternary_codes()
    bias = None if layer.bias is None else layer.bias.data
    return PackedLinear(pack(codes, encoding, 1.0 / beta), bias, layer.bias_policy,
                        layer.mode.quantizes_activations, layer.eps, layer.ln_eps, naive)


@dataclass
class DeployModel:
    """Frozen copy of a trained model with weight-quantized linears packed."""
    model: Seq2SeqModel
    mode: QuantMode
    encoding: str = "two_bit"

    @property
    def config(self) -> ModelConfig:
        return self.model.config

    def packed_layers(self) -> list[tuple[str, PackedLinear]]:
        return [(n, m) for n, m in self.model.named_modules() if isinstance(m, PackedLinear)]

    def forward(self, src_ids, tgt_in) -> np.ndarray:
        with ad.no_grad():
            return self.model(src_ids, tgt_in).data

    def generate(self, src_ids, sampling: SamplingConfig, n_samples: int = 1) -> list[list[int]]:
        return generate(self.model, src_ids, sampling, n_samples=n_samples)


def _swap(module: Module, encoding: str, naive: bool) -> None:
    for name, child in list(module.named_children()):
        if isinstance(child, BitLinear) and child.mode.quantizes_weights:
            setattr(module, name, packed_from_bitlinear(child, encoding, naive))
        else:
            _swap(child, encoding, naive)


def export_model(model: Seq2SeqModel, encoding: str = "two_bit", naive: bool = False) -> DeployModel:
    """Pack every weight-quantized BitLinear of a copy of ``model``.

    The token embedding stays full precision for lookups even when the tied
    LM head is packed.
    """
    frozen = copy.deepcopy(model)
    for p in frozen.parameters():
        p.grad = None
        p.requires_grad = False
    _swap(frozen, encoding, naive)
    return DeployModel(frozen, QuantMode.parse(getattr(model, "mode", QuantMode.NONE)), encoding)


# ---------------------------------------------------------------------------
# memory accounting
# ---------------------------------------------------------------------------

@dataclass
class TensorBytes:
    name: str
    kind: str       # "packed" or "dense"
    numel: int
    nbytes: int


@dataclass
class MemoryReport:
    tensors: list[TensorBytes] = field(default_factory=list)

    @property
    def packed_bytes(self) -> int:
        return sum(t.nbytes for t in self.tensors if t.kind == "packed")

    @property
    def dense_bytes(self) -> int:
        return sum(t.nbytes for t in self.tensors if t.kind == "dense")

    @property
    def total(self) -> int:
        return sum(t.nbytes for t in self.tensors)

    def as_dict(self) -> dict:
        return {"tensors": [t.__dict__ for t in self.tensors], "packed_bytes": self.packed_bytes,
                "dense_bytes": self.dense_bytes, "total": self.total}


def memory_report(obj, dense_bytes: int = 2) -> MemoryReport:
    """Exact storage per tensor: packed payload plus scale, or ``dense_bytes`` per element.

    Accepts a model (nothing packed) or a :class:`DeployModel`. Tied tensors
    are counted once.
    """
    model = obj.model if isinstance(obj, DeployModel) else obj
    rep = MemoryReport()
    seen: set[int] = set()
    for mname, mod in model.named_modules():
        prefix = f"{mname}." if mname else ""
        if isinstance(mod, PackedLinear):
            p = mod.packed
            rep.tensors.append(TensorBytes(prefix + "weight", "packed", p.rows * p.cols, p.nbytes + SCALE_BYTES))
            if mod.bias_arr is not None:
                rep.tensors.append(TensorBytes(prefix + "bias", "dense", mod.bias_arr.size,
                                               mod.bias_arr.size * dense_bytes))
            continue
        for pname, t in mod._params.items():
            if id(t) in seen:
                continue
            seen.add(id(t))
            rep.tensors.append(TensorBytes(prefix + pname, "dense", t.data.size, t.data.size * dense_bytes))
    return rep


def storage_bits_per_weight(p: PackedTernaryMatrix) -> float:
    return 8.0 * (p.nbytes + SCALE_BYTES) / (p.rows * p.cols)
