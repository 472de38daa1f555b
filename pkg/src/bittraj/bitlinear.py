"""Selective BitLinear layers and linear-to-BitLinear replacement.

Three quantized forwards, all dequantized after the product:

* ``Both``   ``y = (Q8(g * LN(x)) @ Q1.58(b * W)^T + bias) / (b * g)``
* ``Activ``  ``y = (Q8(g * LN(x)) @ W^T + bias) / g``
* ``Weight`` ``y = (x @ Q1.58(b * W)^T + bias) / b``

with ``g`` the per-token AbsMax scale and ``b`` the per-tensor AbsMean scale.
Scales are treated as constants by the backward pass; the rounding steps use a
straight-through estimator.
"""
from __future__ import annotations

import contextlib
import enum
from typing import Callable, NamedTuple

import numpy as np

from . import autodiff as ad
from . import kernels
from .autodiff import Tensor
from .nn import Linear, Module
from .quant import (
    DEFAULT_EPS,
    INT8,
    TERNARY,
    QuantRange,
    absmax_scale,
    absmean_scale,
    round_clamp,
)


class QuantMode(str, enum.Enum):
    NONE = "none"
    BOTH = "both"
    ACTIV = "activ"
    WEIGHT = "weight"

    @classmethod
    def parse(cls, value) -> QuantMode:
        if isinstance(value, QuantMode):
            return value
        if value is None:
            return cls.NONE
        key = str(value).strip().lower()
        aliases = {"activation": "activ", "activations": "activ", "weights": "weight",
                   "fp": "none", "full": "none"}
        try:
            return cls(aliases.get(key, key))
        except ValueError:
            raise ValueError(f"unknown quantization mode {value!r}") from None

    @property
    def quantizes_weights(self) -> bool:
        return self in (QuantMode.BOTH, QuantMode.WEIGHT)

    @property
    def quantizes_activations(self) -> bool:
        return self in (QuantMode.BOTH, QuantMode.ACTIV)


class BiasPolicy(str, enum.Enum):
    LITERAL = "literal"            # bias divided by the scale(s), as written
    POST_DEQUANT = "post_dequant"  # bias added after dequantization


class SteMode(str, enum.Enum):
    CLIPPED = "clipped"
    IDENTITY = "identity"


def ste_quantize(x: Tensor, scale, qrange: QuantRange, ste: SteMode = SteMode.CLIPPED) -> Tensor:
    """Fake-quantize ``x`` to ``round_clamp(scale * x) / scale`` with an STE backward.

    ``scale`` is a constant: a python float, or one value per row of
    ``x.reshape(-1, x.shape[-1])``. The clipped estimator zeroes the gradient
    where clamping was active.
    """
    y, mask = kernels.fake_quant(x.data, scale, qrange.lo, qrange.hi)
    return ad.straight_through_masked(x, y, mask if ste == SteMode.CLIPPED else None)


class BitLinear(Module):
    """Linear layer with an optional quantizer on its input and/or weight.

    Args:
        mode: which operands are quantized.
        eps: epsilon of both scaling functions.
        bias_policy: ``literal`` divides the bias by the dequantization scale,
            ``post_dequant`` adds it afterwards.
        ste: ``clipped`` (default) or ``identity`` straight-through estimator.
        ln_eps: epsilon of the input LayerNorm used by the activation quantizer.
    """

    def __init__(self, in_features: int, out_features: int, bias: bool = True,
                 mode: QuantMode | str = QuantMode.NONE, eps: float = DEFAULT_EPS,
                 bias_policy: BiasPolicy | str = BiasPolicy.LITERAL,
                 ste: SteMode | str = SteMode.CLIPPED, ln_eps: float = 1e-5,
                 rng: np.random.Generator | None = None, std: float | None = None):
        super().__init__()
        base = Linear(in_features, out_features, bias=bias, rng=rng, std=std)
        self._configure(base, mode, eps, bias_policy, ste, ln_eps)

    def _configure(self, lin: Linear, mode, eps=DEFAULT_EPS, bias_policy=BiasPolicy.LITERAL,
                   ste=SteMode.CLIPPED, ln_eps=1e-5) -> None:
        self.in_features = lin.in_features
        self.out_features = lin.out_features
        self.weight = lin.weight
        self.bias = lin.bias
        self.mode = QuantMode.parse(mode)
        self.eps = eps
        self.bias_policy = BiasPolicy(bias_policy)
        self.ste = SteMode(ste)
        self.ln_eps = ln_eps
        self.weight_measure: Callable | None = absmean_scale if self.mode.quantizes_weights else None
        self.activation_measure: Callable | None = absmax_scale if self.mode.quantizes_activations else None
        self._frozen: tuple[np.ndarray, np.ndarray, float] | None = None

    @classmethod
    def from_linear(cls, lin: Linear, mode: QuantMode | str, **kwargs) -> BitLinear:
        """Wrap ``lin``'s parameters (shared, not copied) in a BitLinear."""
        layer = cls.__new__(cls)
        Module.__init__(layer)
        layer._configure(lin, mode, **kwargs)
        return layer

    # -- inference freezing --------------------------------------------------
    def freeze(self) -> None:
        """Compute the ternary code and beta once; reused until ``unfreeze``."""
        if self.mode.quantizes_weights:
            codes, beta = self.ternary_codes()
            self._frozen = (codes, (codes / beta).astype(self.weight.dtype), beta)

    def unfreeze(self) -> None:
        self._frozen = None

    def ternary_codes(self) -> tuple[np.ndarray, float]:
        """Current ternary code tensor (int8) and its AbsMean scale."""
        beta = absmean_scale(self.weight.data, self.eps)
        codes = round_clamp(self.weight.data.astype(np.float64) * beta, TERNARY)
        return codes.astype(np.int8), beta

    # -- forward ---------------------------------------------------------------
    def _effective_weight(self) -> tuple[Tensor, float]:
        if not self.mode.quantizes_weights:
            return self.weight, 1.0
        if self._frozen is not None:
            return Tensor(self._frozen[1]), self._frozen[2]
        beta = self.weight_measure(self.weight.data, self.eps)
        return ste_quantize(self.weight, beta, TERNARY, self.ste), beta

    def _quantized_input(self, x: Tensor) -> tuple[Tensor, np.ndarray | float]:
        xn = ad.layer_norm(x, self.ln_eps)
        gamma = self.activation_measure(xn.data, INT8, self.eps)
        return ste_quantize(xn, gamma, INT8, self.ste), gamma

    def forward(self, x: Tensor) -> Tensor:
        x = ad.as_tensor(x)
        if self.mode == QuantMode.NONE:
            y = ad.matmul(x, ad.transpose(self.weight))
            return y + self.bias if self.bias is not None else y

        w, beta = self._effective_weight()
        gamma = 1.0
        if self.mode.quantizes_activations:
            x, gamma = self._quantized_input(x)
        y = ad.matmul(x, ad.transpose(w))
        if self.bias is None:
            return y
        if self.bias_policy == BiasPolicy.POST_DEQUANT:
            return y + self.bias
        inv = 1.0 / (np.asarray(gamma, dtype=np.float64) * beta)
        return y + self.bias * inv.astype(self.weight.dtype)

    def __repr__(self) -> str:
        return (f"BitLinear({self.in_features}, {self.out_features}, mode={self.mode.value}, "
                f"bias={self.bias is not None})")


# ---------------------------------------------------------------------------
# replacement surgery
# ---------------------------------------------------------------------------

def replace_linear_with_quantization(model: Module, target: QuantMode | str, **layer_kwargs) -> Module:
    """Swap every plain ``Linear`` in ``model`` for a ``BitLinear`` of ``target`` mode.

    Parameters are moved by reference, so tied weights stay tied. Layers that
    are already ``BitLinear`` are left alone, which makes the call idempotent.
    """
    mode = QuantMode.parse(target)
    if type(model) is Linear:
        return BitLinear.from_linear(model, mode, **layer_kwargs)
    _replace_linear_base(model, mode, layer_kwargs)
    return model


replace_linear = replace_linear_with_quantization


def _replace_linear_base(module: Module, mode: QuantMode, layer_kwargs: dict) -> None:
    for name, child in list(module.named_children()):
        if type(child) is Linear:
            setattr(module, name, BitLinear.from_linear(child, mode, **layer_kwargs))
        else:
            _replace_linear_base(child, mode, layer_kwargs)


def set_quant_mode(model: Module, mode: QuantMode | str) -> None:
    """Change the mode of every BitLinear in place."""
    mode = QuantMode.parse(mode)
    for _, m in model.named_modules():
        if isinstance(m, BitLinear):
            m.mode = mode
            m.weight_measure = absmean_scale if mode.quantizes_weights else None
            m.activation_measure = absmax_scale if mode.quantizes_activations else None
            m._frozen = None


@contextlib.contextmanager
def frozen_quantization(model: Module):
    """Freeze ternary codes of every BitLinear for the duration of the block."""
    layers = [m for _, m in model.named_modules() if isinstance(m, BitLinear)]
    for m in layers:
        m.freeze()
    try:
        yield model
    finally:
        for m in layers:
            m.unfreeze()


class SiteCensus(NamedTuple):
    encoder: int
    decoder: int
    head: int
    total: int


def count_replacement_sites(model: Module) -> SiteCensus:
    """Count linear sites (plain or BitLinear) per top-level region.

    The region is the first component of the module path: ``encoder``,
    ``decoder`` or ``lm_head``. Sites elsewhere only add to ``total``.
    """
    counts = {"encoder": 0, "decoder": 0, "lm_head": 0}
    total = 0
    for path, m in model.named_modules():
        if isinstance(m, (Linear, BitLinear)):
            total += 1
            region = path.split(".", 1)[0]
            if region in counts:
                counts[region] += 1
    return SiteCensus(counts["encoder"], counts["decoder"], counts["lm_head"], total)
