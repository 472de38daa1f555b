"""Selective BitLinear quantization for language-tokenized trajectory prediction."""
from .autodiff import Tensor, no_grad
from .bitlinear import (
    BitLinear,
    QuantMode,
    count_replacement_sites,
    replace_linear,
    replace_linear_with_quantization,
)
from .model import ModelConfig, SamplingConfig, Seq2SeqModel, build_model, generate, sample

__version__ = "0.1.0"
