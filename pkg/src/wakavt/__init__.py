"""Keyword-conditioned waka generation.

Variational Transformer language models (TLM / TVAE / WakaVT), fused
multilevel self-attention, morae-constrained beam search over the
5-7-5-7-7 pattern, and the matching corpus / evaluation tooling.
"""

__version__ = "0.1.0"

from wakavt.tensor import Tensor, ParameterStore  # noqa: F401
