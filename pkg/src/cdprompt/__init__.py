"""Interpret continuous prompts by decomposing them into human-readable concepts."""

from .decomposer import Decomposition, causal_attack, cd_tune, concept_keys, explain, frobenius_fit
from .errors import CDError
from .submodular import SelectionConfig, greedy_select
from .toy_transformer import ModelConfig, ToyTransformer, p_tune

__version__ = "0.1.0"

__all__ = [
    "CDError",
    "Decomposition",
    "ModelConfig",
    "SelectionConfig",
    "ToyTransformer",
    "causal_attack",
    "cd_tune",
    "concept_keys",
    "explain",
    "frobenius_fit",
    "greedy_select",
    "p_tune",
]
