"""Numeric-modality encoding for small autoregressive sequence models."""

from .encoders import DigitCodec, Normalizer, project_number, xval_embed
from .genloop import generate
from .numtext import CharVocab, encode_turns, extract_numbers, restore_numbers
from .seqmodel import ModelConfig, SeqModel

__version__ = "0.1.0"

__all__ = [
    "CharVocab",
    "DigitCodec",
    "ModelConfig",
    "Normalizer",
    "SeqModel",
    "encode_turns",
    "extract_numbers",
    "generate",
    "project_number",
    "restore_numbers",
    "xval_embed",
]
