"""Layout-aware multi-modal transformer for form understanding, built on a small
numpy autodiff engine."""

from .document import BBox, Document, LabelSchema, TextSegment
from .embedder import ModelConfig
from .model import DocumentModel
from .tokenizer import Vocab, build_vocab, tokenize

__version__ = "0.1.0"

__all__ = [
    "BBox",
    "Document",
    "LabelSchema",
    "ModelConfig",
    "DocumentModel",
    "TextSegment",
    "Vocab",
    "build_vocab",
    "tokenize",
]
