"""The shared multi-modal backbone: embeddings + encoder, with batching helpers."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .autodiff import ParameterStore, Tensor
from .document import Document
from .embedder import AssembledInput, Embedder, ModelConfig, build_input
from .encoder import Encoder
from .tokenizer import Vocab


@dataclass
class Batch:
    docs: list[Document]
    inputs: list[AssembledInput]

    @property
    def size(self) -> int:
        return len(self.docs)

    def flat(self, b: int, positions) -> np.ndarray:
        """Row indices into the flattened [B*L, d] encoder output."""
        return b * self.inputs[b].length + np.asarray(positions, dtype=np.int64)

    def with_inputs(self, inputs: Sequence[AssembledInput]) -> "Batch":
        return replace(self, inputs=list(inputs))


class DocumentModel:
    def __init__(self, config: ModelConfig, vocab: Vocab, seed: int = 0):
        if len(vocab) > config.vocab_size:
            raise ValueError(f"vocabulary of {len(vocab)} tokens exceeds vocab_size {config.vocab_size}")
        self.config = config
        self.vocab = vocab
        self.params = ParameterStore(seed)
        self.embedder = Embedder(self.params, config)
        self.encoder = Encoder(self.params, config)

    def prepare(self, docs: Sequence[Document]) -> Batch:
        return Batch(list(docs), [build_input(doc, self.vocab, self.config) for doc in docs])

    def embed(self, batch: Batch) -> Tensor:
        return self.embedder.assemble(batch.inputs, [d.image for d in batch.docs])

    def forward(self, batch: Batch, rng: Optional[np.random.Generator] = None) -> Tensor:
        """Encoded features [B*L, d]; ``rng`` enables dropout."""
        x = self.embed(batch)
        pad = np.stack([a.pad_mask for a in batch.inputs])
        return self.encoder.encode(x, pad, rng)

    def assemble(self, doc: Document) -> AssembledInput:
        """Index arrays plus the [L, d] input embeddings for a single document."""
        batch = self.prepare([doc])
        inp = replace(batch.inputs[0])
        inp.embeddings = self.embed(batch)
        return inp

    def visual_rows(self, batch: Batch) -> tuple[np.ndarray, list[np.ndarray]]:
        """Flat rows of V1..Vn for all documents, and per-document row arrays."""
        per_doc = [batch.flat(b, a.visual_positions[1:]) for b, a in enumerate(batch.inputs)]
        return (np.concatenate(per_doc) if per_doc else np.zeros(0, np.int64)), per_doc
