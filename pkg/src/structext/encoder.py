"""Pre-norm transformer encoder over the assembled sequence."""

from __future__ import annotations

from typing import Optional

import numpy as np

from .autodiff import ParameterStore, Tensor, ops
from .autodiff.tensor import debug_enabled
from .embedder import ModelConfig

NEG_INF = -1e9


class Encoder:
    def __init__(self, params: ParameterStore, config: ModelConfig):
        self.params = params
        self.config = config
        d, f = config.hidden, config.ffn
        for l in range(config.layers):
            p = f"enc.{l}"
            params.ones(f"{p}.ln1.g", (d,))
            params.zeros(f"{p}.ln1.b", (d,))
            for name in ("q", "k", "v"):
                params.glorot(f"{p}.attn.w{name}", d, d)
                params.zeros(f"{p}.attn.b{name}", (d,))
            params.glorot(f"{p}.attn.wo", d, d)
            params.zeros(f"{p}.attn.bo", (d,))
            params.ones(f"{p}.ln2.g", (d,))
            params.zeros(f"{p}.ln2.b", (d,))
            params.glorot(f"{p}.ffn.w1", d, f)
            params.zeros(f"{p}.ffn.b1", (f,))
            params.glorot(f"{p}.ffn.w2", f, d)
            params.zeros(f"{p}.ffn.b2", (d,))
        params.ones("enc.ln_f.g", (d,))
        params.zeros("enc.ln_f.b", (d,))
        self.last_attention: list[np.ndarray] = []

    def _check_params(self) -> None:
        d = self.config.hidden
        w = self.params["enc.0.attn.wq"]
        if w.shape != (d, d) or self.params["enc.0.ffn.w1"].shape != (d, self.config.ffn):
            raise ValueError(f"encoder config hidden={d} does not match parameter shape {w.shape}")

    def attention(self, x: Tensor, layer: int, key_mask: np.ndarray, rng) -> Tensor:
        B, L, d = x.shape
        h = self.config.heads
        dh = d // h
        p = f"enc.{layer}.attn"

        def heads(name):
            t = ops.linear(x, self.params[f"{p}.w{name}"], self.params[f"{p}.b{name}"])
            return ops.transpose(ops.reshape(t, (B, L, h, dh)), (0, 2, 1, 3))  # [B, h, L, dh]

        q, k, v = heads("q"), heads("k"), heads("v")
        scores = ops.mul(ops.matmul(q, ops.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
        attn = ops.softmax(scores, additive_mask=key_mask)
        if debug_enabled():
            sums = attn.value.sum(axis=-1)
            if not np.allclose(sums, 1.0, atol=1e-4):
                raise FloatingPointError("attention weights do not sum to 1")
        self.last_attention.append(attn.value)
        attn = ops.dropout(attn, self.config.dropout, rng)
        ctx = ops.transpose(ops.matmul(attn, v), (0, 2, 1, 3))  # [B, L, h, dh]
        ctx = ops.reshape(ctx, (B, L, d))
        return ops.linear(ctx, self.params[f"{p}.wo"], self.params[f"{p}.bo"])

    def encode(self, embeddings: Tensor, pad_mask: np.ndarray, rng: Optional[np.random.Generator] = None) -> Tensor:
        """Contextualise [B*L, d] embeddings; ``pad_mask`` is [B, L] (True = padding).

        Pass ``rng`` to enable dropout (training); ``None`` is deterministic evaluation.
        """
        self._check_params()
        pad_mask = np.asarray(pad_mask, dtype=bool)
        B, L = pad_mask.shape
        d = self.config.hidden
        key_mask = np.where(pad_mask, NEG_INF, 0.0).astype(embeddings.dtype)[:, None, None, :]
        x = ops.reshape(embeddings, (B, L, d))
        self.last_attention = []
        rate = self.config.dropout
        for l in range(self.config.layers):
            p = f"enc.{l}"
            hdn = ops.layer_norm(x, self.params[f"{p}.ln1.g"], self.params[f"{p}.ln1.b"])
            x = x + ops.dropout(self.attention(hdn, l, key_mask, rng), rate, rng)
            hdn = ops.layer_norm(x, self.params[f"{p}.ln2.g"], self.params[f"{p}.ln2.b"])
            hdn = ops.relu(ops.linear(hdn, self.params[f"{p}.ffn.w1"], self.params[f"{p}.ffn.b1"]))
            hdn = ops.linear(hdn, self.params[f"{p}.ffn.w2"], self.params[f"{p}.ffn.b2"])
            x = x + ops.dropout(hdn, rate, rng)
        x = ops.layer_norm(x, self.params["enc.ln_f.g"], self.params["enc.ln_f.b"])
        return ops.reshape(x, (B * L, d))
