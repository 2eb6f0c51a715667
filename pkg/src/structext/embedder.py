"""Layout, language and visual-segment embeddings and the joint input sequence.

Sequence layout per document::

    [CLS] tok ... tok [SEP] V0 V1 ... Vn [PAD] ...

V0 is the whole page; Vi is segment i's pooled region feature.  Tokens and
the visual feature of segment i share segment id i.  [CLS], [SEP], V0 and
padding get segment id 0 and an all-zero box.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .autodiff import ParameterStore, Tensor, get_dtype, ops
from .document import BBox, Document
from .tokenizer import CLS_ID, PAD_ID, SEP_ID, TokenizedSegment, Vocab, tokenize

logger = logging.getLogger(__name__)

TEXT, VISUAL = 0, 1
NO_WORD = -1


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 512
    hidden: int = 64
    layers: int = 2
    heads: int = 4
    ffn: int = 128
    dropout: float = 0.1
    max_len: int = 128
    image_size: int = 256
    grid: int = 1000
    channels: tuple[int, ...] = (8, 16, 32)
    pooled: int = 3
    slp_classes: int = 64

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ValueError(f"hidden size {self.hidden} not divisible by {self.heads} heads")
        if self.image_size % self.stride:
            raise ValueError(f"image size {self.image_size} not divisible by backbone stride {self.stride}")
        if self.max_len < 4:
            raise ValueError("max_len must leave room for [CLS], [SEP] and V0")

    @property
    def stride(self) -> int:
        return 2 ** len(self.channels)

    def to_json(self) -> dict:
        d = dict(self.__dict__)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "ModelConfig":
        obj = dict(obj)
        if "channels" in obj:
            obj["channels"] = tuple(obj["channels"])
        return cls(**obj)


# ---------------------------------------------------------------- layout


def layout_indices(bbox: BBox | Sequence[float], width: float, height: float, grid: int = 1000) -> tuple[int, ...]:
    """Quantise (x0, y0, x1, y1, w, h) to ``floor(grid * c / extent)`` clamped to [0, grid]."""
    x0, y0, x1, y1 = bbox.as_list() if isinstance(bbox, BBox) else bbox
    if x0 < 0 or y0 < 0 or x1 > width or y1 > height:
        logger.debug("bbox %s outside %sx%s page, clamping", (x0, y0, x1, y1), width, height)
    coords = (x0, y0, x1, y1, x1 - x0, y1 - y0)
    extents = (width, height, width, height, width, height)
    return tuple(int(min(max(np.floor(grid * c / e), 0), grid)) for c, e in zip(coords, extents))


def _smooth_table(grid: int, d: int, rng: np.random.Generator, std: float = 0.02) -> np.ndarray:
    """Rows vary smoothly with the quantised coordinate (linear + low-frequency terms) plus noise."""
    u = np.arange(grid + 1) / grid
    feats = [u - 0.5] + [f(np.pi * k * u) for k in (1, 2, 4) for f in (np.sin, np.cos)]
    basis = np.stack(feats, axis=1)
    basis /= basis.std(axis=0, keepdims=True) + 1e-8
    proj = rng.normal(0.0, 1.0, size=(basis.shape[1], d)) / np.sqrt(basis.shape[1])
    return std * (basis @ proj + 0.5 * rng.normal(size=(grid + 1, d)))


# ---------------------------------------------------------------- input assembly


@dataclass
class AssembledInput:
    """Index arrays for one document, all of length ``max_len``.

    ``embeddings`` is filled in by :meth:`Embedder.assemble`.
    """

    doc_id: str
    token_ids: np.ndarray
    layout: np.ndarray  # [L, 6]
    segment_ids: np.ndarray
    position_ids: np.ndarray
    modality_ids: np.ndarray
    pad_mask: np.ndarray  # True at padding
    first_subword_mask: np.ndarray
    token_segment: np.ndarray  # segment index of each text token, 0 elsewhere
    token_word: np.ndarray  # word index within its segment, -1 elsewhere
    visual_positions: np.ndarray  # positions of V0..Vn
    boxes: np.ndarray  # [n+1, 4] image-space boxes for V0..Vn
    segment_indices: tuple[int, ...]  # kept segment indices, in order
    tokenized: tuple[TokenizedSegment, ...] = ()
    embeddings: Optional[Tensor] = field(default=None, repr=False)

    @property
    def length(self) -> int:
        return int(self.token_ids.shape[0])

    @property
    def text_positions(self) -> np.ndarray:
        return np.nonzero(self.token_segment > 0)[0]

    def positions_of(self, segment_index: int) -> np.ndarray:
        return np.nonzero(self.token_segment == segment_index)[0]


def build_input(doc: Document, vocab: Vocab, config: ModelConfig) -> AssembledInput:
    """Language sequence, visual slots and all index arrays (no parameters involved)."""
    L = config.max_len
    tokenized = [tokenize(s.text, vocab) for s in doc.segments]
    kept = len(doc.segments)
    used = 3 + sum(len(t) for t in tokenized) + kept
    while kept and used > L:
        kept -= 1
        used -= len(tokenized[kept]) + 1
    if kept < len(doc.segments):
        logger.warning("document %s: truncated to %d of %d segments", doc.id, kept, len(doc.segments))
    segs = doc.segments[:kept]
    tokenized = tokenized[:kept]

    token_ids = np.full(L, PAD_ID, dtype=np.int64)
    layout = np.zeros((L, 6), dtype=np.int64)
    segment_ids = np.zeros(L, dtype=np.int64)
    modality = np.full(L, VISUAL, dtype=np.int64)
    first = np.zeros(L, dtype=bool)
    token_segment = np.zeros(L, dtype=np.int64)
    token_word = np.full(L, NO_WORD, dtype=np.int64)

    W, H = float(doc.width or config.image_size), float(doc.height or config.image_size)
    pos = 0
    token_ids[pos] = CLS_ID
    modality[pos] = TEXT
    pos += 1
    for seg, tok in zip(segs, tokenized):
        idx = layout_indices(seg.bbox, W, H, config.grid)
        for tid, is_first, word in zip(tok.token_ids, tok.is_first_subword, tok.word_index):
            token_ids[pos] = tid
            layout[pos] = idx
            segment_ids[pos] = seg.index
            modality[pos] = TEXT
            first[pos] = is_first
            token_segment[pos] = seg.index
            token_word[pos] = word
            pos += 1
    token_ids[pos] = SEP_ID
    modality[pos] = TEXT
    pos += 1

    visual_positions = np.arange(pos, pos + kept + 1)
    boxes = np.zeros((kept + 1, 4))
    boxes[0] = (0.0, 0.0, W, H)
    layout[pos] = layout_indices((0.0, 0.0, W, H), W, H, config.grid)
    pos += 1
    for k, seg in enumerate(segs, start=1):
        boxes[k] = seg.bbox.as_list()
        layout[pos] = layout_indices(seg.bbox, W, H, config.grid)
        segment_ids[pos] = seg.index
        pos += 1
    pad_mask = np.zeros(L, dtype=bool)
    pad_mask[pos:] = True

    return AssembledInput(
        doc_id=doc.id,
        token_ids=token_ids,
        layout=layout,
        segment_ids=segment_ids,
        position_ids=np.arange(1, L + 1),
        modality_ids=modality,
        pad_mask=pad_mask,
        first_subword_mask=first,
        token_segment=token_segment,
        token_word=token_word,
        visual_positions=visual_positions,
        boxes=boxes,
        segment_indices=tuple(s.index for s in segs),
        tokenized=tuple(tokenized),
    )


# ---------------------------------------------------------------- visual features


def roi_align(feature_map: Tensor, boxes, pooled: int = 3, stride: int = 8, batch_index=None) -> Tensor:
    """Bilinear RoIAlign with one sample at the centre of each pooled cell.

    ``feature_map`` is channels-last, [H, W, C] or [B, H, W, C]; ``boxes`` are
    (x0, y0, x1, y1) in image coordinates.  Returns [R, C, pooled, pooled].
    """
    if feature_map.ndim == 3:
        feature_map = ops.reshape(feature_map, (1,) + feature_map.shape)
    B, Hf, Wf, C = feature_map.shape
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    R = boxes.shape[0]
    bidx = np.zeros(R, dtype=np.int64) if batch_index is None else np.asarray(batch_index, dtype=np.int64)

    fb = boxes / stride
    cell = (np.arange(pooled) + 0.5) / pooled
    # sample centres in feature coordinates, pixel centres at integer + 0.5
    xs = fb[:, 0:1] + cell[None, :] * (fb[:, 2:3] - fb[:, 0:1]) - 0.5  # [R, P]
    ys = fb[:, 1:2] + cell[None, :] * (fb[:, 3:4] - fb[:, 1:2]) - 0.5
    xs = np.clip(xs, 0.0, Wf - 1)
    ys = np.clip(ys, 0.0, Hf - 1)
    x_lo = np.floor(xs).astype(np.int64)
    y_lo = np.floor(ys).astype(np.int64)
    x_hi = np.minimum(x_lo + 1, Wf - 1)
    y_hi = np.minimum(y_lo + 1, Hf - 1)
    fx = xs - x_lo
    fy = ys - y_lo

    # broadcast to [R, Py, Px]
    Y_lo, X_lo = y_lo[:, :, None], x_lo[:, None, :]
    Y_hi, X_hi = y_hi[:, :, None], x_hi[:, None, :]
    FY, FX = fy[:, :, None], fx[:, None, :]
    base = (bidx * Hf * Wf)[:, None, None]
    idx = np.stack(
        [base + Y_lo * Wf + X_lo, base + Y_lo * Wf + X_hi, base + Y_hi * Wf + X_lo, base + Y_hi * Wf + X_hi],
        axis=-1,
    )
    w = np.stack([(1 - FY) * (1 - FX), (1 - FY) * FX, FY * (1 - FX), FY * FX], axis=-1)

    table = ops.reshape(feature_map, (B * Hf * Wf, C))
    sampled = ops.bilinear_gather(table, idx.reshape(-1, 4), w.reshape(-1, 4))  # [R*P*P, C]
    sampled = ops.reshape(sampled, (R, pooled * pooled, C))
    return ops.reshape(ops.transpose(sampled, (0, 2, 1)), (R, C, pooled, pooled))


def image_tensor(images: Sequence[np.ndarray]) -> Tensor:
    """Stack uint8 pages into [B, H, W, 1] ink intensities (1 = black)."""
    arr = np.stack([1.0 - np.asarray(im, dtype=get_dtype()) / 255.0 for im in images])[..., None]
    return Tensor(arr)


class Embedder:
    """Owns every embedding table and the convolutional backbone."""

    def __init__(self, params: ParameterStore, config: ModelConfig):
        self.params = params
        self.config = config
        d = config.hidden
        for name in ("x0", "y0", "x1", "y1", "w", "h"):
            params.custom(f"emb.layout.{name}", lambda rng: _smooth_table(config.grid, d, rng))
        params.normal("emb.token", (config.vocab_size, d), std=0.1)
        params.normal("emb.segment", (config.max_len + 1, d))
        params.normal("emb.position", (config.max_len + 1, d))
        params.normal("emb.modality", (2, d))
        c_in = 1
        for k, c in enumerate(config.channels):
            params.custom(
                f"cnn.{k}.w", lambda rng, c=c, c_in=c_in: rng.normal(0, np.sqrt(2.0 / (9 * c_in)), (3, 3, c_in, c))
            )
            params.zeros(f"cnn.{k}.b", (c,))
            c_in = c
        flat = config.channels[-1] * config.pooled * config.pooled
        params.glorot("emb.visual.w", flat, d)
        params.zeros("emb.visual.b", (d,))

    def embed_layout(self, layout_idx: np.ndarray) -> Tensor:
        """Sum of the six table rows for each row of quantised indices [N, 6]."""
        layout_idx = np.asarray(layout_idx, dtype=np.int64).reshape(-1, 6)
        out = None
        for k, name in enumerate(("x0", "y0", "x1", "y1", "w", "h")):
            rows = ops.gather_rows(self.params[f"emb.layout.{name}"], layout_idx[:, k])
            out = rows if out is None else out + rows
        return out

    def backbone(self, images: Tensor) -> Tensor:
        x = images
        for k in range(len(self.config.channels)):
            x = ops.conv2d(x, self.params[f"cnn.{k}.w"], self.params[f"cnn.{k}.b"], padding=1)
            x = ops.max_pool2d(ops.relu(x), 2)
        return x

    def embed_language(self, inputs: Sequence[AssembledInput]) -> Tensor:
        """Emb_t(S) + L at every position, [B*L, d]; non-text positions hold [PAD] rows."""
        token_ids = np.concatenate([np.where(a.modality_ids == TEXT, a.token_ids, PAD_ID) for a in inputs])
        layout = np.concatenate([np.where((a.modality_ids == TEXT)[:, None], a.layout, 0) for a in inputs])
        return ops.gather_rows(self.params["emb.token"], token_ids) + self.embed_layout(layout)

    def embed_visual(self, inputs: Sequence[AssembledInput], images: Sequence[np.ndarray]) -> Tensor:
        """V0..Vn for every document, concatenated: [sum(n_b + 1), d]."""
        fmap = self.backbone(image_tensor(images))
        boxes = np.concatenate([a.boxes for a in inputs])
        bidx = np.concatenate([np.full(len(a.boxes), b) for b, a in enumerate(inputs)])
        pooled = roi_align(fmap, boxes, self.config.pooled, self.config.stride, bidx)
        flat = ops.reshape(pooled, (pooled.shape[0], -1))
        v = ops.linear(flat, self.params["emb.visual.w"], self.params["emb.visual.b"])
        layout = np.concatenate([a.layout[a.visual_positions] for a in inputs])
        return v + self.embed_layout(layout)

    def assemble(self, inputs: Sequence[AssembledInput], images: Sequence[np.ndarray]) -> Tensor:
        """Concat(T, V) + S_id + P_id + M_id as a [B*L, d] tensor."""
        L = self.config.max_len
        for a in inputs:
            if a.length != L:
                raise ValueError(f"input {a.doc_id} has length {a.length}, model expects {L}")
        text = self.embed_language(inputs)
        visual = self.embed_visual(inputs, images)
        # each position reads either its text row or its visual row from one stacked table
        source = np.arange(len(inputs) * L)
        offset = len(inputs) * L
        for b, a in enumerate(inputs):
            n = len(a.visual_positions)
            source[b * L + a.visual_positions] = offset + np.arange(n)
            offset += n
        x = ops.gather_rows(ops.concat([text, visual], axis=0), source)
        seg = np.concatenate([a.segment_ids for a in inputs])
        posn = np.concatenate([a.position_ids for a in inputs])
        mod = np.concatenate([a.modality_ids for a in inputs])
        x = x + ops.gather_rows(self.params["emb.segment"], seg)
        x = x + ops.gather_rows(self.params["emb.position"], posn)
        return x + ops.gather_rows(self.params["emb.modality"], mod)
