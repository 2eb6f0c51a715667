"""Synthetic key/value form pages with blocky glyphs, labels and links.

Pages follow a fixed row grid: an optional centred header, then rows that hold
either a ``key: value`` pair (question linked to answer) or a distractor line.
Words are 3-5 characters and are separated by two glyph cells, so a
segment's ink width grows strictly with its word count for up to four words.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .document import BBox, Document, LabelSchema, TextSegment, save_annotations

KEY_PHRASES = (
    "name", "date", "due date", "tax rate", "net cost", "item code", "unit cost", "zip code",
    "city", "ship date", "bill addr", "acct num", "fee", "qty", "paid sum", "ref code", "tel num",
    "fax num", "dept code", "case num", "plan type", "term", "age", "unit rate", "due sum",
    "tax due date", "acct ref num", "net due sum",
)
NAME_WORDS = (
    "john", "mary", "york", "lima", "oslo", "rome", "kent", "ross", "lee", "ann", "paul", "rita",
    "cole", "dean", "ford", "gray", "hill", "park", "wood", "west", "east", "main", "oak", "elm", "bay",
)
UNITS = ("usd", "eur", "kgs", "pcs", "hrs")
HEADERS = ("tax form", "memo", "bill memo", "sale memo", "ship form", "case file", "work log", "plan form", "fee list")
FILLER = ("note", "see", "copy", "void", "page", "ref", "misc", "sign")

GLYPH_W, GLYPH_H = 5, 7
CELL_W, CELL_H = 6, 8  # glyph plus one blank column / row
WORD_GAP = 2  # cells between words
MARGIN = 8
HEADER_Y = 8
FIRST_ROW_Y = 28
ROW_PITCH = 16
VALUE_X = 136

SCHEMA = LabelSchema()
QUESTION, ANSWER, HEADER, OTHER = (SCHEMA.id_of(c) for c in ("question", "answer", "header", "other"))


class LayoutOverflowError(ValueError):
    """The requested rows do not fit on the page."""


@dataclass(frozen=True)
class GenConfig:
    seed: int = 7
    page_size: int = 256
    rows: tuple[int, int] = (2, 6)
    distractors: tuple[int, int] = (1, 3)
    header_prob: float = 0.5
    font_cell: int = 1  # integer glyph scale
    noise: float = 0.01

    def __post_init__(self):
        if not (0.0 <= self.header_prob <= 1.0 and 0.0 <= self.noise <= 1.0):
            raise ValueError("header_prob and noise must lie in [0, 1]")
        if self.rows[0] < 0 or self.rows[0] > self.rows[1]:
            raise ValueError(f"invalid rows range {self.rows}")
        if self.distractors[0] < 0 or self.distractors[0] > self.distractors[1]:
            raise ValueError(f"invalid distractors range {self.distractors}")
        if self.font_cell < 1:
            raise ValueError("font_cell must be >= 1")


@lru_cache(maxsize=None)
def glyph(ch: str) -> np.ndarray:
    """Deterministic 5x7 bitmap; outer columns always carry ink so ink width is exact."""
    if ch == " ":
        return np.zeros((GLYPH_H, GLYPH_W), dtype=bool)
    digest = hashlib.blake2b(ch.encode("utf-8"), digest_size=8).digest()
    bits = np.unpackbits(np.frombuffer(digest, dtype=np.uint8))[: GLYPH_H * GLYPH_W]
    g = bits.reshape(GLYPH_H, GLYPH_W).astype(bool)
    for col in (0, GLYPH_W - 1):
        if not g[:, col].any():
            g[digest[0] % GLYPH_H, col] = True
    return g


def text_cells(text: str) -> int:
    words = text.split()
    return sum(len(w) for w in words) + WORD_GAP * max(len(words) - 1, 0)


def render_text(image: np.ndarray, text: str, x: int, y: int, scale: int) -> BBox:
    """Draw ``text`` with its top-left glyph corner at (x, y); returns a bbox with a 1px margin."""
    cx = x
    for wi, word in enumerate(text.split()):
        if wi:
            cx += WORD_GAP * CELL_W * scale
        for ch in word:
            g = np.kron(glyph(ch), np.ones((scale, scale), dtype=bool))
            image[y:y + g.shape[0], cx:cx + g.shape[1]][g] = 0
            cx += CELL_W * scale
    ink_right = cx - (CELL_W - GLYPH_W) * scale
    return BBox(float(x - 1), float(y - 1), float(ink_right + 1), float(y + GLYPH_H * scale + 1))


def _number(rng: np.random.Generator) -> str:
    fmt = rng.integers(5)
    if fmt == 0:
        return f"{rng.integers(1, 10)}.{rng.integers(0, 100):02d}"
    if fmt == 1:
        return f"{rng.integers(10, 100)}.{rng.integers(0, 10)}"
    if fmt == 2:
        return str(rng.integers(100, 1000))
    if fmt == 3:
        return str(rng.integers(1000, 10000))
    return f"{rng.integers(1, 10)}.{rng.integers(0, 10)}"


def _value(rng: np.random.Generator) -> tuple[str, list[int]]:
    kind = rng.integers(4)
    if kind == 0:
        words = [_number(rng)]
    elif kind == 1:
        words = [str(rng.choice(UNITS)), _number(rng)]
    elif kind == 2:
        words = [_number(rng), str(rng.choice(UNITS))]
    else:
        words = [str(w) for w in rng.choice(NAME_WORDS, size=rng.integers(1, 3), replace=False)]
    labels = [OTHER if w in UNITS else ANSWER for w in words]
    return " ".join(words), labels


def _distractor(rng: np.random.Generator) -> tuple[str, bool]:
    """Returns (text, numeric-only); numeric-only distractors may sit in the value column."""
    kind = rng.integers(4)
    if kind == 0:
        return str(rng.choice(KEY_PHRASES)), False
    if kind == 1:
        return f"{rng.choice(KEY_PHRASES)} {_number(rng)}", False
    if kind == 2:
        return " ".join(_number(rng) for _ in range(rng.integers(1, 3))), True
    words = list(rng.choice(FILLER + NAME_WORDS, size=rng.integers(2, 5), replace=False))
    return " ".join(str(w) for w in words), False


def generate_page(config: GenConfig, index: int) -> Document:
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, index]))
    s = config.font_cell
    size = config.page_size
    n_rows = int(rng.integers(config.rows[0], config.rows[1] + 1))
    n_dist = int(rng.integers(config.distractors[0], config.distractors[1] + 1))
    pitch = ROW_PITCH * s
    first = FIRST_ROW_Y * s
    if first + (n_rows + n_dist) * pitch > size - MARGIN or VALUE_X * s + 18 * CELL_W * s > size:
        raise LayoutOverflowError(
            f"{n_rows} key rows + {n_dist} distractors at font cell {s} do not fit a {size}px page"
        )
    image = np.full((size, size), 255, dtype=np.uint8)
    segments: list[TextSegment] = []
    links = []

    def place(text, x, y, label, token_labels):
        bbox = render_text(image, text, x, y, s)
        segments.append(TextSegment(len(segments) + 1, bbox, text, label, tuple(token_labels)))
        return len(segments)

    if rng.random() < config.header_prob:
        text = str(rng.choice(HEADERS))
        x = (size - text_cells(text) * CELL_W * s) // 2
        place(text, x, HEADER_Y * s, HEADER, [HEADER] * len(text.split()))

    slots = ["pair"] * n_rows + ["distractor"] * n_dist
    rng.shuffle(slots)
    for r, kind in enumerate(slots):
        y = first + r * pitch
        if kind == "pair":
            key = f"{rng.choice(KEY_PHRASES)}:"
            k = place(key, MARGIN, y, QUESTION, [QUESTION] * len(key.split()))
            value, value_labels = _value(rng)
            v = place(value, VALUE_X * s, y, ANSWER, value_labels)
            links.append((k, v))
        else:
            text, numeric = _distractor(rng)
            x = VALUE_X * s if numeric and rng.random() < 0.5 else MARGIN
            place(text, x, y, OTHER, [OTHER] * len(text.split()))

    if config.noise > 0:
        flips = rng.random(image.shape) < config.noise
        image[flips] = 255 - image[flips]
    return Document(f"doc_{index:05d}", image, tuple(segments), frozenset(links), SCHEMA, f"doc_{index:05d}.pgm")


def generate(config: GenConfig, count: int, start: int = 0) -> list[Document]:
    if count < 1:
        raise ValueError("count must be >= 1")
    return [generate_page(config, i) for i in range(start, start + count)]


def write_corpus(docs, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for doc in docs:
        path = out / f"{doc.id}.json"
        save_annotations(doc, path)
        paths.append(path)
    return paths


def ink_width(doc: Document, seg: TextSegment) -> int:
    """Horizontal span of ink columns inside a segment's bbox (noise-free pages)."""
    b = seg.bbox
    crop = doc.image[int(b.y0):int(np.ceil(b.y1)), int(b.x0):int(np.ceil(b.x1))]
    cols = np.nonzero((crop == 0).any(axis=0))[0]
    return int(cols[-1] - cols[0] + 1) if cols.size else 0
