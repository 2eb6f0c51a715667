"""Documents, segments and label schemas; annotation JSON + PGM ingestion."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image


class AnnotationError(ValueError):
    """Malformed or inconsistent annotation file."""


@dataclass(frozen=True)
class BBox:
    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        if not (0 <= self.x0 <= self.x1 and 0 <= self.y0 <= self.y1):
            raise AnnotationError(f"invalid bbox {self.as_list()}")

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    @property
    def center(self) -> tuple[float, float]:
        return ((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)

    def as_list(self) -> list[float]:
        return [self.x0, self.y0, self.x1, self.y1]

    def scaled(self, s: float) -> "BBox":
        return BBox(self.x0 * s, self.y0 * s, self.x1 * s, self.y1 * s)


@dataclass(frozen=True)
class LabelSchema:
    classes: tuple[str, ...] = ("question", "answer", "header", "other")
    background: Optional[str] = "other"
    link: str = "key_value"

    def __post_init__(self):
        if len(set(self.classes)) != len(self.classes):
            raise AnnotationError(f"duplicate class names in schema: {self.classes}")
        if self.background is not None and self.background not in self.classes:
            raise AnnotationError(f"background class {self.background!r} not in schema")

    def id_of(self, name: str) -> int:
        try:
            return self.classes.index(name)
        except ValueError:
            raise AnnotationError(f"unknown class {name!r}") from None

    @property
    def background_id(self) -> Optional[int]:
        return None if self.background is None else self.classes.index(self.background)

    def to_json(self) -> dict:
        return {"classes": list(self.classes), "background": self.background, "link": self.link}

    @classmethod
    def from_json(cls, obj: dict) -> "LabelSchema":
        return cls(tuple(obj["classes"]), obj.get("background"), obj.get("link", "key_value"))


@dataclass(frozen=True)
class TextSegment:
    index: int
    bbox: BBox
    text: str
    label: Optional[int] = None
    token_labels: Optional[tuple[int, ...]] = None  # one per whitespace word

    @property
    def words(self) -> list[str]:
        return self.text.split()


@dataclass(frozen=True, eq=False)
class Document:
    id: str
    image: np.ndarray  # uint8, H x W
    segments: tuple[TextSegment, ...]
    links: frozenset = field(default_factory=frozenset)
    schema: LabelSchema = field(default_factory=LabelSchema)
    image_path: Optional[str] = None

    def __post_init__(self):
        indices = [s.index for s in self.segments]
        if len(set(indices)) != len(indices):
            raise AnnotationError(f"document {self.id}: duplicate segment indices")
        known = set(indices)
        for a, b in self.links:
            if a == b:
                raise AnnotationError(f"document {self.id}: self-link ({a}, {b})")
            if a not in known or b not in known:
                raise AnnotationError(f"document {self.id}: dangling link ({a}, {b})")

    @property
    def n(self) -> int:
        return len(self.segments)

    @property
    def height(self) -> int:
        return int(self.image.shape[0])

    @property
    def width(self) -> int:
        return int(self.image.shape[1])

    def segment(self, index: int) -> TextSegment:
        for s in self.segments:
            if s.index == index:
                return s
        raise KeyError(index)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Document):
            return NotImplemented
        return (
            self.id == other.id
            and self.segments == other.segments
            and self.links == other.links
            and self.schema == other.schema
            and self.image.shape == other.image.shape
            and np.array_equal(self.image, other.image)
        )

    __hash__ = None


def sort_reading_order(segments: Sequence[TextSegment]) -> list[int]:
    """Permutation ordering segments top-left to bottom-right.

    Key is (row band, x0) with row band = floor(y_center / median height);
    Python's sort is stable, so equal keys keep input order.
    """
    if not segments:
        return []
    heights = [s.bbox.height for s in segments]
    band = float(np.median(heights))
    if band <= 0:
        band = 1.0

    def key(i):
        s = segments[i]
        return (int(np.floor(s.bbox.center[1] / band)), s.bbox.x0)

    return sorted(range(len(segments)), key=key)


def reorder(segments: Sequence[TextSegment], links) -> tuple[tuple[TextSegment, ...], frozenset]:
    """Sort segments into reading order and renumber them 1..n, remapping links."""
    perm = sort_reading_order(segments)
    mapping = {segments[p].index: k + 1 for k, p in enumerate(perm)}
    ordered = tuple(replace(segments[p], index=k + 1) for k, p in enumerate(perm))
    return ordered, frozenset((mapping[a], mapping[b]) for a, b in links)


def rescale_and_pad(image: np.ndarray, target: int, fill: int = 0) -> tuple[np.ndarray, float, tuple[int, int]]:
    """Aspect-preserving resize to fit ``target x target``, padding bottom/right with ``fill``.

    Returns (new image, scale, (pad_right, pad_bottom)).
    """
    h, w = image.shape[:2]
    if h == 0 or w == 0:
        raise AnnotationError("cannot rescale an image with zero area")
    scale = min(target / w, target / h)
    nw, nh = max(1, int(round(w * scale))), max(1, int(round(h * scale)))
    if (nw, nh) == (w, h):
        resized = np.asarray(image, dtype=np.uint8)
    else:
        resized = np.asarray(Image.fromarray(np.asarray(image, dtype=np.uint8)).resize((nw, nh), Image.BILINEAR))
    out = np.full((target, target), fill, dtype=np.uint8)
    out[:nh, :nw] = resized
    return out, scale, (target - nw, target - nh)


def rescale_document(doc: Document, target: int, fill: int = 255) -> Document:
    if doc.width == target and doc.height == target:
        return doc
    image, scale, _ = rescale_and_pad(doc.image, target, fill)
    segs = []
    for s in doc.segments:
        b = s.bbox.scaled(scale)
        b = BBox(min(b.x0, target), min(b.y0, target), min(b.x1, target), min(b.y1, target))
        segs.append(replace(s, bbox=b))
    return replace(doc, image=image, segments=tuple(segs))


# ---------------------------------------------------------------- file IO


def read_pgm(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode != "L":
            im = im.convert("L")
        return np.asarray(im, dtype=np.uint8).copy()


def write_pgm(path, image: np.ndarray) -> None:
    Image.fromarray(np.asarray(image, dtype=np.uint8), mode="L").save(path, format="PPM")


def _parse_segment(rec: dict, k: int, schema: LabelSchema) -> TextSegment:
    def need(name):
        if name not in rec:
            raise AnnotationError(f"segment record {k}: missing field {name!r}")
        return rec[name]

    try:
        index = int(need("index"))
        coords = [float(c) for c in need("bbox")]
        if len(coords) != 4:
            raise AnnotationError(f"segment record {k}: bbox must have 4 coordinates")
        bbox = BBox(*coords)
    except AnnotationError as exc:
        raise AnnotationError(f"segment record {k}: {exc}") from None
    except (TypeError, ValueError):
        raise AnnotationError(f"segment record {k}: field 'index' or 'bbox' is malformed") from None
    text = need("text")
    if not isinstance(text, str):
        raise AnnotationError(f"segment record {k}: field 'text' must be a string")
    label = rec.get("label")
    label_id = None if label is None else schema.id_of(label)
    token_labels = rec.get("token_labels")
    if token_labels is not None:
        if len(token_labels) != len(text.split()):
            raise AnnotationError(f"segment record {k}: field 'token_labels' length != word count")
        token_labels = tuple(schema.id_of(t) for t in token_labels)
    return TextSegment(index, bbox, text, label_id, token_labels)


def document_from_json(obj: dict, image: Optional[np.ndarray] = None, image_path: Optional[str] = None) -> Document:
    if "schema" not in obj:
        raise AnnotationError("annotation has no 'schema' section")
    schema = LabelSchema.from_json(obj["schema"])
    records = obj.get("segments")
    if not isinstance(records, list):
        raise AnnotationError("annotation field 'segments' must be a list")
    segments = [_parse_segment(rec, k, schema) for k, rec in enumerate(records)]
    links = []
    for k, pair in enumerate(obj.get("links", [])):
        if not (isinstance(pair, (list, tuple)) and len(pair) == 2):
            raise AnnotationError(f"link record {k}: expected [from, to]")
        links.append((int(pair[0]), int(pair[1])))
    known = {s.index for s in segments}
    for a, b in links:
        if a not in known or b not in known:
            raise AnnotationError(f"dangling link ({a}, {b}): segment indices {sorted(known)}")
    ordered, link_set = reorder(segments, links)
    if image is None:
        image = np.zeros((0, 0), dtype=np.uint8)
    return Document(str(obj.get("id", "")), image, ordered, link_set, schema, image_path)


def document_to_json(doc: Document) -> dict:
    classes = doc.schema.classes
    segs = []
    for s in doc.segments:
        rec = {
            "index": s.index,
            "bbox": s.bbox.as_list(),
            "text": s.text,
            "label": None if s.label is None else classes[s.label],
        }
        if s.token_labels is not None:
            rec["token_labels"] = [classes[t] for t in s.token_labels]
        segs.append(rec)
    return {
        "id": doc.id,
        "image_path": doc.image_path,
        "schema": doc.schema.to_json(),
        "segments": segs,
        "links": sorted([a, b] for a, b in doc.links),
    }


def load_annotations(path, target: Optional[int] = None) -> Document:
    """Read an annotation JSON and its PGM image (resolved relative to the JSON file)."""
    path = Path(path)
    try:
        obj = json.loads(path.read_text())
    except OSError as exc:
        raise AnnotationError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise AnnotationError(f"{path}: invalid JSON ({exc})") from exc
    image = None
    image_path = obj.get("image_path")
    if image_path:
        img_file = Path(image_path)
        if not img_file.is_absolute():
            img_file = path.parent / img_file
        image = read_pgm(img_file)
    doc = document_from_json(obj, image, image_path)
    if target is not None and doc.image.size:
        doc = rescale_document(doc, target)
    return doc


def save_annotations(doc: Document, path, write_image: bool = True) -> None:
    path = Path(path)
    obj = document_to_json(doc)
    if write_image and doc.image.size:
        image_name = doc.image_path or path.with_suffix(".pgm").name
        obj["image_path"] = image_name
        write_pgm(path.parent / image_name, doc.image)
    path.write_text(json.dumps(obj, indent=1))


def load_directory(directory, target: Optional[int] = None) -> list[Document]:
    directory = Path(directory)
    if not directory.is_dir():
        raise AnnotationError(f"data directory {directory} does not exist")
    files = sorted(directory.glob("*.json"))
    if not files:
        raise AnnotationError(f"data directory {directory} contains no annotation files")
    return [load_annotations(f, target) for f in files]
