import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from structext.document import (
    AnnotationError,
    BBox,
    Document,
    LabelSchema,
    TextSegment,
    document_from_json,
    document_to_json,
    load_annotations,
    rescale_and_pad,
    rescale_document,
    save_annotations,
    sort_reading_order,
)

SCHEMA = LabelSchema()


def seg(i, box, text="word", label=None):
    return TextSegment(i, BBox(*box), text, label)


def fixture_json():
    return {
        "id": "fx",
        "schema": SCHEMA.to_json(),
        "segments": [
            {"index": 1, "bbox": [10, 10, 60, 20], "text": "date:", "label": "question", "token_labels": ["question"]},
            {"index": 2, "bbox": [100, 10, 160, 20], "text": "12 may", "label": "answer", "token_labels": ["answer", "answer"]},
            {"index": 3, "bbox": [10, 40, 60, 50], "text": "qty:", "label": "question"},
            {"index": 4, "bbox": [100, 40, 130, 50], "text": "7", "label": "answer"},
        ],
        "links": [[1, 2], [3, 4]],
    }


def test_bbox_validation():
    with pytest.raises(AnnotationError):
        BBox(5, 0, 4, 1)
    with pytest.raises(AnnotationError):
        BBox(-1, 0, 4, 1)
    b = BBox(2, 4, 10, 8)
    assert (b.width, b.height, b.center) == (8, 4, (6.0, 6.0))


def test_minimal_document():
    doc = document_from_json({"id": "m", "schema": SCHEMA.to_json(), "segments": [{"index": 1, "bbox": [0, 0, 1, 1], "text": "a"}]})
    assert doc.n == 1 and doc.links == frozenset()


def test_dangling_link_is_rejected():
    obj = {"id": "d", "schema": SCHEMA.to_json(), "segments": [{"index": 1, "bbox": [0, 0, 1, 1], "text": "a"}], "links": [[2, 1]]}
    with pytest.raises(AnnotationError, match="dangling"):
        document_from_json(obj)


def test_self_link_is_rejected():
    with pytest.raises(AnnotationError, match="self-link"):
        Document("x", np.zeros((4, 4), np.uint8), (seg(1, (0, 0, 1, 1)),), frozenset({(1, 1)}))


def test_malformed_record_names_index_and_field():
    obj = fixture_json()
    del obj["segments"][2]["bbox"]
    with pytest.raises(AnnotationError, match=r"record 2.*bbox"):
        document_from_json(obj)
    obj = fixture_json()
    obj["segments"][1]["text"] = 5
    with pytest.raises(AnnotationError, match=r"record 1.*text"):
        document_from_json(obj)


def test_missing_schema_is_rejected():
    obj = fixture_json()
    del obj["schema"]
    with pytest.raises(AnnotationError, match="schema"):
        document_from_json(obj)


def test_unknown_label_is_rejected():
    obj = fixture_json()
    obj["segments"][0]["label"] = "price"
    with pytest.raises(AnnotationError, match="price"):
        document_from_json(obj)


def test_fixture_round_trip_is_identical(tmp_path):
    image = (np.arange(64 * 64) % 251).astype(np.uint8).reshape(64, 64)
    doc = document_from_json(fixture_json(), image, "fx.pgm")
    save_annotations(doc, tmp_path / "fx.json")
    again = load_annotations(tmp_path / "fx.json")
    assert again == doc
    assert np.array_equal(again.image, image)
    assert document_to_json(again) == document_to_json(doc)
    assert json.loads((tmp_path / "fx.json").read_text())["links"] == [[1, 2], [3, 4]]


def test_pgm_is_binary_p5(tmp_path):
    doc = document_from_json(fixture_json(), np.full((8, 8), 200, np.uint8), "fx.pgm")
    save_annotations(doc, tmp_path / "fx.json")
    assert (tmp_path / "fx.pgm").read_bytes()[:2] == b"P5"


def test_loading_sorts_and_renumbers_with_links():
    obj = fixture_json()
    # present the segments bottom-up with shuffled indices
    obj["segments"] = [dict(s, index=10 - s["index"]) for s in reversed(obj["segments"])]
    obj["links"] = [[9, 8], [7, 6]]
    doc = document_from_json(obj)
    assert [s.text for s in doc.segments] == ["date:", "12 may", "qty:", "7"]
    assert [s.index for s in doc.segments] == [1, 2, 3, 4]
    assert doc.links == frozenset({(1, 2), (3, 4)})


def test_reading_order_examples():
    assert sort_reading_order([seg(1, (10, 0, 20, 10)), seg(2, (5, 0, 8, 10))]) == [1, 0]
    assert sort_reading_order([seg(1, (10, 0, 20, 10))]) == [0]
    below, right, left = seg(1, (0, 30, 10, 40)), seg(2, (50, 1, 60, 11)), seg(3, (0, 0, 10, 10))
    assert sort_reading_order([below, right, left]) == [2, 1, 0]


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 200), st.integers(0, 200), st.integers(1, 30), st.integers(1, 20)), min_size=0, max_size=12))
def test_reading_order_is_a_deterministic_permutation(boxes):
    segs = [seg(i + 1, (x, y, x + w, y + h)) for i, (x, y, w, h) in enumerate(boxes)]
    perm = sort_reading_order(segs)
    assert sorted(perm) == list(range(len(segs)))
    assert perm == sort_reading_order(segs)


def test_rescale_examples():
    img, scale, pad = rescale_and_pad(np.zeros((512, 512), np.uint8), 512)
    assert scale == 1.0 and pad == (0, 0) and img.shape == (512, 512)
    # 1024 wide x 512 high -> half size, padding at the bottom
    img, scale, pad = rescale_and_pad(np.zeros((512, 1024), np.uint8), 512)
    assert scale == 0.5 and pad == (0, 256)
    assert BBox(100, 100, 200, 200).scaled(scale) == BBox(50, 50, 100, 100)
    # 256 wide x 512 high -> unchanged scale, 256 px of padding on the right
    img, scale, pad = rescale_and_pad(np.zeros((512, 256), np.uint8), 512)
    assert scale == 1.0 and pad == (256, 0)
    with pytest.raises(AnnotationError):
        rescale_and_pad(np.zeros((0, 5), np.uint8), 512)


@settings(max_examples=30, deadline=None)
@given(st.integers(20, 300), st.integers(20, 300), st.data())
def test_rescaled_boxes_stay_inside_the_page(w, h, data):
    x0 = data.draw(st.integers(0, w - 2))
    y0 = data.draw(st.integers(0, h - 2))
    x1 = data.draw(st.integers(x0 + 1, w))
    y1 = data.draw(st.integers(y0 + 1, h))
    doc = Document("r", np.full((h, w), 255, np.uint8), (seg(1, (x0, y0, x1, y1)),))
    out = rescale_document(doc, 64)
    b = out.segments[0].bbox
    assert out.image.shape == (64, 64)
    assert 0 <= b.x0 <= b.x1 <= 64 and 0 <= b.y0 <= b.y1 <= 64
