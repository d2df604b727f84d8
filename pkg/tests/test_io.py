import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from robustdet.core import DetectionSet, GroundTruthSet, PixelImage, Sample
from robustdet.io import (format_records, load_dataset, load_images, parse_records, read_records, save_dataset,
                          save_images, write_records)

ids = st.text("abcdefghijklmnopqrstuvwxyz0123456789-_.", min_size=1, max_size=8)
coords = st.floats(0, 500, allow_nan=False, width=32)


@st.composite
def det_sets(draw):
    n = draw(st.integers(0, 5))
    boxes = []
    for _ in range(n):
        x0, y0 = draw(coords), draw(coords)
        boxes.append([x0, y0, x0 + draw(st.floats(0.5, 50, width=32)), y0 + draw(st.floats(0.5, 50, width=32))])
    labels = draw(st.lists(st.integers(0, 9), min_size=n, max_size=n))
    scores = draw(st.lists(st.floats(0, 1, width=32), min_size=n, max_size=n))
    return DetectionSet(np.asarray(boxes).reshape(-1, 4), labels, scores)


@settings(max_examples=100, deadline=None)
@given(st.dictionaries(ids, det_sets(), max_size=4))
def test_detection_records_round_trip(items):
    back = parse_records(format_records(items), "det")
    assert set(back) == set(items)
    for k, d in items.items():
        assert np.array_equal(back[k].boxes, d.boxes)
        assert np.array_equal(back[k].labels, d.labels)
        assert np.array_equal(back[k].scores, d.scores)


def test_gt_records_and_empty_images(tmp_path):
    items = {"a": GroundTruthSet([[0, 0, 1.5, 2]], [2]), "b": GroundTruthSet(np.zeros((0, 4)), [])}
    write_records(tmp_path / "gt.txt", items)
    assert (tmp_path / "gt.txt").read_text() == "a 2 0 0 1.5 2\nb\n"
    back = read_records(tmp_path / "gt.txt")
    assert back["b"].K == 0 and back["a"].labels.tolist() == [2]


def test_record_errors():
    with pytest.raises(ValueError, match="line 2"):
        parse_records("a 0 0 0 1 1\nb 0 0 0 1\n", "gt")
    with pytest.raises(ValueError, match="whitespace"):
        format_records({"a b": GroundTruthSet([[0, 0, 1, 1]], [0])})
    with pytest.raises(ValueError):
        parse_records("", "boxes")
    assert parse_records("# comment\n\n", "gt") == {}


def test_images_and_dataset_round_trip(tmp_path, tiny_data):
    samples = tiny_data.samples[:3]
    save_images(tmp_path / "x.npz", [s.image for s in samples], {"k": 1})
    imgs, meta = load_images(tmp_path / "x.npz")
    assert meta == {"k": 1}
    assert all(np.array_equal(a.data, s.image.data) and a.id == s.image.id for a, s in zip(imgs, samples))
    save_dataset(tmp_path / "ds", samples)
    back, _ = load_dataset(tmp_path / "ds")
    assert [s.image.id for s in back] == [s.image.id for s in samples]
    assert all(np.array_equal(a.gt.boxes, b.gt.boxes) for a, b in zip(back, samples))


def test_dataset_missing_gt(tmp_path):
    save_images(tmp_path / "images.npz", [PixelImage(np.zeros((3, 2, 2)), "lonely")])
    (tmp_path / "gt.txt").write_text("")
    with pytest.raises(ValueError, match="lonely"):
        load_dataset(tmp_path)
