"""On-disk formats: line-delimited box records and an npz array container."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .core import DetectionSet, GroundTruthSet, PixelImage, Sample

# A record line is ``<image-id> <class> <xmin> <ymin> <xmax> <ymax> [<score>]``.
# An image without boxes is written as a bare ``<image-id>`` line so it survives
# a round trip. Ids must not contain whitespace.


def _num(v) -> str:
    # shortest text that parses back to the same float64
    s = repr(float(v))
    return s[:-2] if s.endswith(".0") else s


def _check_id(image_id: str) -> str:
    if not image_id or any(ch.isspace() for ch in image_id):
        raise ValueError(f"image id {image_id!r} is empty or contains whitespace")
    return image_id


def format_records(items: Mapping[str, GroundTruthSet | DetectionSet]) -> str:
    lines = []
    for image_id, rec in items.items():
        _check_id(image_id)
        if len(rec) == 0:
            lines.append(image_id)
            continue
        scores = getattr(rec, "scores", None)
        for i, (box, c) in enumerate(zip(rec.boxes, rec.labels)):
            fields = [image_id, str(int(c))] + [_num(v) for v in box]
            if scores is not None:
                fields.append(_num(scores[i]))
            lines.append(" ".join(fields))
    return "\n".join(lines) + ("\n" if lines else "")


def parse_records(text: str, kind: str = "gt") -> dict[str, GroundTruthSet | DetectionSet]:
    """Inverse of :func:`format_records`; ``kind`` is ``"gt"`` or ``"det"``."""
    if kind not in ("gt", "det"):
        raise ValueError("kind must be 'gt' or 'det'")
    width = 6 if kind == "gt" else 7
    rows: dict[str, list] = {}
    for n, line in enumerate(text.splitlines(), 1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        rows.setdefault(parts[0], [])
        if len(parts) == 1:
            continue
        if len(parts) != width:
            raise ValueError(f"line {n}: expected {width} fields for {kind} records, got {len(parts)}")
        rows[parts[0]].append([int(parts[1])] + [float(v) for v in parts[2:]])
    out = {}
    for image_id, rs in rows.items():
        a = np.asarray(rs, dtype=np.float64).reshape(-1, width - 1)
        labels = a[:, 0].astype(np.int64)
        if kind == "gt":
            out[image_id] = GroundTruthSet(a[:, 1:5], labels)
        else:
            out[image_id] = DetectionSet(a[:, 1:5], labels, a[:, 5])
    return out


def write_records(path: str | Path, items: Mapping[str, GroundTruthSet | DetectionSet]) -> None:
    Path(path).write_text(format_records(items))


def read_records(path: str | Path, kind: str = "gt") -> dict:
    return parse_records(Path(path).read_text(), kind)


# ----------------------------------------------------------------- arrays

def save_images(path: str | Path, images: Sequence[PixelImage], meta: dict | None = None) -> None:
    """Store same-shaped images losslessly (float32) in one ``.npz`` with their ids."""
    if not images:
        data = np.zeros((0, 3, 1, 1), np.float32)
    else:
        data = np.stack([im.data for im in images]).astype(np.float32)
    ids = np.asarray([_check_id(im.id) for im in images], dtype=str)
    np.savez_compressed(path, images=data, ids=ids, meta=np.asarray(json.dumps(meta or {}, sort_keys=True)))


def load_images(path: str | Path) -> tuple[list[PixelImage], dict]:
    with np.load(path, allow_pickle=False) as z:
        data, ids, meta = z["images"], z["ids"], json.loads(str(z["meta"]))
    return [PixelImage(d, str(i)) for d, i in zip(data, ids)], meta


def save_dataset(directory: str | Path, samples: Sequence[Sample], meta: dict | None = None) -> None:
    """``images.npz`` plus ``gt.txt`` records, keyed by image id."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_images(d / "images.npz", [s.image for s in samples], meta)
    write_records(d / "gt.txt", {s.image.id: s.gt for s in samples})


def load_dataset(directory: str | Path) -> tuple[list[Sample], dict]:
    d = Path(directory)
    images, meta = load_images(d / "images.npz")
    gts = read_records(d / "gt.txt", "gt")
    missing = [im.id for im in images if im.id not in gts]
    if missing:
        raise ValueError(f"{d}: no ground-truth records for {missing[:5]}")
    samples = []
    for im in images:
        g = gts[im.id]
        samples.append(Sample(im, GroundTruthSet(g.boxes, g.labels, image_size=(im.height, im.width))))
    return samples, meta
