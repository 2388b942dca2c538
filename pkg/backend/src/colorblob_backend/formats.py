"""Readers and writers for the engine's on-disk interchange formats.

Implemented from the documented formats only (manifest JSON schema and the
12-byte-header raster), deliberately independent of the engine's own code.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

RASTER_MAGIC = b"TSR1"
_HEADER = struct.Struct("<4sII")


def read_raster(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    magic, w, h = _HEADER.unpack_from(data)
    if magic != RASTER_MAGIC:
        raise ValueError(f"{path}: not a raster file")
    if len(data) != _HEADER.size + w * h * 3:
        raise ValueError(f"{path}: truncated raster")
    return np.frombuffer(data, dtype=np.uint8, offset=_HEADER.size).reshape(h, w, 3)


def load_manifest(path: str | Path) -> dict:
    path = Path(path)
    raw = json.loads(path.read_text(encoding="utf-8"))
    raw["_base_dir"] = path.parent
    return raw


def image_path(manifest: dict, image: dict) -> Path:
    return manifest["_base_dir"] / image["file"]


def write_detections_manifest(path: str | Path, categories: list[dict],
                              images: list[dict], detections: list[dict]) -> None:
    """Detections manifest with the engine's 6-decimal float convention."""

    def fnum(v: float) -> str:
        return f"{float(v):.6f}"

    lines = ['{', '"version": "1.0",', '"kind": "detections",']
    cat_lines = [f'{{"id": {c["id"]}, "name": {json.dumps(c["name"])}}}' for c in categories]
    lines.append('"categories": [' + ("\n" + ",\n".join(cat_lines) + "\n]" if cat_lines else "]") + ",")
    img_lines = [
        f'{{"id": {im["id"]}, "file": {json.dumps(im["file"])}, "width": {im["width"]}, '
        f'"height": {im["height"]}, "game_id": {json.dumps(im["game_id"])}}}'
        for im in images
    ]
    lines.append('"images": [' + ("\n" + ",\n".join(img_lines) + "\n]" if img_lines else "]") + ",")
    det_lines = [
        f'{{"id": {d["id"]}, "image_id": {d["image_id"]}, "category_id": {d["category_id"]}, '
        f'"bbox": [{fnum(d["bbox"][0])}, {fnum(d["bbox"][1])}, {fnum(d["bbox"][2])}, '
        f'{fnum(d["bbox"][3])}], "score": {fnum(d["score"])}}}'
        for d in detections
    ]
    lines.append('"annotations": [' + ("\n" + ",\n".join(det_lines) + "\n]" if det_lines else "]"))
    lines.append('}')
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
