"""JSON-lines record files.

Every record carries ``"schema": SCHEMA_VERSION``.  Files written by the
pipeline (one JSON object per line, keys sorted):

``images.jsonl``      image_id, width, height, boxes, pixels, scene
                      (pixels = {"encoding": "zlib+base64", "dtype": "uint8",
                      "shape": [H, W, 3], "data": ...}; scene is the oracle
                      object list, absent for real images)
``oracle_dc.jsonl``   image_id, box_index, box, caption
``oracle_qa.jsonl``   image_id, box_index, box, caption, qtype, question, answer
``captions.jsonl``    generated dense captions: image_id, box_index, box,
                      caption_index, caption, token_ids, truncated
``candidates.jsonl``  image_id, box_index, box, caption_index, caption, qtype,
                      sample_index, question, generator_answer, token_ids,
                      parse_status
``filtered.jsonl``    parsed candidates plus filter_answer and kept
``qa.jsonl``          the kept QA pairs (final dataset)
``dc.jsonl``          the dense captions (final dataset; never filtered)
"""

from __future__ import annotations

import base64
import json
import os
import zlib
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .microworld import ImageRecord, OracleCaption, OracleQA, SceneObject
from .vocab import BoundingBox

SCHEMA_VERSION = 1


class RecordError(ValueError):
    pass


def dumps(record: dict) -> str:
    return json.dumps({"schema": SCHEMA_VERSION, **record}, sort_keys=True, separators=(",", ":"))


def write_jsonl(path: str | os.PathLike, records: Iterable[dict]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(dumps(rec) + "\n")
            n += 1
    return n


def append_jsonl(fh, records: Iterable[dict]) -> None:
    fh.write("".join(dumps(r) + "\n" for r in records))


def read_jsonl(path: str | os.PathLike, errors: list | None = None) -> Iterator[dict]:
    """Yield records; malformed lines go to ``errors`` if given, otherwise raise."""
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                if not isinstance(rec, dict):
                    raise RecordError("record is not an object")
            except (json.JSONDecodeError, RecordError) as exc:
                if errors is None:
                    raise RecordError(f"{path}:{lineno}: {exc}") from exc
                errors.append((str(path), lineno, str(exc)))
                continue
            yield rec


def count_lines(path: str | os.PathLike) -> int:
    with open(path, encoding="utf-8") as fh:
        return sum(1 for line in fh if line.strip())


def encode_pixels(pixels: np.ndarray) -> dict:
    arr = np.ascontiguousarray(pixels, dtype=np.uint8)
    return {
        "encoding": "zlib+base64",
        "dtype": "uint8",
        "shape": list(arr.shape),
        "data": base64.b64encode(zlib.compress(arr.tobytes(), 6)).decode("ascii"),
    }


def decode_pixels(d: dict) -> np.ndarray:
    if d.get("encoding") != "zlib+base64":
        raise RecordError(f"unsupported pixel encoding {d.get('encoding')!r}")
    raw = zlib.decompress(base64.b64decode(d["data"]))
    return np.frombuffer(raw, dtype=np.uint8).reshape(d["shape"]).copy()


def image_to_dict(rec: ImageRecord) -> dict:
    return {
        "image_id": rec.image_id,
        "width": rec.width,
        "height": rec.height,
        "boxes": [b.as_list() for b in rec.boxes],
        "pixels": encode_pixels(rec.pixels),
        "scene": [o.to_dict() for o in rec.scene],
    }


def image_from_dict(d: dict) -> ImageRecord:
    pixels = decode_pixels(d["pixels"])
    if pixels.shape[:2] != (d["height"], d["width"]):
        raise RecordError(f"{d['image_id']}: pixel shape disagrees with width/height")
    boxes = [BoundingBox.from_list(b).validate(d["width"], d["height"]) for b in d["boxes"]]
    scene = [SceneObject.from_dict(o) for o in d.get("scene", [])]
    return ImageRecord(d["image_id"], pixels, boxes, scene)


def load_images(path: str | os.PathLike) -> list[ImageRecord]:
    return [image_from_dict(d) for d in read_jsonl(path)]


def oracle_dc_to_dict(c: OracleCaption) -> dict:
    return {"image_id": c.image_id, "box_index": c.box_index, "box": c.box.as_list(), "caption": c.caption}


def oracle_qa_to_dict(q: OracleQA) -> dict:
    return {"image_id": q.image_id, "box_index": q.box_index, "box": q.box.as_list(), "caption": q.caption,
            "qtype": q.qtype, "question": q.question, "answer": q.answer}


def oracle_qa_from_dict(d: dict) -> OracleQA:
    return OracleQA(d["image_id"], d["box_index"], BoundingBox.from_list(d["box"]), d["caption"], d["qtype"],
                    d["question"], d["answer"])


def oracle_dc_from_dict(d: dict) -> OracleCaption:
    return OracleCaption(d["image_id"], d["box_index"], BoundingBox.from_list(d["box"]), d["caption"])


def write_world(out_dir: str | os.PathLike, images, captions, qas) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_jsonl(out / "images.jsonl", (image_to_dict(r) for r in images))
    write_jsonl(out / "oracle_dc.jsonl", (oracle_dc_to_dict(c) for c in captions))
    write_jsonl(out / "oracle_qa.jsonl", (oracle_qa_to_dict(q) for q in qas))
