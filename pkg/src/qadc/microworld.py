"""Procedural shape/colour scenes with free ground truth.

Each image holds 1-3 objects with distinct shapes and colours, one per
horizontal third of the canvas, so every referring expression used by the
question templates resolves to at most one object.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .vocab import BoundingBox

COLOR_RGB = {
    "red": (220, 40, 40),
    "green": (40, 200, 60),
    "blue": (50, 90, 235),
    "yellow": (235, 220, 50),
    "purple": (165, 60, 210),
}
POSITIONS = ("left", "middle", "right")
YES, NO = "yes", "no"


@dataclass
class MicroWorldSpec:
    height: int = 64
    width: int = 64
    shapes: tuple[str, ...] = ("square", "circle", "triangle")
    colors: tuple[str, ...] = tuple(COLOR_RGB)
    sizes: dict = field(default_factory=lambda: {"small": (7, 11), "large": (15, 19)})
    min_objects: int = 1
    max_objects: int = 3
    background: tuple[int, int, int] = (24, 24, 24)
    noise: int = 8
    qtypes: tuple[str, ...] = ("what", "how", "where", "which", "binary")


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    size: str
    position: str
    box: BoundingBox

    def to_dict(self) -> dict:
        return {"shape": self.shape, "color": self.color, "size": self.size,
                "position": self.position, "box": self.box.as_list()}

    @classmethod
    def from_dict(cls, d: dict) -> "SceneObject":
        return cls(d["shape"], d["color"], d["size"], d["position"], BoundingBox.from_list(d["box"]))


@dataclass
class ImageRecord:
    image_id: str
    pixels: np.ndarray  # uint8 (H, W, 3)
    boxes: list[BoundingBox]
    scene: list[SceneObject] = field(default_factory=list)

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])


@dataclass(frozen=True)
class OracleCaption:
    image_id: str
    box_index: int
    box: BoundingBox
    caption: str


@dataclass(frozen=True)
class OracleQA:
    image_id: str
    box_index: int
    box: BoundingBox
    caption: str
    qtype: str
    question: str
    answer: str


def _shape_mask(shape: str, side: int) -> np.ndarray:
    yy, xx = np.mgrid[0:side, 0:side]
    if shape == "square":
        return np.ones((side, side), dtype=bool)
    if shape == "circle":
        c = (side - 1) / 2.0
        return (yy - c) ** 2 + (xx - c) ** 2 <= (side / 2.0) ** 2
    if shape == "triangle":
        # apex at the top row, base on the bottom row
        half = (yy + 1) * (side / 2.0) / side
        c = (side - 1) / 2.0
        return np.abs(xx - c) <= half
    raise ValueError(f"unknown shape {shape!r}")


def render(spec: MicroWorldSpec, scene: Sequence[tuple[str, str, int, int, int]],
           rng: np.random.Generator) -> tuple[np.ndarray, list[BoundingBox]]:
    """Paint (shape, color, side, x, y) objects; returns pixels and tight boxes."""
    img = np.empty((spec.height, spec.width, 3), dtype=np.int16)
    img[:] = spec.background
    if spec.noise:
        img += rng.integers(-spec.noise, spec.noise + 1, size=img.shape, dtype=np.int16)
    boxes = []
    for shape, color, side, x, y in scene:
        m = _shape_mask(shape, side)
        region = img[y:y + side, x:x + side]
        region[m] = COLOR_RGB[color]
        ys, xs = np.nonzero(m)
        boxes.append(BoundingBox(x + int(xs.min()), y + int(ys.min()), x + int(xs.max()), y + int(ys.max())))
    return np.clip(img, 0, 255).astype(np.uint8), boxes


def sample_scene(spec: MicroWorldSpec, rng: np.random.Generator, image_id: str) -> ImageRecord:
    k = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    shapes = rng.choice(len(spec.shapes), size=k, replace=False)
    colors = rng.choice(len(spec.colors), size=k, replace=False)
    thirds = np.sort(rng.choice(3, size=k, replace=False))
    size_names = sorted(spec.sizes)
    layout, meta = [], []
    for s, c, t in zip(shapes, colors, thirds):
        size = size_names[int(rng.integers(len(size_names)))]
        lo, hi = spec.sizes[size]
        side = int(rng.integers(lo, hi + 1))
        col_lo = int(np.ceil(t * spec.width / 3))
        col_hi = int(np.floor((t + 1) * spec.width / 3)) - side
        x = int(rng.integers(col_lo, max(col_lo, col_hi) + 1))
        y = int(rng.integers(0, spec.height - side + 1))
        layout.append((spec.shapes[s], spec.colors[c], side, x, y))
        meta.append((spec.shapes[s], spec.colors[c], size, POSITIONS[t]))
    pixels, boxes = render(spec, layout, rng)
    scene = [SceneObject(sh, co, sz, pos, b) for (sh, co, sz, pos), b in zip(meta, boxes)]
    return ImageRecord(image_id, pixels, boxes, scene)


def object_caption(obj: SceneObject) -> str:
    return f"a {obj.size} {obj.color} {obj.shape}"


def image_caption(scene: Sequence[SceneObject]) -> str:
    return " and ".join(object_caption(o) for o in scene)


def question_templates(obj: SceneObject, qtype: str, spec: MicroWorldSpec,
                       rng: np.random.Generator) -> list[tuple[str, str]]:
    """All oracle (question, answer) pairs of one type about ``obj``."""
    if qtype == "what":
        return [(f"what color is the {obj.shape}", obj.color),
                (f"what shape is the {obj.color} object", obj.shape)]
    if qtype == "how":
        return [(f"how big is the {obj.shape}", obj.size),
                (f"how big is the {obj.color} object", obj.size)]
    if qtype == "where":
        return [(f"where is the {obj.shape}", obj.position),
                (f"where is the {obj.color} object", obj.position)]
    if qtype == "which":
        return [(f"which shape is {obj.color}", obj.shape),
                (f"which shape is on the {obj.position}", obj.shape)]
    if qtype == "binary":
        color = obj.color if rng.random() < 0.5 else spec.colors[
            int(rng.choice([i for i, c in enumerate(spec.colors) if c != obj.color]))]
        size = obj.size if rng.random() < 0.5 else next(s for s in sorted(spec.sizes) if s != obj.size)
        return [(f"is the {obj.shape} {color}", YES if color == obj.color else NO),
                (f"is the {obj.shape} {size}", YES if size == obj.size else NO)]
    raise ValueError(f"micro-world has no templates for question type {qtype!r}")


def oracle_annotations(record: ImageRecord, spec: MicroWorldSpec,
                       rng: np.random.Generator) -> tuple[list[OracleCaption], list[OracleQA]]:
    caps, qas = [], []
    for i, obj in enumerate(record.scene):
        cap = object_caption(obj)
        caps.append(OracleCaption(record.image_id, i, obj.box, cap))
        for qt in spec.qtypes:
            for q, a in question_templates(obj, qt, spec, rng):
                qas.append(OracleQA(record.image_id, i, obj.box, cap, qt, q, a))
    return caps, qas


def synthesize_microworld(spec: MicroWorldSpec, n_images: int, seed: int = 0, start_index: int = 0):
    """Render ``n_images`` scenes and their oracle dense captions and QA pairs."""
    if n_images < 1:
        raise ValueError("n_images must be at least 1")
    records, captions, qas = [], [], []
    for k in range(start_index, start_index + n_images):
        rng = np.random.default_rng([seed, k])
        rec = sample_scene(spec, rng, f"img{k:06d}")
        c, q = oracle_annotations(rec, spec, rng)
        records.append(rec)
        captions.extend(c)
        qas.extend(q)
    return records, captions, qas


# -- oracle question answering -------------------------------------------------

_COLOR = "|".join(COLOR_RGB)


def _find(scene: Sequence[SceneObject], **attrs) -> SceneObject | None:
    hits = [o for o in scene if all(getattr(o, k) == v for k, v in attrs.items())]
    return hits[0] if len(hits) == 1 else None


def answer_question(scene: Sequence[SceneObject], question: str) -> str | None:
    """Ground-truth answer for a templated question, or None if it is not answerable."""
    q = " ".join(question.lower().split())
    patterns = [
        (r"what color is the (\w+)", lambda m: _attr(scene, "color", shape=m[1])),
        (r"what shape is the (\w+) object", lambda m: _attr(scene, "shape", color=m[1])),
        (r"how big is the (\w+) object", lambda m: _attr(scene, "size", color=m[1])),
        (r"how big is the (\w+)", lambda m: _attr(scene, "size", shape=m[1])),
        (r"where is the (\w+) object", lambda m: _attr(scene, "position", color=m[1])),
        (r"where is the (\w+)", lambda m: _attr(scene, "position", shape=m[1])),
        (r"which shape is on the (\w+)", lambda m: _attr(scene, "shape", position=m[1])),
        (rf"which shape is ({_COLOR})", lambda m: _attr(scene, "shape", color=m[1])),
        (rf"is the (\w+) ({_COLOR})", lambda m: _yesno(scene, "color", m[2], shape=m[1])),
        (r"is the (\w+) (small|large)", lambda m: _yesno(scene, "size", m[2], shape=m[1])),
    ]
    for pat, fn in patterns:
        m = re.fullmatch(pat, q)
        if m:
            return fn(m)
    return None


def _attr(scene, attr: str, **ref) -> str | None:
    obj = _find(scene, **ref)
    return getattr(obj, attr) if obj is not None else None


def _yesno(scene, attr: str, value: str, **ref) -> str | None:
    obj = _find(scene, **ref)
    if obj is None:
        return None
    return YES if getattr(obj, attr) == value else NO
