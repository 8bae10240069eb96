"""Annotation corpora: COCO JSON / VOC XML parsing, synthetic corpora,
and the line-delimited internal scene format.

All boxes are kept in center form (cx, cy, h, w) internally; corner form
appears only at format boundaries.
"""

from __future__ import annotations

import json
import math
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Optional, Sequence

import numpy as np

from .errors import CorpusError, InvalidSpecError, ParseError

# VOC names whose COCO spelling differs; the remaining 14 VOC categories
# share their name with COCO verbatim.
VOC_TO_COCO = {
    "aeroplane": "airplane",
    "diningtable": "dining table",
    "motorbike": "motorcycle",
    "pottedplant": "potted plant",
    "sofa": "couch",
    "tvmonitor": "tv",
}

VOC_CATEGORIES = (
    "aeroplane", "bicycle", "bird", "boat", "bottle", "bus", "car", "cat",
    "chair", "cow", "diningtable", "dog", "horse", "motorbike", "person",
    "pottedplant", "sheep", "sofa", "train", "tvmonitor",
)


def voc_name_to_coco(name: str) -> str:
    """Map a VOC category name onto its COCO synonym (identity if shared)."""
    return VOC_TO_COCO.get(name, name)


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in center form: center (cx, cy), height h, width w."""

    cx: float
    cy: float
    h: float
    w: float

    def __post_init__(self):
        if not (self.h > 0 and self.w > 0):
            raise ValueError(f"box must have positive extent, got h={self.h} w={self.w}")

    @property
    def corners(self) -> tuple[float, float, float, float]:
        """(x0, y0, x1, y1) corner form."""
        return (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )

    @property
    def area(self) -> float:
        return self.h * self.w

    @classmethod
    def from_corners(cls, x0: float, y0: float, x1: float, y1: float) -> "BBox":
        return cls(cx=(x0 + x1) / 2.0, cy=(y0 + y1) / 2.0, h=y1 - y0, w=x1 - x0)


@dataclass(frozen=True)
class SceneObject:
    category: int
    box: BBox


@dataclass
class SceneAnnotation:
    """One image's size plus its labeled boxes."""

    image_id: str
    width: float
    height: float
    objects: list[SceneObject] = field(default_factory=list)

    @property
    def diagonal(self) -> float:
        return math.hypot(self.width, self.height)


class CategorySet:
    """Ordered, unique category names with a name -> id inverse index."""

    def __init__(self, names: Sequence[str]):
        names = tuple(names)
        if len(names) == 0:
            raise InvalidSpecError("category set must contain at least one name")
        if len(set(names)) != len(names):
            raise InvalidSpecError("category names must be unique")
        self.names = names
        self.index = {name: i for i, name in enumerate(names)}

    def __len__(self) -> int:
        return len(self.names)

    def __contains__(self, name: str) -> bool:
        return name in self.index

    def __getitem__(self, i: int) -> str:
        return self.names[i]

    def __eq__(self, other) -> bool:
        return isinstance(other, CategorySet) and self.names == other.names

    def __repr__(self) -> str:
        return f"CategorySet({list(self.names)!r})"

    def id_of(self, name: str) -> int:
        return self.index[name]


class ParseResult(NamedTuple):
    categories: CategorySet
    scenes: list[SceneAnnotation]
    warnings: list[str]


def _clamp_box(box: BBox, width: float, height: float) -> tuple[Optional[BBox], bool]:
    """Clamp a box into [0, W] x [0, H]; returns (box or None if empty, clamped?)."""
    x0, y0, x1, y1 = box.corners
    cx0, cy0 = max(0.0, x0), max(0.0, y0)
    cx1, cy1 = min(width, x1), min(height, y1)
    if cx1 <= cx0 or cy1 <= cy0:
        return None, True
    clamped = (cx0, cy0, cx1, cy1) != (x0, y0, x1, y1)
    if not clamped:
        return box, False
    return BBox.from_corners(cx0, cy0, cx1, cy1), True


def _ingest_object(
    scene: SceneAnnotation,
    category: int,
    box: BBox,
    warnings: list[str],
    where: str,
) -> None:
    clamped_box, clamped = _clamp_box(box, scene.width, scene.height)
    if clamped_box is None:
        warnings.append(f"{where}: box entirely outside image, skipped")
        return
    if clamped:
        warnings.append(f"{where}: box clamped to image bounds")
    scene.objects.append(SceneObject(category=category, box=clamped_box))


def parse_coco(json_bytes: bytes, categories: Optional[CategorySet] = None) -> ParseResult:
    """Parse a COCO ``instances`` JSON document into scenes.

    COCO boxes are [x_min, y_min, w, h] and are converted to center form.
    When ``categories`` is given, annotations whose category name is absent
    from it are dropped (counted in the warnings); otherwise a CategorySet
    is built from the file in ascending COCO-category-id order.

    Record-level problems (dangling image ids, non-positive boxes) are
    collected as warnings and never abort the parse.
    """
    try:
        doc = json.loads(json_bytes)
    except json.JSONDecodeError as e:
        raise ParseError(f"malformed COCO JSON at byte offset {e.pos}: {e.msg}") from e

    for key in ("images", "annotations", "categories"):
        if key not in doc:
            raise ParseError(f"COCO document missing '{key}' array")

    warnings: list[str] = []
    coco_cats = sorted(doc["categories"], key=lambda c: c["id"])
    id_to_name = {c["id"]: c["name"] for c in coco_cats}
    if categories is None:
        categories = CategorySet([c["name"] for c in coco_cats])

    scenes: dict = {}
    order = []
    for img in doc["images"]:
        image_id = str(img["id"])
        if img["width"] <= 0 or img["height"] <= 0:
            raise ParseError(f"image {image_id} has non-positive dimensions")
        scenes[img["id"]] = SceneAnnotation(
            image_id=image_id, width=float(img["width"]), height=float(img["height"])
        )
        order.append(img["id"])

    dropped_categories = 0
    for ann in doc["annotations"]:
        ann_id = ann.get("id", "?")
        where = f"annotation {ann_id}"
        if ann["image_id"] not in scenes:
            warnings.append(f"{where}: references unknown image id {ann['image_id']}, skipped")
            continue
        x, y, w, h = ann["bbox"]
        if w <= 0 or h <= 0:
            warnings.append(f"{where}: non-positive box {w}x{h}, skipped")
            continue
        name = id_to_name.get(ann["category_id"])
        if name is None:
            warnings.append(f"{where}: unknown category id {ann['category_id']}, skipped")
            continue
        if name not in categories:
            dropped_categories += 1
            continue
        scene = scenes[ann["image_id"]]
        box = BBox(cx=x + w / 2.0, cy=y + h / 2.0, h=float(h), w=float(w))
        _ingest_object(scene, categories.id_of(name), box, warnings, where)

    if dropped_categories:
        warnings.append(f"{dropped_categories} annotations dropped: category not in supplied set")

    return ParseResult(categories, [scenes[i] for i in order], warnings)


def _voc_docs(docs: Iterable) -> Iterable[tuple[str, bytes]]:
    for i, doc in enumerate(docs):
        if isinstance(doc, tuple):
            yield doc
        else:
            yield (f"document {i}", doc)


def parse_voc(
    xml_docs: Iterable, categories: Optional[CategorySet] = None
) -> ParseResult:
    """Parse VOC ``annotation`` XML documents, one scene per document.

    ``xml_docs`` yields byte strings or (name, bytes) pairs; names appear
    in error messages. Category discovery order is lexicographic by name
    when no CategorySet is supplied.
    """
    parsed = []
    for name, data in _voc_docs(xml_docs):
        try:
            root = ET.fromstring(data)
        except ET.ParseError as e:
            raise ParseError(f"malformed VOC XML in {name}: {e}") from e
        size = root.find("size")
        if size is None:
            raise ParseError(f"{name}: missing <size> element")
        width = float(size.findtext("width"))
        height = float(size.findtext("height"))
        if width <= 0 or height <= 0:
            raise ParseError(f"{name}: non-positive image size")
        image_id = root.findtext("filename") or name
        if image_id.endswith((".jpg", ".jpeg", ".png")):
            image_id = image_id.rsplit(".", 1)[0]
        objects = []
        for obj in root.findall("object"):
            cat_name = obj.findtext("name")
            bnd = obj.find("bndbox")
            xmin = float(bnd.findtext("xmin"))
            ymin = float(bnd.findtext("ymin"))
            xmax = float(bnd.findtext("xmax"))
            ymax = float(bnd.findtext("ymax"))
            objects.append((cat_name, xmin, ymin, xmax, ymax))
        parsed.append((name, image_id, width, height, objects))

    if categories is None:
        seen = sorted({cat for *_, objs in parsed for cat, *_ in objs})
        if not seen:
            seen = ["(none)"]
        categories = CategorySet(seen)

    warnings: list[str] = []
    scenes = []
    dropped_categories = 0
    for name, image_id, width, height, objects in parsed:
        scene = SceneAnnotation(image_id=image_id, width=width, height=height)
        for cat_name, xmin, ymin, xmax, ymax in objects:
            where = f"{name}, object '{cat_name}'"
            if xmax <= xmin or ymax <= ymin:
                warnings.append(f"{where}: inverted or empty box, skipped")
                continue
            if cat_name not in categories:
                dropped_categories += 1
                continue
            box = BBox.from_corners(xmin, ymin, xmax, ymax)
            _ingest_object(scene, categories.id_of(cat_name), box, warnings, where)
        scenes.append(scene)

    if dropped_categories:
        warnings.append(f"{dropped_categories} objects dropped: category not in supplied set")

    return ParseResult(categories, scenes, warnings)


@dataclass(frozen=True)
class SynthSpec:
    """Recipe for a synthetic corpus with known pair structure.

    Exactly one of ``pair_joint`` (a k x k joint matrix over ordered category
    pairs, entries summing to 1; each scene holds one sampled pair) or
    ``marginal`` (categories drawn i.i.d.) must be given. ``fixed_distance``
    plants an exact normalized center distance between the two objects of a
    pair scene.
    """

    k: int
    n_scenes: int
    objects_per_scene: tuple[int, int] = (2, 2)
    pair_joint: Optional[np.ndarray] = None
    marginal: Optional[np.ndarray] = None
    image_size: tuple[int, int] = (640, 480)
    box_frac: tuple[float, float] = (0.04, 0.10)
    fixed_distance: Optional[float] = None
    category_names: Optional[tuple[str, ...]] = None

    def validate(self) -> None:
        if self.k < 2:
            raise InvalidSpecError("synthetic corpus needs k >= 2 categories")
        if (self.pair_joint is None) == (self.marginal is None):
            raise InvalidSpecError("give exactly one of pair_joint or marginal")
        if self.pair_joint is not None:
            q = np.asarray(self.pair_joint, dtype=float)
            if q.shape != (self.k, self.k) or abs(q.sum() - 1.0) > 1e-9 or (q < 0).any():
                raise InvalidSpecError("pair_joint must be a k x k probability matrix")
        if self.marginal is not None:
            p = np.asarray(self.marginal, dtype=float)
            if p.shape != (self.k,) or abs(p.sum() - 1.0) > 1e-9 or (p < 0).any():
                raise InvalidSpecError("marginal must be a length-k probability vector")
        lo, hi = self.objects_per_scene
        if not (1 <= lo <= hi):
            raise InvalidSpecError("objects_per_scene range must satisfy 1 <= lo <= hi")


def expected_pair_conditional(pair_joint: np.ndarray) -> np.ndarray:
    """Closed-form conditional co-occurrence implied by a pair-joint matrix.

    Each pair scene (a, b) ~ Q contributes the ordered instance pairs (a, b)
    and (b, a), so expected ordered-pair counts are proportional to
    Q + Q^T and the conditional is its row normalization.
    """
    q = np.asarray(pair_joint, dtype=float)
    sym = q + q.T
    rows = sym.sum(axis=1, keepdims=True)
    out = np.full_like(sym, 1.0 / q.shape[0])
    np.divide(sym, rows, out=out, where=rows > 0)
    return out


def _random_box(rng, spec: SynthSpec, cx: float, cy: float) -> BBox:
    W, H = spec.image_size
    diag = math.hypot(W, H)
    lo, hi = spec.box_frac
    h = rng.uniform(lo, hi) * diag
    w = rng.uniform(lo, hi) * diag
    # Keep the box inside the image without moving its center off-plan.
    h = min(h, 2 * cy, 2 * (H - cy))
    w = min(w, 2 * cx, 2 * (W - cx))
    return BBox(cx=cx, cy=cy, h=max(h, 1.0), w=max(w, 1.0))


def synth_corpus(spec: SynthSpec, seed: int) -> tuple[CategorySet, list[SceneAnnotation]]:
    """Generate a deterministic synthetic corpus following ``spec``."""
    spec.validate()
    rng = np.random.Generator(np.random.PCG64(seed))
    names = spec.category_names or tuple(f"cat{i:02d}" for i in range(spec.k))
    categories = CategorySet(names)
    W, H = spec.image_size
    diag = math.hypot(W, H)

    scenes = []
    for s in range(spec.n_scenes):
        scene = SceneAnnotation(image_id=f"synth-{s:06d}", width=float(W), height=float(H))
        if spec.pair_joint is not None:
            flat = np.asarray(spec.pair_joint, dtype=float).ravel()
            pair = rng.choice(spec.k * spec.k, p=flat / flat.sum())
            cats = [int(pair) // spec.k, int(pair) % spec.k]
        else:
            lo, hi = spec.objects_per_scene
            m = int(rng.integers(lo, hi + 1))
            cats = [int(c) for c in rng.choice(spec.k, size=m, p=spec.marginal)]

        if spec.fixed_distance is not None and len(cats) == 2:
            theta = rng.uniform(0.0, 2.0 * math.pi)
            r = spec.fixed_distance * diag
            c1 = (W / 2.0, H / 2.0)
            c2 = (c1[0] + r * math.cos(theta), c1[1] + r * math.sin(theta))
            centers = [c1, c2]
        else:
            margin = 0.12
            centers = [
                (rng.uniform(margin * W, (1 - margin) * W), rng.uniform(margin * H, (1 - margin) * H))
                for _ in cats
            ]
        for cat, (cx, cy) in zip(cats, centers):
            scene.objects.append(SceneObject(category=cat, box=_random_box(rng, spec, cx, cy)))
        scenes.append(scene)
    return categories, scenes


# ---------------------------------------------------------------------------
# Internal scene interchange format: one JSON object per line plus a sidecar
# JSON list of category names.
# ---------------------------------------------------------------------------

def scene_to_dict(scene: SceneAnnotation) -> dict:
    return {
        "image_id": scene.image_id,
        "width": scene.width,
        "height": scene.height,
        "objects": [
            {"category": o.category, "cx": o.box.cx, "cy": o.box.cy, "h": o.box.h, "w": o.box.w}
            for o in scene.objects
        ],
    }


def scene_from_dict(d: dict) -> SceneAnnotation:
    return SceneAnnotation(
        image_id=str(d["image_id"]),
        width=float(d["width"]),
        height=float(d["height"]),
        objects=[
            SceneObject(
                category=int(o["category"]),
                box=BBox(cx=float(o["cx"]), cy=float(o["cy"]), h=float(o["h"]), w=float(o["w"])),
            )
            for o in d["objects"]
        ],
    )


def write_scenes(scenes: Iterable[SceneAnnotation], path) -> None:
    with open(path, "w") as fh:
        for scene in scenes:
            fh.write(json.dumps(scene_to_dict(scene)) + "\n")


def read_scenes(path) -> list[SceneAnnotation]:
    scenes = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                scenes.append(scene_from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, ValueError) as e:
                raise ParseError(f"{path}:{line_no}: bad scene record: {e}") from e
    return scenes


def write_categories(categories: CategorySet, path) -> None:
    with open(path, "w") as fh:
        json.dump(list(categories.names), fh)


def read_categories(path) -> CategorySet:
    with open(path) as fh:
        names = json.load(fh)
    if not isinstance(names, list) or not all(isinstance(n, str) for n in names):
        raise ParseError(f"{path}: category sidecar must be a JSON list of names")
    return CategorySet(names)


def rescale_scene(scene: SceneAnnotation, height: float, width: float) -> SceneAnnotation:
    """Map a scene and its boxes onto a new canvas size."""
    sy, sx = height / scene.height, width / scene.width
    return SceneAnnotation(
        image_id=scene.image_id,
        width=float(width),
        height=float(height),
        objects=[
            SceneObject(
                category=o.category,
                box=BBox(cx=o.box.cx * sx, cy=o.box.cy * sy, h=o.box.h * sy, w=o.box.w * sx),
            )
            for o in scene.objects
        ],
    )


def check_corpus(scenes: Sequence[SceneAnnotation], categories: CategorySet) -> None:
    """Raise CorpusError if any scene references an out-of-range category."""
    k = len(categories)
    for scene in scenes:
        for obj in scene.objects:
            if not (0 <= obj.category < k):
                raise CorpusError(
                    f"scene {scene.image_id}: category id {obj.category} outside [0, {k})"
                )
