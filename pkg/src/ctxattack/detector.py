"""Grid-cell toy detectors with exact analytic gradients.

A detector average-pools each grid cell to a small patch, applies a shared
linear map to get k+1 logits per cell (background last), and optionally adds
a cross-cell coupling term: each cell's logits receive ``strength * mix @ g``
where g is a weighted average of the other cells' softmax, weighted by
distance decay exp(-d / range) (or uniformly when range is 0). The coupling
is what makes the detector react to scene context; strength 0 gives a plain
per-cell linear detector.

Detections are cells whose argmax is a foreground class with softmax score
at or above the detector threshold; the detection box is the cell rectangle.
"""

from __future__ import annotations

import colorsys
import json
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .annotations import BBox, SceneAnnotation
from .errors import GeometryError, ParseError
from .kernels import cell_logits

DETECTOR_FORMAT_VERSION = 1
BACKGROUND_GRAY = 128.0
DEFAULT_SCORE_THRESHOLD = 0.35


class DetectorGeometry(NamedTuple):
    grid: int
    pool: int
    n_classes: int  # foreground classes; background is the extra logit


@dataclass(frozen=True)
class ToyDetector:
    name: str
    grid: int
    pool: int
    n_classes: int
    weights: np.ndarray  # (pool*pool*3, n_classes + 1)
    bias: np.ndarray  # (n_classes + 1,)
    context_mix: Optional[np.ndarray] = None  # (n_classes + 1, n_classes + 1)
    context_strength: float = 0.0
    context_range: float = 0.0  # coupling decay length in cell units; 0 = uniform
    score_threshold: float = DEFAULT_SCORE_THRESHOLD

    def __post_init__(self):
        K = self.n_classes + 1
        if self.weights.shape != (self.pool * self.pool * 3, K):
            raise GeometryError(
                f"detector {self.name}: weights shape {self.weights.shape} "
                f"inconsistent with pool={self.pool}, k={self.n_classes}"
            )
        if self.bias.shape != (K,):
            raise GeometryError(f"detector {self.name}: bias shape {self.bias.shape}")
        if self.context_mix is not None and self.context_mix.shape != (K, K):
            raise GeometryError(f"detector {self.name}: context_mix shape mismatch")

    @property
    def background(self) -> int:
        return self.n_classes

    @property
    def geometry(self) -> DetectorGeometry:
        return DetectorGeometry(self.grid, self.pool, self.n_classes)

    def check_image(self, image: np.ndarray) -> None:
        if image.ndim != 3 or image.shape[2] != 3:
            raise GeometryError(f"expected (H, W, 3) image, got {image.shape}")
        H, W = image.shape[:2]
        if H % self.grid or W % self.grid:
            raise GeometryError(f"image {H}x{W} not divisible by grid {self.grid}")
        if (H // self.grid) % self.pool or (W // self.grid) % self.pool:
            raise GeometryError(
                f"cell {H // self.grid}x{W // self.grid} not divisible by pool {self.pool}"
            )


class ScoredDetection(NamedTuple):
    label: int
    box: BBox
    score: float
    cell: int


def cell_rect(grid: int, height: float, width: float, cell: int) -> BBox:
    """Pixel rectangle of a grid cell, as a center-form box."""
    r, c = divmod(cell, grid)
    ch, cw = height / grid, width / grid
    return BBox(cx=(c + 0.5) * cw, cy=(r + 0.5) * ch, h=ch, w=cw)


def cell_of_point(grid: int, height: float, width: float, x: float, y: float) -> int:
    r = min(max(int(y / (height / grid)), 0), grid - 1)
    c = min(max(int(x / (width / grid)), 0), grid - 1)
    return r * grid + c


@lru_cache(maxsize=32)
def coupling_weights(grid: int, context_range: float) -> np.ndarray:
    """Row-normalized cell-to-cell coupling weights with zero diagonal.

    Weight decays as exp(-distance / range) with distance in cell units;
    range 0 gives the uniform mean over the other cells.
    """
    n = grid * grid
    rows, cols = np.divmod(np.arange(n), grid)
    d = np.hypot(rows[:, None] - rows[None, :], cols[:, None] - cols[None, :])
    if context_range > 0:
        w = np.exp(-d / context_range)
    else:
        w = np.ones((n, n))
    np.fill_diagonal(w, 0.0)
    w /= w.sum(axis=1, keepdims=True)
    w.setflags(write=False)
    return w


def logits(detector: ToyDetector, image: np.ndarray) -> np.ndarray:
    """Coupled per-cell logits, shape (grid*grid, k+1)."""
    detector.check_image(image)
    couple = None
    if detector.context_strength != 0.0 and detector.context_mix is not None:
        couple = coupling_weights(detector.grid, detector.context_range)
    return cell_logits(
        np.ascontiguousarray(image, dtype=np.float64),
        detector.weights,
        detector.bias,
        detector.context_mix,
        detector.context_strength,
        couple,
        detector.grid,
        detector.pool,
    )


def forward(detector: ToyDetector, image: np.ndarray) -> tuple[np.ndarray, list[ScoredDetection]]:
    """Logits plus thresholded detections (cell rectangles)."""
    y = logits(detector, image)
    e = np.exp(y - y.max(axis=1, keepdims=True))
    probs = e / e.sum(axis=1, keepdims=True)
    labels = y.argmax(axis=1)
    H, W = image.shape[:2]
    detections = []
    for cell in range(y.shape[0]):
        label = int(labels[cell])
        score = float(probs[cell, label])
        if label != detector.background and score >= detector.score_threshold:
            detections.append(
                ScoredDetection(label=label, box=cell_rect(detector.grid, H, W, cell),
                                score=score, cell=cell)
            )
    return y, detections


def clean_cell_labels(detector: ToyDetector, image: np.ndarray) -> np.ndarray:
    """Per-cell argmax labels on an unperturbed image (freeze targets)."""
    return logits(detector, image).argmax(axis=1).astype(np.int64)


def make_random_detector(
    seed: int,
    geometry: DetectorGeometry,
    name: Optional[str] = None,
    weight_scale: float = 0.004,
    score_threshold: float = DEFAULT_SCORE_THRESHOLD,
) -> ToyDetector:
    """A detector with i.i.d. uniform weights; used for fixtures and noise.

    The default scale keeps logits in a few-unit range so softmax never
    saturates in double precision."""
    rng = np.random.Generator(np.random.PCG64(seed))
    K = geometry.n_classes + 1
    F = geometry.pool * geometry.pool * 3
    return ToyDetector(
        name=name or f"rand-{seed}",
        grid=geometry.grid,
        pool=geometry.pool,
        n_classes=geometry.n_classes,
        weights=rng.uniform(-weight_scale, weight_scale, size=(F, K)),
        bias=rng.uniform(-0.5, 0.5, size=K),
        score_threshold=score_threshold,
    )


# ---------------------------------------------------------------------------
# Scene rendering: category-coded flat rectangles on a gray background.
# Annotation corpora carry no pixels, so attacks on a scene run against this
# deterministic rendering.
# ---------------------------------------------------------------------------

def category_palette(k: int, contrast: float = 1.0) -> np.ndarray:
    """k RGB colors spread over the hue wheel, shape (k, 3).

    ``contrast`` compresses the colors toward the background gray; low
    contrast makes a pixel budget a large fraction of object contrast,
    which is what makes small L-infinity budgets meaningful here.
    """
    colors = np.array([colorsys.hsv_to_rgb(i / k, 1.0, 1.0) for i in range(k)]) * 255.0
    return BACKGROUND_GRAY + contrast * (colors - BACKGROUND_GRAY)


def render_scene(
    scene: SceneAnnotation,
    k: int,
    out_hw: Optional[tuple[int, int]] = None,
    contrast: float = 1.0,
) -> np.ndarray:
    """Draw the scene's boxes as flat palette-colored rectangles.

    ``out_hw`` rescales the scene onto a fixed canvas (detector geometry
    usually wants power-of-two sizes); box coordinates scale accordingly.
    """
    palette = category_palette(k, contrast)
    if out_hw is None:
        H, W = int(round(scene.height)), int(round(scene.width))
        sy = sx = 1.0
    else:
        H, W = out_hw
        sy, sx = H / scene.height, W / scene.width
    image = np.full((H, W, 3), BACKGROUND_GRAY, dtype=np.float64)
    for obj in scene.objects:
        x0, y0, x1, y1 = obj.box.corners
        r0 = min(max(int(math.floor(y0 * sy)), 0), H)
        r1 = min(max(int(math.ceil(y1 * sy)), 0), H)
        c0 = min(max(int(math.floor(x0 * sx)), 0), W)
        c1 = min(max(int(math.ceil(x1 * sx)), 0), W)
        image[r0:r1, c0:c1] = palette[obj.category]
    return image


# ---------------------------------------------------------------------------
# Serialization: versioned JSON of nested arrays.
# ---------------------------------------------------------------------------

def detector_to_dict(det: ToyDetector) -> dict:
    return {
        "name": det.name,
        "grid": det.grid,
        "pool": det.pool,
        "n_classes": det.n_classes,
        "weights": det.weights.tolist(),
        "bias": det.bias.tolist(),
        "context_mix": None if det.context_mix is None else det.context_mix.tolist(),
        "context_strength": det.context_strength,
        "context_range": det.context_range,
        "score_threshold": det.score_threshold,
    }


def detector_from_dict(d: dict) -> ToyDetector:
    mix = d.get("context_mix")
    return ToyDetector(
        name=d["name"],
        grid=d["grid"],
        pool=d["pool"],
        n_classes=d["n_classes"],
        weights=np.array(d["weights"], dtype=np.float64),
        bias=np.array(d["bias"], dtype=np.float64),
        context_mix=None if mix is None else np.array(mix, dtype=np.float64),
        context_strength=float(d.get("context_strength", 0.0)),
        context_range=float(d.get("context_range", 0.0)),
        score_threshold=float(d.get("score_threshold", DEFAULT_SCORE_THRESHOLD)),
    )


def save_detectors(detectors: Sequence[ToyDetector], alphas: Sequence[float], path) -> None:
    doc = {
        "version": DETECTOR_FORMAT_VERSION,
        "detectors": [detector_to_dict(d) for d in detectors],
        "alphas": list(alphas),
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_detectors(path) -> tuple[list[ToyDetector], list[float]]:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("version") != DETECTOR_FORMAT_VERSION:
        raise ParseError(f"{path}: unsupported detector file version {doc.get('version')!r}")
    return [detector_from_dict(d) for d in doc["detectors"]], list(doc["alphas"])
