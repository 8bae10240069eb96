"""Self-contained synthetic worlds: a scene corpus with planted pair
structure, a deterministic rendering, and detectors grounded in the same
structure.

Scenes draw a category and its companion (or i.i.d. categories when the
world is unstructured) and place cell-sized boxes in distinct grid cells.
Detector weights are hue templates for the rendering palette plus seeded
noise; their cross-cell coupling matrix is the world's analytic conditional
co-occurrence, so detectors reward exactly the label pairs the corpus
exhibits. An unstructured world yields a flat coupling matrix, which adds
the same constant to every logit and therefore has no effect: the control
case.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .annotations import BBox, CategorySet, SceneAnnotation, SceneObject
from .context import BinSpec, ContextGraph, build_context_graph
from .detector import (
    BACKGROUND_GRAY,
    DetectorGeometry,
    ToyDetector,
    category_palette,
)
from .errors import InvalidSpecError


@dataclass(frozen=True)
class WorldSpec:
    k: int = 8
    image_size: int = 64
    grid: int = 8
    pool: int = 2
    n_scenes: int = 400
    objects_range: tuple[int, int] = (2, 6)
    structured: bool = True  # companion pairs vs i.i.d. uniform categories
    box_frac: tuple[float, float] = (0.85, 1.3)  # box size in cell units
    cluster_radius: int = 1  # scene objects gather within this cell radius
    color_contrast: float = 0.12
    template_scale: float = 3.0
    template_noise: float = 0.08
    bias_noise: float = 0.15
    background_margin: float = 0.9
    context_strength: float = 12.0
    context_range: float = 1.0  # coupling decay length in cell units
    score_threshold: float = 0.25
    n_surrogates: int = 2

    def validate(self) -> None:
        if self.k < 4 or self.k % 2:
            raise InvalidSpecError("world needs an even k >= 4")
        if self.image_size % self.grid or (self.image_size // self.grid) % self.pool:
            raise InvalidSpecError("image_size must be divisible by grid*pool")
        lo, hi = self.objects_range
        if not (2 <= lo <= hi):
            raise InvalidSpecError("objects_range must satisfy 2 <= lo <= hi")

    @property
    def geometry(self) -> DetectorGeometry:
        return DetectorGeometry(self.grid, self.pool, self.k)


@dataclass
class World:
    spec: WorldSpec
    categories: CategorySet
    scenes: list[SceneAnnotation]
    graph: ContextGraph
    surrogates: list[ToyDetector]
    alphas: list[float]
    conditional: np.ndarray  # analytic planted conditional, (k, k)


def companion(i: int) -> int:
    """Category pairing used by structured worlds: (0,1), (2,3), ..."""
    return i ^ 1


def planted_conditional(spec: WorldSpec) -> np.ndarray:
    """Analytic conditional co-occurrence the scene generator induces.

    Structured scenes alternate a category with its companion, so ordered
    instance pairs within a scene split between the self edge and the
    companion edge; the split follows from the object-count distribution.
    Unstructured scenes are i.i.d. uniform, giving flat rows.
    """
    k = spec.k
    if not spec.structured:
        return np.full((k, k), 1.0 / k)
    lo, hi = spec.objects_range
    same = 0.0
    cross = 0.0
    for m in range(lo, hi + 1):
        na, nb = (m + 1) // 2, m // 2
        same += na * (na - 1) + nb * (nb - 1)
        cross += 2 * na * nb
    cond = np.zeros((k, k))
    for i in range(k):
        cond[i, i] = same / (same + cross)
        cond[i, companion(i)] = cross / (same + cross)
    return cond


def _scene_cells(rng: np.random.Generator, spec: WorldSpec, m: int) -> list[int]:
    """m distinct interior grid cells clustered around a random anchor.

    Clustering keeps co-occurring objects near each other, which is what
    gives the corpus distance graph small, informative means.
    """
    g, rad = spec.grid, spec.cluster_radius
    anchor_r = int(rng.integers(1, g - 1))
    anchor_c = int(rng.integers(1, g - 1))
    nearby = [
        (max(abs(r - anchor_r), abs(c - anchor_c)), r * g + c)
        for r in range(1, g - 1)
        for c in range(1, g - 1)
        if max(abs(r - anchor_r), abs(c - anchor_c)) <= rad
    ]
    cells = [cell for _, cell in nearby]
    if len(cells) < m:
        extra = [r * g + c for r in range(1, g - 1) for c in range(1, g - 1)
                 if r * g + c not in cells]
        cells += list(extra)
    picks = rng.choice(len(cells), size=m, replace=False)
    return [cells[int(i)] for i in picks]


def generate_scenes(spec: WorldSpec, seed: int) -> tuple[CategorySet, list[SceneAnnotation]]:
    spec.validate()
    rng = np.random.Generator(np.random.PCG64(seed))
    categories = CategorySet(tuple(f"cat{i:02d}" for i in range(spec.k)))
    size = float(spec.image_size)
    cell = size / spec.grid
    scenes = []
    for s in range(spec.n_scenes):
        lo, hi = spec.objects_range
        m = int(rng.integers(lo, hi + 1))
        if spec.structured:
            a = int(rng.integers(spec.k))
            cats = [a if i % 2 == 0 else companion(a) for i in range(m)]
        else:
            cats = [int(c) for c in rng.integers(spec.k, size=m)]
        cells = _scene_cells(rng, spec, m)
        scene = SceneAnnotation(image_id=f"world-{s:05d}", width=size, height=size)
        for cat, cidx in zip(cats, cells):
            r, c = divmod(cidx, spec.grid)
            cx = (c + rng.uniform(0.35, 0.65)) * cell
            cy = (r + rng.uniform(0.35, 0.65)) * cell
            h = rng.uniform(*spec.box_frac) * cell
            w = rng.uniform(*spec.box_frac) * cell
            h = min(h, 2 * cy, 2 * (size - cy))
            w = min(w, 2 * cx, 2 * (size - cx))
            scene.objects.append(SceneObject(category=cat, box=BBox(cx=cx, cy=cy, h=h, w=w)))
        scenes.append(scene)
    return categories, scenes


def make_template_detector(spec: WorldSpec, seed: int, name: str) -> ToyDetector:
    """Hue-template detector for the rendering palette.

    A cell fully covered by category c's color scores template_scale on
    logit c and 0 on a gray cell; the background logit is a fixed margin.
    Seeded noise differentiates ensemble members. The coupling matrix is
    the planted conditional embedded over the foreground classes.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    k, P = spec.k, spec.pool
    K, F = k + 1, P * P * 3
    palette = category_palette(k, spec.color_contrast)
    weights = np.zeros((F, K))
    bias = np.zeros(K)
    for c in range(k):
        u = palette[c] - BACKGROUND_GRAY  # (3,)
        scale = spec.template_scale / (P * P * float(u @ u))
        weights[:, c] = np.tile(u * scale, P * P)
        bias[c] = -spec.template_scale * float(u @ np.full(3, BACKGROUND_GRAY)) / float(u @ u)
    bias[k] = spec.background_margin * spec.template_scale

    weights[:, :k] += rng.normal(0.0, spec.template_noise * np.abs(weights[:, :k]).max(), (F, k))
    bias[:k] += rng.normal(0.0, spec.bias_noise * spec.template_scale, k)

    mix = np.zeros((K, K))
    mix[:k, :k] = planted_conditional(spec)
    return ToyDetector(
        name=name,
        grid=spec.grid,
        pool=spec.pool,
        n_classes=k,
        weights=weights,
        bias=bias,
        context_mix=mix,
        context_strength=spec.context_strength,
        context_range=spec.context_range,
        score_threshold=spec.score_threshold,
    )


def make_world(spec: WorldSpec, seed: int) -> World:
    """Corpus, context graph, and surrogate ensemble from one master seed."""
    spec.validate()
    categories, scenes = generate_scenes(spec, seed)
    graph = build_context_graph(scenes, categories, BinSpec())
    surrogates = [
        make_template_detector(spec, seed * 1000 + 7 * i + 1, name=f"surrogate-{i}")
        for i in range(spec.n_surrogates)
    ]
    alphas = [1.0 / spec.n_surrogates] * spec.n_surrogates
    return World(
        spec=spec,
        categories=categories,
        scenes=scenes,
        graph=graph,
        surrogates=surrogates,
        alphas=alphas,
        conditional=planted_conditional(spec),
    )
