import numpy as np
import pytest

from ctxattack.annotations import BBox, CategorySet, SceneAnnotation, SceneObject
from ctxattack.context import BinSpec, build_context_graph
from ctxattack.detector import DetectorGeometry, make_random_detector


def rng_for(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


@pytest.fixture
def three_scene_fixture():
    """Three scenes over [chair, dog, table]: hand-countable pair structure."""
    categories = CategorySet(["chair", "dog", "table"])
    scenes = [
        SceneAnnotation(
            image_id="a", width=640, height=480,
            objects=[
                SceneObject(2, BBox(cx=320, cy=240, h=100, w=200)),
                SceneObject(0, BBox(cx=400, cy=240, h=80, w=50)),
            ],
        ),
        SceneAnnotation(
            image_id="b", width=640, height=480,
            objects=[
                SceneObject(2, BBox(cx=200, cy=200, h=90, w=180)),
                SceneObject(0, BBox(cx=150, cy=260, h=70, w=40)),
                SceneObject(0, BBox(cx=420, cy=300, h=75, w=45)),
            ],
        ),
        SceneAnnotation(
            image_id="c", width=320, height=240,
            objects=[SceneObject(1, BBox(cx=160, cy=120, h=60, w=80))],
        ),
    ]
    return categories, scenes


@pytest.fixture
def three_scene_graph(three_scene_fixture):
    categories, scenes = three_scene_fixture
    return build_context_graph(scenes, categories, BinSpec())


@pytest.fixture
def small_detector():
    """4x4 grid, 2x2 pool, 5 classes; mild random weights."""
    return make_random_detector(11, DetectorGeometry(grid=4, pool=2, n_classes=5))
