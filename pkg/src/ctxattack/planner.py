"""Attack plans: a victim relabeling plus a growing list of helper entries.

Helper labels are drawn from the co-occurrence row of the victim's target
label; existing scene objects are converted first (nearest to the victim),
then phantom objects are synthesized from the distance/size distribution
means. A plan with zero helpers is the context-agnostic baseline plan.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .annotations import BBox, CategorySet, SceneAnnotation, scene_from_dict, scene_to_dict
from .context import ContextGraph, distance_mean, sample_label, size_mean
from .errors import BudgetError, DegenerateSceneError, InvalidSpecError

DEFAULT_MAX_HELPERS = 5


@dataclass(frozen=True)
class AttackGoal:
    scene: SceneAnnotation
    victim_index: int
    target_label: int

    def __post_init__(self):
        if not (0 <= self.victim_index < len(self.scene.objects)):
            raise InvalidSpecError("victim_index outside scene")
        present = {o.category for o in self.scene.objects}
        if self.target_label in present:
            raise InvalidSpecError("target label must be absent from the scene")

    @property
    def victim_box(self) -> BBox:
        return self.scene.objects[self.victim_index].box


@dataclass(frozen=True)
class PlanEntry:
    kind: str  # "existing" | "phantom"
    object_ref: Optional[int]
    target_label: int
    target_box: BBox
    confidence: float = 1.0
    flags: tuple[str, ...] = ()


@dataclass(frozen=True)
class AttackPlan:
    goal: AttackGoal
    entries: tuple[PlanEntry, ...]
    unchanged: tuple[int, ...]

    @property
    def helpers_used(self) -> int:
        return len(self.entries) - 1

    def validate(self) -> None:
        if self.entries[0].target_label != self.goal.target_label:
            raise InvalidSpecError("plan head must carry the goal's target label")
        refs = [e.object_ref for e in self.entries if e.kind == "existing"]
        covered = sorted(refs + list(self.unchanged))
        if covered != list(range(len(self.goal.scene.objects))):
            raise InvalidSpecError("every scene object must appear once in entries or unchanged")


def new_plan(goal: AttackGoal) -> AttackPlan:
    """The zero-helper plan: only the victim is retargeted."""
    victim = goal.scene.objects[goal.victim_index]
    head = PlanEntry(
        kind="existing",
        object_ref=goal.victim_index,
        target_label=goal.target_label,
        target_box=victim.box,
    )
    unchanged = tuple(i for i in range(len(goal.scene.objects)) if i != goal.victim_index)
    plan = AttackPlan(goal=goal, entries=(head,), unchanged=unchanged)
    plan.validate()
    return plan


def choose_target_label(
    scene: SceneAnnotation, victim_index: int, categories: CategorySet, rng: np.random.Generator
) -> int:
    """Uniform draw over labels absent from the scene."""
    present = {o.category for o in scene.objects}
    absent = [c for c in range(len(categories)) if c not in present]
    if not absent:
        raise DegenerateSceneError("scene contains every category; no target available")
    return int(absent[rng.integers(len(absent))])


def make_goal(
    scene: SceneAnnotation, victim_index: int, categories: CategorySet, rng: np.random.Generator
) -> AttackGoal:
    target = choose_target_label(scene, victim_index, categories, rng)
    return AttackGoal(scene=scene, victim_index=victim_index, target_label=target)


def _existing_candidates(plan: AttackPlan) -> list[int]:
    """Unconverted scene objects, nearest to the victim center first."""
    scene = plan.goal.scene
    victim = scene.objects[plan.goal.victim_index].box
    order = sorted(
        plan.unchanged,
        key=lambda i: (
            math.hypot(
                scene.objects[i].box.cx - victim.cx, scene.objects[i].box.cy - victim.cy
            ),
            i,
        ),
    )
    return order


def _fit_inside(box: BBox, width: float, height: float) -> tuple[BBox, tuple[str, ...]]:
    """Translate a box minimally to fit the image; clip when it cannot fit."""
    flags = []
    h, w = box.h, box.w
    if w > width or h > height:
        w = min(w, width)
        h = min(h, height)
        flags.append("clipped")
    cx = min(max(box.cx, w / 2.0), width - w / 2.0)
    cy = min(max(box.cy, h / 2.0), height - h / 2.0)
    if (cx, cy) != (box.cx, box.cy) and "clipped" not in flags:
        flags.append("translated")
    return BBox(cx=cx, cy=cy, h=h, w=w), tuple(flags)


def place_phantom(
    graph: ContextGraph,
    anchor: BBox,
    victim_target: int,
    helper_label: int,
    scene_dims: tuple[float, float],
    rng: np.random.Generator,
) -> tuple[BBox, tuple[str, ...]]:
    """Synthesize a phantom helper box from the distribution means.

    The center sits at the mean normalized distance from the anchor along a
    uniformly random direction; the size is the mean normalized (h, w).
    The result is translated minimally (or clipped) to lie inside the image.
    """
    width, height = scene_dims
    diag = math.hypot(width, height)
    d, d_fallback = distance_mean(graph, victim_target, helper_label)
    hn, wn, s_fallback = size_mean(graph, victim_target, helper_label)
    theta = rng.uniform(0.0, 2.0 * math.pi)
    raw = BBox(
        cx=anchor.cx + d * diag * math.cos(theta),
        cy=anchor.cy + d * diag * math.sin(theta),
        h=max(hn * diag, 1.0),
        w=max(wn * diag, 1.0),
    )
    box, flags = _fit_inside(raw, width, height)
    if d_fallback:
        flags = flags + ("distance_fallback",)
    if s_fallback:
        flags = flags + ("size_fallback",)
    return box, flags


def extend_plan(
    plan: AttackPlan,
    graph: ContextGraph,
    rng: np.random.Generator,
    max_helpers: int = DEFAULT_MAX_HELPERS,
    resample_noop: bool = False,
) -> AttackPlan:
    """Add exactly one context-guided helper to the plan.

    Existing non-victim objects are converted first; once all are used,
    phantoms are placed. The helper label is drawn from the co-occurrence
    row of the victim's target label. A draw equal to the object's current
    label still spends budget and is flagged "noop" unless ``resample_noop``
    asks for a redraw.
    """
    if plan.helpers_used >= max_helpers:
        raise BudgetError(f"helper budget {max_helpers} exhausted")
    scene = plan.goal.scene
    row = graph.cooccur.row(plan.goal.target_label)

    label = sample_label(row, rng)
    candidates = _existing_candidates(plan)
    if candidates:
        idx = candidates[0]
        current = scene.objects[idx]
        if resample_noop:
            for _ in range(32):
                if label != current.category:
                    break
                label = sample_label(row, rng)
        flags = ("noop",) if label == current.category else ()
        entry = PlanEntry(
            kind="existing",
            object_ref=idx,
            target_label=label,
            target_box=current.box,
            flags=flags,
        )
        unchanged = tuple(i for i in plan.unchanged if i != idx)
    else:
        box, flags = place_phantom(
            graph,
            plan.goal.victim_box,
            plan.goal.target_label,
            label,
            (scene.width, scene.height),
            rng,
        )
        entry = PlanEntry(
            kind="phantom", object_ref=None, target_label=label, target_box=box, flags=flags
        )
        unchanged = plan.unchanged

    extended = replace(plan, entries=plan.entries + (entry,), unchanged=unchanged)
    extended.validate()
    return extended


def randomize_plan(
    plan: AttackPlan,
    categories: CategorySet,
    scene_dims: tuple[float, float],
    rng: np.random.Generator,
    max_helpers: int = DEFAULT_MAX_HELPERS,
) -> AttackPlan:
    """One-step plan extension with context ignored.

    Same helper-source order as extend_plan, but labels are uniform over the
    categories and phantom boxes are uniform over the image with per-axis
    sizes uniform in [0.05, 0.5] of the diagonal.
    """
    if plan.helpers_used >= max_helpers:
        raise BudgetError(f"helper budget {max_helpers} exhausted")
    scene = plan.goal.scene
    width, height = scene_dims
    diag = math.hypot(width, height)

    label = int(rng.integers(len(categories)))
    candidates = _existing_candidates(plan)
    if candidates:
        idx = candidates[0]
        current = scene.objects[idx]
        flags = ("noop",) if label == current.category else ()
        entry = PlanEntry(
            kind="existing",
            object_ref=idx,
            target_label=label,
            target_box=current.box,
            flags=flags,
        )
        unchanged = tuple(i for i in plan.unchanged if i != idx)
    else:
        raw = BBox(
            cx=rng.uniform(0.0, width),
            cy=rng.uniform(0.0, height),
            h=rng.uniform(0.05, 0.5) * diag,
            w=rng.uniform(0.05, 0.5) * diag,
        )
        box, flags = _fit_inside(raw, width, height)
        entry = PlanEntry(
            kind="phantom", object_ref=None, target_label=label, target_box=box, flags=flags
        )
        unchanged = plan.unchanged

    extended = replace(plan, entries=plan.entries + (entry,), unchanged=unchanged)
    extended.validate()
    return extended


# ---------------------------------------------------------------------------
# Audit serialization.
# ---------------------------------------------------------------------------

def _box_to_dict(box: BBox) -> dict:
    return {"cx": box.cx, "cy": box.cy, "h": box.h, "w": box.w}


def _box_from_dict(d: dict) -> BBox:
    return BBox(cx=d["cx"], cy=d["cy"], h=d["h"], w=d["w"])


def plan_to_dict(plan: AttackPlan, seed: Optional[int] = None) -> dict:
    return {
        "goal": {
            "scene": scene_to_dict(plan.goal.scene),
            "victim_index": plan.goal.victim_index,
            "target_label": plan.goal.target_label,
        },
        "entries": [
            {
                "kind": e.kind,
                "object_ref": e.object_ref,
                "target_label": e.target_label,
                "target_box": _box_to_dict(e.target_box),
                "confidence": e.confidence,
                "flags": list(e.flags),
            }
            for e in plan.entries
        ],
        "unchanged": list(plan.unchanged),
        "seed": seed,
    }


def plan_from_dict(d: dict) -> AttackPlan:
    goal = AttackGoal(
        scene=scene_from_dict(d["goal"]["scene"]),
        victim_index=d["goal"]["victim_index"],
        target_label=d["goal"]["target_label"],
    )
    entries = tuple(
        PlanEntry(
            kind=e["kind"],
            object_ref=e["object_ref"],
            target_label=e["target_label"],
            target_box=_box_from_dict(e["target_box"]),
            confidence=e.get("confidence", 1.0),
            flags=tuple(e.get("flags", ())),
        )
        for e in d["entries"]
    )
    plan = AttackPlan(goal=goal, entries=entries, unchanged=tuple(d["unchanged"]))
    plan.validate()
    return plan


def save_plan(plan: AttackPlan, path, seed: Optional[int] = None) -> None:
    with open(path, "w") as fh:
        json.dump(plan_to_dict(plan, seed), fh, indent=1)


def load_plan(path) -> AttackPlan:
    with open(path) as fh:
        return plan_from_dict(json.load(fh))
