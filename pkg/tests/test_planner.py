import math

import numpy as np
import pytest
from scipy import stats

from ctxattack.annotations import BBox, CategorySet, SceneAnnotation, SceneObject
from ctxattack.context import build_context_graph
from ctxattack.errors import BudgetError, DegenerateSceneError, InvalidSpecError
from ctxattack.planner import (
    AttackGoal,
    choose_target_label,
    extend_plan,
    load_plan,
    make_goal,
    new_plan,
    place_phantom,
    plan_from_dict,
    plan_to_dict,
    randomize_plan,
    save_plan,
)

from conftest import rng_for


def scene_with(categories, placed):
    """placed: list of (category, cx, cy) with small boxes."""
    return SceneAnnotation(
        image_id="s", width=1000, height=1000,
        objects=[SceneObject(c, BBox(cx=x, cy=y, h=40, w=40)) for c, x, y in placed],
    )


def peaked_graph(k, peak_row, peak_col, names=None, n_scenes=400, distance=0.1):
    """Corpus where category peak_row always co-occurs with peak_col at a
    planted distance, so its co-occurrence row is peaked at peak_col."""
    from ctxattack.annotations import SynthSpec, synth_corpus

    q = np.zeros((k, k))
    q[peak_row, peak_col] = 0.5
    q[peak_col, peak_row] = 0.5
    spec = SynthSpec(
        k=k, n_scenes=n_scenes, pair_joint=q, fixed_distance=distance,
        category_names=names, box_frac=(0.02, 0.04),
    )
    cats, scenes = synth_corpus(spec, seed=3)
    return cats, build_context_graph(scenes, cats)


class TestAttackGoal:
    def test_rejects_present_target(self):
        cats = CategorySet(["a", "b", "c"])
        scene = scene_with(cats, [(0, 100, 100), (1, 300, 300)])
        with pytest.raises(InvalidSpecError):
            AttackGoal(scene=scene, victim_index=0, target_label=1)

    def test_rejects_bad_victim_index(self):
        cats = CategorySet(["a", "b", "c"])
        scene = scene_with(cats, [(0, 100, 100)])
        with pytest.raises(InvalidSpecError):
            AttackGoal(scene=scene, victim_index=3, target_label=1)


class TestChooseTargetLabel:
    def test_single_absent_label_forced(self):
        cats = CategorySet([f"c{i}" for i in range(5)])
        scene = scene_with(cats, [(0, 100, 100), (1, 200, 200), (2, 300, 300), (3, 400, 400)])
        for seed in range(10):
            assert choose_target_label(scene, 0, cats, rng_for(seed)) == 4

    def test_uniform_over_absent(self):
        k = 20
        cats = CategorySet([f"c{i}" for i in range(k)])
        scene = scene_with(cats, [(0, 100, 100), (1, 200, 200), (2, 300, 300)])
        rng = rng_for(42)
        draws = np.array([choose_target_label(scene, 0, cats, rng) for _ in range(10_000)])
        assert set(np.unique(draws)).isdisjoint({0, 1, 2})
        observed = np.bincount(draws, minlength=k)[3:]
        expected = 10_000 / 17
        stat = ((observed - expected) ** 2 / expected).sum()
        assert stat < stats.chi2.ppf(0.99, df=16)

    def test_degenerate_scene(self):
        cats = CategorySet(["a", "b"])
        scene = scene_with(cats, [(0, 100, 100), (1, 200, 200)])
        with pytest.raises(DegenerateSceneError):
            choose_target_label(scene, 0, cats, rng_for(0))

    def test_reproducible(self):
        cats = CategorySet([f"c{i}" for i in range(10)])
        scene = scene_with(cats, [(0, 100, 100)])
        a = choose_target_label(scene, 0, cats, rng_for(9))
        b = choose_target_label(scene, 0, cats, rng_for(9))
        assert a == b


class TestExtendPlan:
    def test_one_hot_row_forces_relabel(self):
        cats, graph = peaked_graph(4, peak_row=3, peak_col=1)
        scene = scene_with(cats, [(0, 500, 500), (2, 520, 500)])
        goal = AttackGoal(scene=scene, victim_index=0, target_label=3)
        plan = extend_plan(new_plan(goal), graph, rng_for(1))
        entry = plan.entries[1]
        assert entry.kind == "existing"
        assert entry.object_ref == 1
        assert entry.target_label == 1  # forced by the one-hot row of label 3

    def test_victim_only_scene_spawns_phantoms(self):
        cats, graph = peaked_graph(4, peak_row=3, peak_col=1)
        scene = scene_with(cats, [(0, 500, 500)])
        goal = AttackGoal(scene=scene, victim_index=0, target_label=3)
        plan = new_plan(goal)
        for _ in range(2):
            plan = extend_plan(plan, graph, rng_for(2), max_helpers=2)
        assert [e.kind for e in plan.entries[1:]] == ["phantom", "phantom"]

    def test_existing_before_phantom_and_nearest_first(self):
        cats, graph = peaked_graph(5, peak_row=4, peak_col=2)
        scene = scene_with(cats, [(0, 500, 500), (1, 900, 900), (2, 540, 500)])
        goal = AttackGoal(scene=scene, victim_index=0, target_label=4)
        plan = new_plan(goal)
        plan = extend_plan(plan, graph, rng_for(3))
        assert plan.entries[1].object_ref == 2  # nearest existing object first
        plan = extend_plan(plan, graph, rng_for(3))
        assert plan.entries[2].object_ref == 1
        plan = extend_plan(plan, graph, rng_for(3))
        assert plan.entries[3].kind == "phantom"

    def test_monotone_growth_and_victim_fixity(self):
        cats, graph = peaked_graph(4, peak_row=3, peak_col=1)
        scene = scene_with(cats, [(0, 500, 500), (1, 300, 300), (2, 700, 700)])
        goal = AttackGoal(scene=scene, victim_index=0, target_label=3)
        plan = new_plan(goal)
        rng = rng_for(8)
        for h in range(1, 6):
            extended = extend_plan(plan, graph, rng, max_helpers=5)
            assert extended.entries[: len(plan.entries)] == plan.entries
            assert extended.helpers_used == h
            assert extended.entries[0].target_label == goal.target_label
            plan = extended

    def test_budget_exhaustion(self):
        cats, graph = peaked_graph(4, peak_row=3, peak_col=1)
        scene = scene_with(cats, [(0, 500, 500)])
        goal = AttackGoal(scene=scene, victim_index=0, target_label=3)
        plan = new_plan(goal)
        plan = extend_plan(plan, graph, rng_for(0), max_helpers=1)
        with pytest.raises(BudgetError):
            extend_plan(plan, graph, rng_for(0), max_helpers=1)

    def test_noop_draw_flagged_and_counted(self):
        # helper's current label equals the forced draw -> noop flag
        cats, graph = peaked_graph(4, peak_row=3, peak_col=1)
        scene = scene_with(cats, [(0, 500, 500), (1, 520, 500)])
        goal = AttackGoal(scene=scene, victim_index=0, target_label=3)
        plan = extend_plan(new_plan(goal), graph, rng_for(1))
        assert plan.entries[1].target_label == 1
        assert "noop" in plan.entries[1].flags
        assert plan.helpers_used == 1

    def test_fig1_style_scenario(self):
        """Victim bird -> table; the table row is peaked at chair, so the
        second bird is relabeled to chair, then a phantom chair appears."""
        names = ("bird", "chair", "person", "table")
        cats, graph = peaked_graph(4, peak_row=3, peak_col=1, names=names)
        scene = scene_with(cats, [(0, 400, 600), (0, 420, 200)])  # two birds
        goal = AttackGoal(scene=scene, victim_index=0, target_label=cats.id_of("table"))
        plan = new_plan(goal)
        plan = extend_plan(plan, graph, rng_for(4))
        assert plan.entries[1].kind == "existing"
        assert cats[plan.entries[1].target_label] == "chair"
        plan = extend_plan(plan, graph, rng_for(4))
        assert plan.entries[2].kind == "phantom"
        assert cats[plan.entries[2].target_label] == "chair"


class TestPlacePhantom:
    def test_zero_distance_concentric(self):
        cats, graph = peaked_graph(4, peak_row=3, peak_col=1, distance=0.0)
        anchor = BBox(cx=500, cy=500, h=40, w=40)
        box, flags = place_phantom(graph, anchor, 3, 1, (1000, 1000), rng_for(0))
        assert math.hypot(box.cx - 500, box.cy - 500) < 1e-9

    def test_mean_distance_circle(self):
        # planted distance 0.1 on a 1000x1000 image: radius 0.1 * 1000 * sqrt(2)
        cats, graph = peaked_graph(4, peak_row=3, peak_col=1, distance=0.1)
        anchor = BBox(cx=500, cy=500, h=40, w=40)
        expected_r = 0.1 * math.sqrt(2) * 1000
        for seed in range(5):
            box, flags = place_phantom(graph, anchor, 3, 1, (1000, 1000), rng_for(seed))
            if "translated" in flags or "clipped" in flags:
                continue
            r = math.hypot(box.cx - 500, box.cy - 500)
            assert abs(r - expected_r) < 1e-9

    def test_corner_anchor_translated_to_fit(self):
        cats, graph = peaked_graph(4, peak_row=3, peak_col=1, distance=0.45)
        anchor = BBox(cx=10, cy=10, h=20, w=20)
        hits = 0
        for seed in range(20):
            box, flags = place_phantom(graph, anchor, 3, 1, (1000, 1000), rng_for(seed))
            x0, y0, x1, y1 = box.corners
            assert 0 <= x0 and 0 <= y0 and x1 <= 1000 and y1 <= 1000
            hits += "translated" in flags or "clipped" in flags
        assert hits > 0

    def test_fallback_flags_propagate(self, three_scene_graph):
        # dog (1) has no distance/size samples -> fallback flags on placement
        anchor = BBox(cx=300, cy=200, h=40, w=40)
        box, flags = place_phantom(three_scene_graph, anchor, 1, 1, (640, 480), rng_for(0))
        assert "distance_fallback" in flags and "size_fallback" in flags


class TestRandomizePlan:
    def test_reproducible(self):
        cats = CategorySet([f"c{i}" for i in range(6)])
        scene = scene_with(cats, [(0, 500, 500), (1, 300, 300)])
        goal = AttackGoal(scene=scene, victim_index=0, target_label=5)
        mk = lambda seed: randomize_plan(
            new_plan(goal), cats, (1000, 1000), rng_for(seed)
        )
        assert plan_to_dict(mk(5)) == plan_to_dict(mk(5))

    def test_label_uniformity(self):
        k = 20
        cats = CategorySet([f"c{i}" for i in range(k)])
        scene = scene_with(cats, [(0, 500, 500), (1, 300, 300)])
        goal = AttackGoal(scene=scene, victim_index=0, target_label=19)
        rng = rng_for(77)
        draws = np.array([
            randomize_plan(new_plan(goal), cats, (1000, 1000), rng).entries[1].target_label
            for _ in range(10_000)
        ])
        observed = np.bincount(draws, minlength=k)
        expected = 10_000 / k
        stat = ((observed - expected) ** 2 / expected).sum()
        assert stat < stats.chi2.ppf(0.99, df=k - 1)

    def test_zero_helpers_is_baseline(self):
        cats = CategorySet(["a", "b", "c"])
        scene = scene_with(cats, [(0, 500, 500), (1, 300, 300)])
        goal = AttackGoal(scene=scene, victim_index=0, target_label=2)
        plan = new_plan(goal)
        assert plan.helpers_used == 0
        assert plan.entries[0].target_label == 2
        assert plan.unchanged == (1,)

    def test_phantom_sizes_in_declared_range(self):
        cats = CategorySet(["a", "b", "c"])
        scene = scene_with(cats, [(0, 500, 500)])
        goal = AttackGoal(scene=scene, victim_index=0, target_label=2)
        diag = math.hypot(1000, 1000)
        rng = rng_for(3)
        for _ in range(50):
            plan = randomize_plan(new_plan(goal), cats, (1000, 1000), rng)
            e = plan.entries[1]
            assert e.kind == "phantom"
            # clipping can only shrink below the sampled range
            assert e.target_box.h <= 0.5 * diag + 1e-9
            assert e.target_box.w <= 0.5 * diag + 1e-9


class TestPlanSerialization:
    def test_round_trip(self, tmp_path):
        cats, graph = peaked_graph(4, peak_row=3, peak_col=1)
        scene = scene_with(cats, [(0, 500, 500), (1, 300, 300)])
        goal = AttackGoal(scene=scene, victim_index=0, target_label=3)
        plan = extend_plan(new_plan(goal), graph, rng_for(1))
        save_plan(plan, tmp_path / "plan.json", seed=1)
        back = load_plan(tmp_path / "plan.json")
        assert plan_to_dict(back) == plan_to_dict(plan)

    def test_dict_round_trip_validates(self):
        cats = CategorySet(["a", "b", "c"])
        scene = scene_with(cats, [(0, 500, 500)])
        goal = AttackGoal(scene=scene, victim_index=0, target_label=2)
        plan = new_plan(goal)
        d = plan_to_dict(plan)
        assert plan_from_dict(d).entries == plan.entries


class TestMakeGoal:
    def test_target_absent_invariant(self):
        cats = CategorySet([f"c{i}" for i in range(6)])
        scene = scene_with(cats, [(0, 100, 100), (1, 300, 300)])
        for seed in range(20):
            goal = make_goal(scene, 0, cats, rng_for(seed))
            present = {o.category for o in scene.objects}
            assert goal.target_label not in present
