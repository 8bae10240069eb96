"""The sequential attack loop and experiment sweeps.

One round per helper count: perturb against the current plan, query the
blackbox once, stop on success or when helper/query budgets run out. The
hard-label feedback is used only as the stopping criterion. Sweeps derive
per-scene RNG substreams from the master seed and the image id, so scene
order cannot affect any result.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .annotations import CategorySet, SceneAnnotation
from .blackbox import Detection, QueryLedger, attack_success, query
from .context import ContextGraph
from .detector import ToyDetector, forward, render_scene
from .errors import BudgetError, DegenerateSceneError, InvalidSpecError
from .perturb import PerturbConfig, ifgsm_attack
from .planner import (
    AttackGoal,
    AttackPlan,
    extend_plan,
    make_goal,
    new_plan,
    randomize_plan,
)

MODES = ("baseline", "random", "context")
WILSON_Z = 1.959963984540054  # two-sided 95%


@dataclass(frozen=True)
class AttackConfig:
    mode: str = "context"
    linf_budget: float = 10.0
    max_helpers: int = 5
    max_queries: int = 6
    eps_step: float = 2.0
    max_iters: int = 50
    warm_start: bool = True
    render_contrast: float = 1.0  # scene-to-pixels convention, world-dependent

    def __post_init__(self):
        if self.mode not in MODES:
            raise InvalidSpecError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.max_queries < 1:
            raise InvalidSpecError("max_queries must be at least 1")
        if self.mode == "baseline" and self.max_helpers != 0:
            object.__setattr__(self, "max_helpers", 0)

    @property
    def perturb(self) -> PerturbConfig:
        return PerturbConfig(
            eps_step=self.eps_step,
            linf_budget=self.linf_budget,
            max_iters=self.max_iters,
            warm_start=self.warm_start,
        )


@dataclass
class AttackOutcome:
    success: bool
    helpers_used: int
    queries_used: int
    step_successes: list[bool]
    whitebox_success: dict[str, bool]
    final_max_delta: float
    traces: list[list[float]]

    def success_at_cap(self, h: int) -> bool:
        return self.success and self.helpers_used <= h


def run_sequential_attack(
    scene: SceneAnnotation,
    goal: AttackGoal,
    graph: ContextGraph,
    surrogates: Sequence[ToyDetector],
    alphas: Sequence[float],
    blackbox: ToyDetector,
    config: AttackConfig,
    rng: np.random.Generator,
    image: Optional[np.ndarray] = None,
) -> AttackOutcome:
    """Grow the plan one helper at a time until the blackbox is fooled.

    The blackbox is queried once per helper count, including the zero-helper
    round, so a full run spends max_helpers + 1 queries. Query exhaustion
    becomes a failed outcome, never an exception.
    """
    k = len(graph.categories)
    if image is None:
        image = render_scene(scene, k, contrast=config.render_contrast)
    ledger = QueryLedger(max_queries=config.max_queries)
    plan = new_plan(goal)
    state = None
    traces: list[list[float]] = []
    step_successes: list[bool] = []
    success = False
    perturbed = image

    while True:
        perturbed, state, trace = ifgsm_attack(
            image, plan, surrogates, alphas, config.perturb,
            state if config.warm_start else None,
        )
        traces.append(trace)
        detections = query(blackbox, perturbed, ledger)
        ok = attack_success(detections, goal)
        step_successes.append(ok)
        if ok:
            success = True
            break
        if plan.helpers_used >= config.max_helpers:
            break
        if ledger.remaining == 0:
            break
        if config.mode == "context":
            plan = extend_plan(plan, graph, rng, max_helpers=config.max_helpers)
        else:
            plan = randomize_plan(
                plan, graph.categories, (scene.width, scene.height), rng,
                max_helpers=config.max_helpers,
            )

    whitebox = {}
    for det in surrogates:
        _, scored = forward(det, perturbed)
        hard = [Detection(label=d.label, box=d.box) for d in scored]
        whitebox[det.name] = attack_success(hard, goal)

    return AttackOutcome(
        success=success,
        helpers_used=plan.helpers_used,
        queries_used=ledger.queries_used,
        step_successes=step_successes,
        whitebox_success=whitebox,
        final_max_delta=state.max_abs(),
        traces=traces,
    )


def outcome_to_dict(outcome: AttackOutcome) -> dict:
    return {
        "success": outcome.success,
        "helpers_used": outcome.helpers_used,
        "queries_used": outcome.queries_used,
        "step_successes": outcome.step_successes,
        "whitebox_success": outcome.whitebox_success,
        "final_max_delta": outcome.final_max_delta,
        "traces": outcome.traces,
    }


# ---------------------------------------------------------------------------
# Sweeps.
# ---------------------------------------------------------------------------

def derive_seed(master_seed: int, *parts) -> int:
    """Stable substream seed from the master seed and string-able parts."""
    label = "|".join([str(master_seed), *map(str, parts)])
    return int.from_bytes(hashlib.sha256(label.encode()).digest()[:16], "big")


def substream(master_seed: int, *parts) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(master_seed, *parts)))


def wilson_interval(successes: int, n: int, z: float = WILSON_Z) -> tuple[float, float]:
    if n == 0:
        return 0.0, 1.0
    phat = successes / n
    denom = 1.0 + z * z / n
    center = (phat + z * z / (2 * n)) / denom
    half = z * math.sqrt(phat * (1 - phat) / n + z * z / (4 * n * n)) / denom
    return max(0.0, center - half), min(1.0, center + half)


@dataclass(frozen=True)
class SweepCell:
    mode: str
    budget: float
    helpers: int
    successes: int
    n: int

    @property
    def rate(self) -> float:
        return self.successes / self.n if self.n else 0.0

    @property
    def interval(self) -> tuple[float, float]:
        return wilson_interval(self.successes, self.n)


@dataclass
class SweepResult:
    master_seed: int
    attempted: int
    skipped: int
    cells: list[SweepCell] = field(default_factory=list)

    def cell(self, mode: str, budget: float, helpers: int) -> SweepCell:
        for c in self.cells:
            if c.mode == mode and c.budget == budget and c.helpers == helpers:
                return c
        raise KeyError((mode, budget, helpers))


def _attack_instance(
    scene: SceneAnnotation,
    categories: CategorySet,
    graph: ContextGraph,
    surrogates: Sequence[ToyDetector],
    alphas: Sequence[float],
    blackbox: ToyDetector,
    base: AttackConfig,
    modes: Sequence[str],
    budgets: Sequence[float],
    master_seed: int,
):
    """All (mode, budget) outcomes for one scene; None when the scene has
    no valid goal."""
    if not scene.objects:
        return None
    goal_rng = substream(master_seed, scene.image_id, "goal")
    victim = int(goal_rng.integers(len(scene.objects)))
    try:
        goal = make_goal(scene, victim, categories, goal_rng)
    except DegenerateSceneError:
        return None
    k = len(categories)
    image = render_scene(scene, k, contrast=base.render_contrast)
    out = []
    for mode in modes:
        for budget in budgets:
            config = replace(base, mode=mode, linf_budget=budget)
            rng = substream(master_seed, scene.image_id, mode, budget)
            outcome = run_sequential_attack(
                scene, goal, graph, surrogates, alphas, blackbox, config, rng, image=image
            )
            out.append((mode, float(budget), outcome.success, outcome.helpers_used))
    return out


def _instance_star(args):
    return _attack_instance(*args)


def run_sweep(
    scenes: Sequence[SceneAnnotation],
    categories: CategorySet,
    graph: ContextGraph,
    surrogates: Sequence[ToyDetector],
    alphas: Sequence[float],
    blackbox: ToyDetector,
    base: AttackConfig,
    modes: Sequence[str],
    budgets: Sequence[float],
    master_seed: int,
    workers: int = 1,
) -> SweepResult:
    """Fooling rates over the (mode, budget, helper-cap) grid.

    One sequential run at the full helper budget per (scene, mode, budget)
    yields every helper-cap point: success under cap h means the run
    succeeded by step h, which matches an independent capped run because
    substream seeds make the plan sequence a prefix-stable function of the
    scene. The result is a pure function of (scenes, graph, config, seed).
    """
    if not scenes:
        raise InvalidSpecError("sweep needs at least one scene")
    for mode in modes:
        if mode not in MODES:
            raise InvalidSpecError(f"unknown mode {mode!r}")

    tasks = [
        (scene, categories, graph, surrogates, alphas, blackbox, base, modes, budgets, master_seed)
        for scene in scenes
    ]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_instance_star, tasks, chunksize=4))
    else:
        results = [_attack_instance(*t) for t in tasks]

    caps = range(base.max_helpers + 1)
    counts: dict[tuple[str, float, int], list[int]] = {
        (mode, float(b), h): [0, 0] for mode in modes for b in budgets for h in caps
    }
    attempted = skipped = 0
    for res in results:
        if res is None:
            skipped += 1
            continue
        attempted += 1
        for mode, budget, success, helpers_used in res:
            for h in caps:
                bucket = counts[(mode, budget, h)]
                bucket[1] += 1
                if success and helpers_used <= h:
                    bucket[0] += 1

    cells = [
        SweepCell(mode=mode, budget=budget, helpers=h, successes=s, n=n)
        for (mode, budget, h), (s, n) in sorted(counts.items())
    ]
    return SweepResult(master_seed=master_seed, attempted=attempted, skipped=skipped, cells=cells)


# ---------------------------------------------------------------------------
# Result emission: long-format CSV plus JSON, stable order, no plotting.
# ---------------------------------------------------------------------------

CSV_COLUMNS = ("mode", "budget", "helpers", "rate", "lo", "hi", "n")


def sweep_to_dict(result: SweepResult) -> dict:
    return {
        "master_seed": result.master_seed,
        "attempted": result.attempted,
        "skipped": result.skipped,
        "cells": [
            {
                "mode": c.mode,
                "budget": c.budget,
                "helpers": c.helpers,
                "successes": c.successes,
                "n": c.n,
            }
            for c in result.cells
        ],
    }


def sweep_from_dict(d: dict) -> SweepResult:
    return SweepResult(
        master_seed=d["master_seed"],
        attempted=d["attempted"],
        skipped=d["skipped"],
        cells=[
            SweepCell(
                mode=c["mode"],
                budget=float(c["budget"]),
                helpers=int(c["helpers"]),
                successes=int(c["successes"]),
                n=int(c["n"]),
            )
            for c in d["cells"]
        ],
    )


def emit_results(result: SweepResult, out_dir) -> tuple[Path, Path]:
    """Write sweep.csv and sweep.json under out_dir; returns both paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "sweep.csv"
    json_path = out_dir / "sweep.json"

    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for c in sorted(result.cells, key=lambda c: (c.mode, c.budget, c.helpers)):
            lo, hi = c.interval
            writer.writerow(
                [c.mode, format(c.budget, "g"), c.helpers,
                 f"{c.rate:.6f}", f"{lo:.6f}", f"{hi:.6f}", c.n]
            )
    with open(json_path, "w") as fh:
        json.dump(sweep_to_dict(result), fh, indent=1, sort_keys=True)
    return csv_path, json_path
