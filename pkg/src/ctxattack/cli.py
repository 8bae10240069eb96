"""Command-line interface.

Verbs: ingest, ctx {build,compare,inspect}, plan make, perturb run,
bbox eval, attack run, sweep run, report emit, synth {corpus,world}.
Exit codes: 0 success, 1 usage, 2 data error, 3 budget/infeasible.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import numpy as np

from . import KERNEL_BACKEND, annotations, context, detector, orchestrator, planner
from .blackbox import Detection, attack_success, iou, make_sim_blackbox
from .errors import (
    BudgetError,
    CtxAttackError,
    DegenerateSceneError,
    GraphFormatError,
    InvalidSpecError,
    ParseError,
)
from .planner import AttackGoal
from .worlds import WorldSpec, make_world

EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_BUDGET = 3


@click.group()
@click.option("--seed", type=int, default=0, show_default=True, help="Master seed.")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None,
              help="JSON attack config (AttackConfig fields).")
@click.option("--out", "out_dir", type=click.Path(), default=".", show_default=True,
              help="Output directory.")
@click.pass_context
def cli(ctx, seed, config_path, out_dir):
    """Context-aware sequential attacks on toy object detectors."""
    ctx.ensure_object(dict)
    ctx.obj["seed"] = seed
    ctx.obj["out"] = Path(out_dir)
    cfg = {}
    if config_path:
        with open(config_path) as fh:
            cfg = json.load(fh)
    ctx.obj["config"] = cfg


def _attack_config(obj, **overrides) -> orchestrator.AttackConfig:
    fields = dict(obj.get("config", {}))
    fields.update({k: v for k, v in overrides.items() if v is not None})
    return orchestrator.AttackConfig(**fields)


def _load_corpus(scenes_path, categories_path):
    scenes = annotations.read_scenes(scenes_path)
    categories = annotations.read_categories(categories_path)
    annotations.check_corpus(scenes, categories)
    return scenes, categories


def _echo_warnings(warnings):
    for w in warnings[:20]:
        click.echo(f"warning: {w}", err=True)
    if len(warnings) > 20:
        click.echo(f"... and {len(warnings) - 20} more warnings", err=True)


@cli.command()
@click.option("--coco", "coco_path", type=click.Path(exists=True), default=None)
@click.option("--voc", "voc_paths", type=click.Path(exists=True), multiple=True,
              help="VOC XML files (repeatable).")
@click.option("--map-voc-names/--no-map-voc-names", default=False,
              help="Map VOC category names to their COCO synonyms.")
@click.pass_context
def ingest(ctx, coco_path, voc_paths, map_voc_names):
    """Parse COCO JSON or VOC XML into the internal scene format."""
    out = ctx.obj["out"]
    out.mkdir(parents=True, exist_ok=True)
    if (coco_path is None) == (not voc_paths):
        raise click.UsageError("give exactly one of --coco or --voc")
    if coco_path:
        with open(coco_path, "rb") as fh:
            cats, scenes, warnings = annotations.parse_coco(fh.read())
    else:
        docs = []
        for p in voc_paths:
            with open(p, "rb") as fh:
                docs.append((p, fh.read()))
        cats, scenes, warnings = annotations.parse_voc(docs)
        if map_voc_names:
            cats = annotations.CategorySet(
                [annotations.voc_name_to_coco(n) for n in cats.names]
            )
    _echo_warnings(warnings)
    annotations.write_scenes(scenes, out / "scenes.jsonl")
    annotations.write_categories(cats, out / "categories.json")
    click.echo(f"wrote {len(scenes)} scenes, {len(cats)} categories -> {out}")


@cli.group(name="ctx")
def ctx_group():
    """Context-graph commands."""


@ctx_group.command("build")
@click.option("--scenes", "scenes_path", type=click.Path(exists=True), required=True)
@click.option("--categories", "categories_path", type=click.Path(exists=True), required=True)
@click.option("--dist-bins", type=int, default=32, show_default=True)
@click.option("--size-bins", type=int, default=16, show_default=True)
@click.option("--count-mode", type=click.Choice(["pairs", "presence"]), default="pairs",
              show_default=True)
@click.pass_context
def ctx_build(ctx, scenes_path, categories_path, dist_bins, size_bins, count_mode):
    """Estimate the context graph from a scene corpus."""
    scenes, categories = _load_corpus(scenes_path, categories_path)
    graph = context.build_context_graph(
        scenes, categories,
        bins=context.BinSpec(dist_bins=dist_bins, size_bins=size_bins),
        count_mode=count_mode,
    )
    out = ctx.obj["out"]
    out.mkdir(parents=True, exist_ok=True)
    context.save_graph(graph, out / "graph.json")
    if graph.cooccur.uniform_rows:
        names = [categories[i] for i in graph.cooccur.uniform_rows]
        click.echo(f"warning: unobserved rows set uniform: {names}", err=True)
    click.echo(f"wrote graph.json (k={graph.k}) -> {out}")


@ctx_group.command("compare")
@click.option("--graph-a", type=click.Path(exists=True), required=True)
@click.option("--graph-b", type=click.Path(exists=True), required=True)
@click.option("--voc-coco/--common-names", default=False,
              help="Align via the built-in VOC->COCO synonym table instead of exact names.")
def ctx_compare(graph_a, graph_b, voc_coco):
    """Average per-row Pearson correlation over the common categories."""
    a = context.load_graph(graph_a)
    b = context.load_graph(graph_b)
    mapping = []
    for i, name in enumerate(a.categories.names):
        target = annotations.voc_name_to_coco(name) if voc_coco else name
        if target in b.categories:
            mapping.append((i, b.categories.id_of(target)))
    if not mapping:
        raise InvalidSpecError("no common categories between the two graphs")
    result = context.row_pearson(a.cooccur, b.cooccur, mapping)
    for (i, _), r in zip(mapping, result.per_row):
        click.echo(f"{a.categories[i]}: {r:.4f}")
    click.echo(f"common categories: {len(mapping)}; excluded rows: {result.excluded}")
    click.echo(f"average row pearson: {result.average:.4f}")


@ctx_group.command("inspect")
@click.option("--graph", "graph_path", type=click.Path(exists=True), required=True)
@click.option("--row", "row_name", required=True, help="Category name.")
def ctx_inspect(graph_path, row_name):
    """Print one co-occurrence row with distance/size means."""
    graph = context.load_graph(graph_path)
    if row_name not in graph.categories:
        raise InvalidSpecError(f"unknown category {row_name!r}")
    i = graph.categories.id_of(row_name)
    row = graph.cooccur.row(i)
    order = np.argsort(row)[::-1]
    for j in order:
        if row[j] == 0:
            continue
        d = context.distance_mean(graph, i, int(j))
        s = context.size_mean(graph, i, int(j))
        click.echo(
            f"{graph.categories[int(j)]}: p={row[j]:.4f} "
            f"dist_mean={d.value:.4f}{'*' if d.fallback else ''} "
            f"size_mean=({s.h:.4f},{s.w:.4f}){'*' if s.fallback else ''}"
        )


@cli.group(name="plan")
def plan_group():
    """Attack-plan commands."""


@plan_group.command("make")
@click.option("--scenes", "scenes_path", type=click.Path(exists=True), required=True)
@click.option("--categories", "categories_path", type=click.Path(exists=True), required=True)
@click.option("--graph", "graph_path", type=click.Path(exists=True), required=True)
@click.option("--image-id", required=True)
@click.option("--victim", "victim_index", type=int, required=True)
@click.option("--target", "target_name", default=None,
              help="Target category name; sampled uniformly from absent labels when omitted.")
@click.option("--helpers", type=int, default=5, show_default=True)
@click.option("--mode", type=click.Choice(["context", "random", "baseline"]),
              default="context", show_default=True)
@click.pass_context
def plan_make(ctx, scenes_path, categories_path, graph_path, image_id, victim_index,
              target_name, helpers, mode):
    """Compose an attack plan for one scene."""
    scenes, categories = _load_corpus(scenes_path, categories_path)
    graph = context.load_graph(graph_path)
    scene = next((s for s in scenes if s.image_id == image_id), None)
    if scene is None:
        raise ParseError(f"image id {image_id!r} not found in {scenes_path}")
    seed = ctx.obj["seed"]
    rng = orchestrator.substream(seed, image_id, "plan")
    if target_name is None:
        goal = planner.make_goal(scene, victim_index, categories, rng)
    else:
        goal = AttackGoal(scene, victim_index, categories.id_of(target_name))
    plan = planner.new_plan(goal)
    if mode == "baseline":
        helpers = 0
    for _ in range(helpers):
        if mode == "random":
            plan = planner.randomize_plan(
                plan, categories, (scene.width, scene.height), rng, max_helpers=helpers
            )
        else:
            plan = planner.extend_plan(plan, graph, rng, max_helpers=helpers)
    out = ctx.obj["out"]
    out.mkdir(parents=True, exist_ok=True)
    planner.save_plan(plan, out / "plan.json", seed=seed)
    click.echo(f"wrote plan.json ({plan.helpers_used} helpers) -> {out}")


@cli.group(name="perturb")
def perturb_group():
    """Perturbation commands."""


@perturb_group.command("run")
@click.option("--plan", "plan_path", type=click.Path(exists=True), required=True)
@click.option("--detectors", "detectors_path", type=click.Path(exists=True), required=True)
@click.option("--budget", type=float, default=None, help="L-infinity budget override.")
@click.option("--contrast", type=float, default=None, help="Render contrast override.")
@click.pass_context
def perturb_run(ctx, plan_path, detectors_path, budget, contrast):
    """Run the sign-step attack for a saved plan against an ensemble."""
    from .perturb import ifgsm_attack

    plan = planner.load_plan(plan_path)
    detectors, alphas = detector.load_detectors(detectors_path)
    config = _attack_config(ctx.obj, linf_budget=budget, render_contrast=contrast)
    scene = plan.goal.scene
    k = detectors[0].n_classes
    image = detector.render_scene(scene, k, contrast=config.render_contrast)
    perturbed, state, trace = ifgsm_attack(
        image, plan, detectors, alphas, config.perturb
    )
    out = ctx.obj["out"]
    out.mkdir(parents=True, exist_ok=True)
    _, scored = detector.forward(detectors[0], perturbed)
    dets = [
        {"label": d.label, "cx": d.box.cx, "cy": d.box.cy, "h": d.box.h, "w": d.box.w}
        for d in scored
    ]
    with open(out / "detections.json", "w") as fh:
        json.dump(dets, fh, indent=1)
    summary = {
        "max_delta": state.max_abs(),
        "iterations": state.iterations,
        "loss_first": trace[0],
        "loss_last": trace[-1],
        "kernel_backend": KERNEL_BACKEND,
    }
    with open(out / "perturb.json", "w") as fh:
        json.dump(summary, fh, indent=1)
    click.echo(json.dumps(summary))


@cli.group(name="bbox")
def bbox_group():
    """Detection-evaluation commands."""


@bbox_group.command("eval")
@click.option("--pred", "pred_path", type=click.Path(exists=True), required=True,
              help="Detections JSON: [{label, cx, cy, h, w}, ...].")
@click.option("--goal", "goal_path", type=click.Path(exists=True), required=True,
              help="Goal JSON: {scene, victim_index, target_label}.")
def bbox_eval(pred_path, goal_path):
    """Evaluate the targeted-success criterion for saved detections."""
    with open(pred_path) as fh:
        preds = json.load(fh)
    with open(goal_path) as fh:
        goal_doc = json.load(fh)
    goal = AttackGoal(
        scene=annotations.scene_from_dict(goal_doc["scene"]),
        victim_index=goal_doc["victim_index"],
        target_label=goal_doc["target_label"],
    )
    detections = [
        Detection(
            label=int(p["label"]),
            box=annotations.BBox(cx=p["cx"], cy=p["cy"], h=p["h"], w=p["w"]),
        )
        for p in preds
    ]
    ok = attack_success(detections, goal)
    best = max(
        (iou(d.box, goal.victim_box) for d in detections if d.label == goal.target_label),
        default=0.0,
    )
    click.echo(json.dumps({"success": ok, "best_target_iou": best}))


@cli.group(name="attack")
def attack_group():
    """Sequential-attack commands."""


@attack_group.command("run")
@click.option("--scenes", "scenes_path", type=click.Path(exists=True), required=True)
@click.option("--categories", "categories_path", type=click.Path(exists=True), required=True)
@click.option("--graph", "graph_path", type=click.Path(exists=True), required=True)
@click.option("--detectors", "detectors_path", type=click.Path(exists=True), required=True)
@click.option("--blackbox", "blackbox_path", type=click.Path(exists=True), default=None,
              help="Blackbox detector JSON; defaults to a tau=0 sim blackbox.")
@click.option("--image-id", required=True)
@click.option("--mode", type=click.Choice(list(orchestrator.MODES)), default=None)
@click.option("--budget", type=float, default=None)
@click.pass_context
def attack_run(ctx, scenes_path, categories_path, graph_path, detectors_path,
               blackbox_path, image_id, mode, budget):
    """Run the full sequential attack loop on one scene."""
    scenes, categories = _load_corpus(scenes_path, categories_path)
    graph = context.load_graph(graph_path)
    detectors, alphas = detector.load_detectors(detectors_path)
    if blackbox_path:
        bb_list, _ = detector.load_detectors(blackbox_path)
        bb = bb_list[0]
    else:
        bb = make_sim_blackbox(ctx.obj["seed"] + 1, detectors[0].geometry,
                               base=detectors[0], tau=0.0)
    scene = next((s for s in scenes if s.image_id == image_id), None)
    if scene is None:
        raise ParseError(f"image id {image_id!r} not found in {scenes_path}")
    config = _attack_config(ctx.obj, mode=mode, linf_budget=budget)
    seed = ctx.obj["seed"]
    goal_rng = orchestrator.substream(seed, image_id, "goal")
    victim = int(goal_rng.integers(len(scene.objects)))
    goal = planner.make_goal(scene, victim, categories, goal_rng)
    rng = orchestrator.substream(seed, image_id, config.mode, config.linf_budget)
    outcome = orchestrator.run_sequential_attack(
        scene, goal, graph, detectors, alphas, bb, config, rng
    )
    out = ctx.obj["out"]
    out.mkdir(parents=True, exist_ok=True)
    doc = orchestrator.outcome_to_dict(outcome)
    doc["goal"] = {
        "image_id": image_id,
        "victim_index": victim,
        "target_label": goal.target_label,
    }
    with open(out / "outcome.json", "w") as fh:
        json.dump(doc, fh, indent=1)
    click.echo(json.dumps({k: doc[k] for k in ("success", "helpers_used", "queries_used")}))


@cli.group(name="sweep")
def sweep_group():
    """Experiment sweeps."""


@sweep_group.command("run")
@click.option("--scenes", "scenes_path", type=click.Path(exists=True), required=True)
@click.option("--categories", "categories_path", type=click.Path(exists=True), required=True)
@click.option("--graph", "graph_path", type=click.Path(exists=True), required=True)
@click.option("--detectors", "detectors_path", type=click.Path(exists=True), required=True)
@click.option("--blackbox", "blackbox_path", type=click.Path(exists=True), default=None)
@click.option("--modes", default="baseline,random,context", show_default=True)
@click.option("--budgets", default="10,20,30", show_default=True)
@click.option("--workers", type=int, default=1, show_default=True)
@click.pass_context
def sweep_run(ctx, scenes_path, categories_path, graph_path, detectors_path,
              blackbox_path, modes, budgets, workers):
    """Fooling-rate grid over (mode, budget, helper cap)."""
    scenes, categories = _load_corpus(scenes_path, categories_path)
    graph = context.load_graph(graph_path)
    detectors, alphas = detector.load_detectors(detectors_path)
    if blackbox_path:
        bb_list, _ = detector.load_detectors(blackbox_path)
        bb = bb_list[0]
    else:
        bb = make_sim_blackbox(ctx.obj["seed"] + 1, detectors[0].geometry,
                               base=detectors[0], tau=0.0)
    config = _attack_config(ctx.obj)
    mode_list = tuple(m.strip() for m in modes.split(",") if m.strip())
    budget_list = tuple(float(b) for b in budgets.split(",") if b.strip())
    result = orchestrator.run_sweep(
        scenes, categories, graph, detectors, alphas, bb, config,
        mode_list, budget_list, ctx.obj["seed"], workers=workers,
    )
    csv_path, json_path = orchestrator.emit_results(result, ctx.obj["out"])
    click.echo(f"wrote {csv_path} and {json_path} "
               f"({result.attempted} scenes, {result.skipped} skipped)")


@cli.group(name="report")
def report_group():
    """Result re-emission."""


@report_group.command("emit")
@click.option("--result", "result_path", type=click.Path(exists=True), required=True,
              help="sweep.json produced by `sweep run`.")
@click.pass_context
def report_emit(ctx, result_path):
    """Re-emit CSV/JSON from a saved sweep result."""
    with open(result_path) as fh:
        result = orchestrator.sweep_from_dict(json.load(fh))
    csv_path, json_path = orchestrator.emit_results(result, ctx.obj["out"])
    click.echo(f"wrote {csv_path} and {json_path}")


@cli.group(name="synth")
def synth_group():
    """Synthetic corpora and worlds."""


@synth_group.command("corpus")
@click.option("--k", type=int, default=8, show_default=True)
@click.option("--scenes", "n_scenes", type=int, default=1000, show_default=True)
@click.pass_context
def synth_corpus_cmd(ctx, k, n_scenes):
    """Generate an i.i.d.-uniform synthetic corpus in the internal format."""
    spec = annotations.SynthSpec(
        k=k, n_scenes=n_scenes, objects_per_scene=(2, 6),
        marginal=np.full(k, 1.0 / k),
    )
    cats, scenes = annotations.synth_corpus(spec, ctx.obj["seed"])
    out = ctx.obj["out"]
    out.mkdir(parents=True, exist_ok=True)
    annotations.write_scenes(scenes, out / "scenes.jsonl")
    annotations.write_categories(cats, out / "categories.json")
    click.echo(f"wrote {len(scenes)} scenes -> {out}")


@synth_group.command("world")
@click.option("--k", type=int, default=8, show_default=True)
@click.option("--scenes", "n_scenes", type=int, default=200, show_default=True)
@click.option("--structured/--unstructured", default=True, show_default=True)
@click.option("--tau", type=float, default=0.0, show_default=True,
              help="Blackbox similarity to the first surrogate.")
@click.pass_context
def synth_world(ctx, k, n_scenes, structured, tau):
    """Generate a full benchmark world: corpus, graph, ensemble, blackbox."""
    spec = WorldSpec(k=k, n_scenes=n_scenes, structured=structured)
    world = make_world(spec, ctx.obj["seed"])
    out = ctx.obj["out"]
    out.mkdir(parents=True, exist_ok=True)
    annotations.write_scenes(world.scenes, out / "scenes.jsonl")
    annotations.write_categories(world.categories, out / "categories.json")
    context.save_graph(world.graph, out / "graph.json")
    detector.save_detectors(world.surrogates, world.alphas, out / "detectors.json")
    bb = make_sim_blackbox(ctx.obj["seed"] + 1, spec.geometry,
                           base=world.surrogates[0], tau=tau)
    detector.save_detectors([bb], [1.0], out / "blackbox.json")
    config = {
        "render_contrast": spec.color_contrast,
        "linf_budget": 20.0,
        "max_helpers": 5,
        "max_queries": 6,
    }
    with open(out / "config.json", "w") as fh:
        json.dump(config, fh, indent=1)
    click.echo(f"wrote world ({n_scenes} scenes, k={k}) -> {out}")


def main() -> int:
    try:
        cli(standalone_mode=False)
        return 0
    except click.UsageError as e:
        e.show()
        return EXIT_USAGE
    except click.ClickException as e:
        e.show()
        return EXIT_USAGE
    except click.Abort:
        return EXIT_USAGE
    except BudgetError as e:
        click.echo(f"budget error: {e}", err=True)
        return EXIT_BUDGET
    except DegenerateSceneError as e:
        click.echo(f"infeasible: {e}", err=True)
        return EXIT_BUDGET
    except (ParseError, GraphFormatError, InvalidSpecError, CtxAttackError) as e:
        click.echo(f"data error: {e}", err=True)
        return EXIT_DATA
    except OSError as e:
        click.echo(f"i/o error: {e}", err=True)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
