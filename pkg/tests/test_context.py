import copy
import json
import math

import numpy as np
import pytest
from scipy import stats

from ctxattack.annotations import (
    BBox,
    CategorySet,
    SceneAnnotation,
    SceneObject,
    SynthSpec,
    synth_corpus,
)
from ctxattack.context import (
    BinSpec,
    CooccurrenceMatrix,
    build_context_graph,
    distance_mean,
    graphs_equal,
    load_graph,
    row_pearson,
    sample_label,
    save_graph,
    size_mean,
)
from ctxattack.errors import GraphFormatError, InvalidSpecError

from conftest import rng_for


def expected_conditional_from_joint(q: np.ndarray) -> np.ndarray:
    """Independent oracle: each pair scene (a, b) ~ Q contributes ordered
    instance pairs (a, b) and (b, a), so E[count] ~ Q + Q^T, row-normalized.
    Spelled out with loops to stay independent of the library path."""
    k = q.shape[0]
    expected = np.zeros((k, k))
    for i in range(k):
        for j in range(k):
            expected[i, j] = q[i, j] + q[j, i]
    for i in range(k):
        total = expected[i].sum()
        if total > 0:
            expected[i] /= total
        else:
            expected[i] = 1.0 / k
    return expected


class TestBuildCooccurrence:
    def test_single_pair_scene(self):
        categories = CategorySet(["table", "chair"])
        scene = SceneAnnotation(
            image_id="s", width=100, height=100,
            objects=[
                SceneObject(0, BBox(cx=30, cy=50, h=10, w=10)),
                SceneObject(1, BBox(cx=70, cy=50, h=10, w=10)),
            ],
        )
        graph = build_context_graph([scene], categories)
        assert graph.cooccur.counts[0, 1] == 1
        assert graph.cooccur.counts[1, 0] == 1
        assert graph.cooccur.counts[0, 0] == 0
        assert graph.cooccur.p[0, 1] == 1.0
        assert graph.cooccur.p[1, 0] == 1.0

    def test_three_scene_fixture_rows(self, three_scene_graph):
        p = three_scene_graph.cooccur.p
        # chair row: 2 chair-chair + 3 chair-table ordered pair events
        assert np.allclose(p[0], [0.4, 0.0, 0.6])
        # dog row: never co-occurs, uniform fallback
        assert np.allclose(p[1], [1 / 3] * 3)
        assert three_scene_graph.cooccur.uniform_rows == (1,)
        # table row: all mass on chair
        assert np.allclose(p[2], [1.0, 0.0, 0.0])

    def test_row_stochastic(self, three_scene_graph):
        rows = three_scene_graph.cooccur.p.sum(axis=1)
        assert np.abs(rows - 1.0).max() < 1e-9

    def test_dominant_pair_tops_its_row(self):
        # A corpus dominated by table-chair pairs: that edge leads the row.
        q = np.zeros((3, 3))
        q[0, 1] = q[1, 0] = 0.4
        q[2, 2] = 0.2
        spec = SynthSpec(k=3, n_scenes=2000, pair_joint=q,
                         category_names=("table", "chair", "dog"))
        cats, scenes = synth_corpus(spec, seed=5)
        graph = build_context_graph(scenes, cats)
        table_row = graph.cooccur.p[0]
        assert table_row.argmax() == 1
        assert table_row[1] > 0.9

    def test_planted_joint_recovered(self):
        rng = rng_for(0)
        k = 3
        q = rng.uniform(0.2, 1.0, (k, k))
        q /= q.sum()
        expected = expected_conditional_from_joint(q)
        spec = SynthSpec(k=k, n_scenes=10_000, pair_joint=q)
        cats, scenes = synth_corpus(spec, seed=21)
        graph = build_context_graph(scenes, cats)
        assert np.abs(graph.cooccur.p - expected).max() < 0.02

    def test_estimator_consistency_across_sizes(self):
        q = np.array([[0.05, 0.30, 0.05],
                      [0.10, 0.05, 0.20],
                      [0.05, 0.15, 0.05]])
        expected = expected_conditional_from_joint(q)
        for seed in (1, 2, 3):
            devs = []
            for n in (100, 10_000):
                spec = SynthSpec(k=3, n_scenes=n, pair_joint=q)
                cats, scenes = synth_corpus(spec, seed=seed)
                graph = build_context_graph(scenes, cats)
                devs.append(np.abs(graph.cooccur.p - expected).max())
            assert devs[-1] < 0.02
            assert devs[-1] < devs[0]

    def test_presence_mode_counts_scenes(self):
        categories = CategorySet(["a", "b"])
        scenes = [
            SceneAnnotation(
                image_id=f"s{i}", width=100, height=100,
                objects=[
                    SceneObject(0, BBox(cx=20, cy=20, h=5, w=5)),
                    SceneObject(0, BBox(cx=40, cy=40, h=5, w=5)),
                    SceneObject(1, BBox(cx=60, cy=60, h=5, w=5)),
                ],
            )
            for i in range(3)
        ]
        graph = build_context_graph(scenes, categories, count_mode="presence")
        # each scene counts once per pair; self edge needs two instances
        assert graph.cooccur.counts[0, 1] == 3
        assert graph.cooccur.counts[0, 0] == 3
        assert graph.cooccur.counts[1, 1] == 0

    def test_empty_corpus_rejected(self):
        with pytest.raises(InvalidSpecError):
            build_context_graph([], CategorySet(["a", "b"]))

    def test_scale_invariance(self, three_scene_fixture):
        """Uniformly scaling scenes leaves dist and size graphs unchanged."""
        categories, scenes = three_scene_fixture
        g1 = build_context_graph(scenes, categories)
        s = 2.75
        scaled = [
            SceneAnnotation(
                image_id=sc.image_id, width=sc.width * s, height=sc.height * s,
                objects=[
                    SceneObject(o.category, BBox(
                        cx=o.box.cx * s, cy=o.box.cy * s, h=o.box.h * s, w=o.box.w * s
                    ))
                    for o in sc.objects
                ],
            )
            for sc in scenes
        ]
        g2 = build_context_graph(scaled, categories)
        for key, cell in g1.dist.items():
            other = g2.dist[key]
            assert np.array_equal(cell.counts, other.counts)
            assert abs(cell.sum - other.sum) < 1e-9
        for key, cell in g1.size.items():
            other = g2.size[key]
            assert np.array_equal(cell.counts, other.counts)
            assert abs(cell.sum_h - other.sum_h) < 1e-9
            assert abs(cell.sum_w - other.sum_w) < 1e-9


class TestDistanceAndSizeCells:
    def test_distance_symmetric_storage(self, three_scene_graph):
        assert three_scene_graph.dist_cell(0, 2) is three_scene_graph.dist_cell(2, 0)

    def test_fixture_distances(self, three_scene_graph):
        cell = three_scene_graph.dist_cell(0, 2)
        # scene a: 80px apart on an 800px diagonal; scene b: two more pairs
        assert cell.n_samples == 3
        expected = (80 + math.hypot(50, 60) + math.hypot(220, 100)) / 800
        assert abs(cell.sum - expected) < 1e-12

    def test_mass_sums_to_one(self, three_scene_graph):
        for cell in three_scene_graph.dist.values():
            if cell.n_samples:
                assert abs(cell.mass.sum() - 1.0) < 1e-9
        for cell in three_scene_graph.size.values():
            if cell.n_samples:
                assert abs(cell.mass.sum() - 1.0) < 1e-9

    def test_size_conditioning_direction(self, three_scene_graph):
        # sizes of table (2) given chair (0): one table per scene a and b
        cell = three_scene_graph.size[(0, 2)]
        assert cell.n_samples == 2
        # sizes of chair given chair: only scene b has two chairs
        cell_cc = three_scene_graph.size[(0, 0)]
        assert cell_cc.n_samples == 2
        # dog co-occurs with nothing, not even itself
        assert (1, 1) not in three_scene_graph.size


class TestMeans:
    def test_two_sample_mean(self):
        categories = CategorySet(["a", "b"])
        scenes = []
        for i, d in enumerate((0.2, 0.4)):
            w, h = 1000.0, 0.0
            diag = 1000.0
            scenes.append(
                SceneAnnotation(
                    image_id=f"s{i}", width=800, height=600,
                    objects=[
                        SceneObject(0, BBox(cx=100, cy=300, h=10, w=10)),
                        SceneObject(1, BBox(cx=100 + d * 1000, cy=300, h=10, w=10)),
                    ],
                )
            )
        graph = build_context_graph(scenes, categories)
        got = distance_mean(graph, 0, 1)
        assert not got.fallback
        assert abs(got.value - 0.3) < 1e-12

    def test_planted_fixed_distance(self):
        q = np.full((2, 2), 0.25)
        spec = SynthSpec(k=2, n_scenes=500, pair_joint=q, fixed_distance=0.25)
        cats, scenes = synth_corpus(spec, seed=2)
        graph = build_context_graph(scenes, cats)
        for i, j in ((0, 0), (0, 1), (1, 1)):
            if (min(i, j), max(i, j)) in graph.dist:
                got = distance_mean(graph, i, j)
                assert abs(got.value - 0.25) < 1e-12

    def test_empty_cell_falls_back_to_row(self, three_scene_graph):
        # dog (1) has no distance samples anywhere in its row -> global pool
        got = distance_mean(three_scene_graph, 1, 2)
        assert got.fallback
        pool = [c for c in three_scene_graph.dist.values() if c.n_samples]
        expected = sum(c.sum for c in pool) / sum(c.n_samples for c in pool)
        assert abs(got.value - expected) < 1e-12

    def test_size_mean_values(self, three_scene_graph):
        got = size_mean(three_scene_graph, 0, 2)
        assert not got.fallback
        # tables in scenes a and b, normalized by each scene diagonal (800)
        assert abs(got.h - (100 / 800 + 90 / 800) / 2) < 1e-12
        assert abs(got.w - (200 / 800 + 180 / 800) / 2) < 1e-12

    def test_size_mean_fallback_flag(self, three_scene_graph):
        got = size_mean(three_scene_graph, 1, 1)
        assert got.fallback


class TestSampleLabel:
    def test_one_hot_row(self):
        row = np.zeros(8)
        row[4] = 1.0
        rng = rng_for(0)
        assert all(sample_label(row, rng) == 4 for _ in range(50))

    def test_uniform_chi_square(self):
        k, n = 5, 100_000
        row = np.full(k, 1.0 / k)
        rng = rng_for(123)
        draws = np.array([sample_label(row, rng) for _ in range(n)])
        observed = np.bincount(draws, minlength=k)
        expected = n / k
        stat = ((observed - expected) ** 2 / expected).sum()
        assert stat < stats.chi2.ppf(0.99, df=k - 1)

    def test_peaked_row_dominates(self):
        # 0.46 on one label, remainder spread over the rest
        k = 8
        row = np.full(k, 0.54 / (k - 1))
        row[2] = 0.46
        rng = rng_for(7)
        draws = np.array([sample_label(row, rng) for _ in range(10_000)])
        counts = np.bincount(draws, minlength=k)
        assert counts.argmax() == 2

    def test_rejects_non_probability_row(self):
        with pytest.raises(InvalidSpecError):
            sample_label(np.array([0.5, 0.2]), rng_for(0))

    def test_deterministic_given_state(self):
        row = np.array([0.3, 0.3, 0.4])
        a = [sample_label(row, rng_for(55)) for _ in range(10)]
        b = [sample_label(row, rng_for(55)) for _ in range(10)]
        assert a == b


class TestRowPearson:
    def test_self_correlation_is_one(self, three_scene_graph):
        m = three_scene_graph.cooccur
        mapping = [(i, i) for i in range(m.k)]
        got = row_pearson(m, m, mapping)
        finite = [r for r in got.per_row if not math.isnan(r)]
        assert all(abs(r - 1.0) < 1e-12 for r in finite)
        assert abs(got.average - 1.0) < 1e-12

    def test_exact_opposites_give_minus_one(self):
        a = CooccurrenceMatrix(k=2, p=np.array([[0.8, 0.2], [0.3, 0.7]]),
                               counts=np.zeros((2, 2)))
        b = CooccurrenceMatrix(k=2, p=np.array([[0.2, 0.8], [0.7, 0.3]]),
                               counts=np.zeros((2, 2)))
        got = row_pearson(a, b, [(0, 0), (1, 1)])
        assert all(abs(r + 1.0) < 1e-12 for r in got.per_row)
        assert abs(got.average + 1.0) < 1e-12

    def test_zero_variance_rows_excluded(self):
        a = CooccurrenceMatrix(k=2, p=np.array([[0.5, 0.5], [0.9, 0.1]]),
                               counts=np.zeros((2, 2)))
        got = row_pearson(a, a, [(0, 0), (1, 1)])
        assert got.excluded == 1
        assert math.isnan(got.per_row[0])
        assert abs(got.average - 1.0) < 1e-12

    def test_non_injective_mapping_rejected(self, three_scene_graph):
        m = three_scene_graph.cooccur
        with pytest.raises(InvalidSpecError):
            row_pearson(m, m, [(0, 0), (1, 0)])

    def test_population_normalization(self):
        # hand-computed population pearson for a known pair of rows
        a = CooccurrenceMatrix(k=3, p=np.array([
            [0.5, 0.3, 0.2], [0.1, 0.6, 0.3], [0.2, 0.2, 0.6]
        ]), counts=np.zeros((3, 3)))
        b = CooccurrenceMatrix(k=3, p=np.array([
            [0.4, 0.4, 0.2], [0.2, 0.5, 0.3], [0.3, 0.1, 0.6]
        ]), counts=np.zeros((3, 3)))
        x = a.p[0] - a.p[0].mean()
        y = b.p[0] - b.p[0].mean()
        expected = (x @ y) / math.sqrt((x @ x) * (y @ y))
        got = row_pearson(a, b, [(i, i) for i in range(3)])
        assert abs(got.per_row[0] - expected) < 1e-12


class TestSerialization:
    def test_round_trip(self, tmp_path, three_scene_graph):
        path = tmp_path / "graph.json"
        save_graph(three_scene_graph, path)
        back = load_graph(path)
        assert graphs_equal(three_scene_graph, back)

    def test_truncated_file_fails_checksum(self, tmp_path, three_scene_graph):
        path = tmp_path / "graph.json"
        save_graph(three_scene_graph, path)
        blob = path.read_text()
        path.write_text(blob[: len(blob) // 2])
        with pytest.raises(GraphFormatError):
            load_graph(path)

    def test_tampered_payload_fails_checksum(self, tmp_path, three_scene_graph):
        path = tmp_path / "graph.json"
        save_graph(three_scene_graph, path)
        doc = json.loads(path.read_text())
        doc["graph"]["cooccur"]["p"][0][0] = 0.123
        path.write_text(json.dumps(doc))
        with pytest.raises(GraphFormatError, match="checksum"):
            load_graph(path)

    def test_version_mismatch(self, tmp_path, three_scene_graph):
        path = tmp_path / "graph.json"
        save_graph(three_scene_graph, path)
        doc = json.loads(path.read_text())
        doc["version"] = 99
        path.write_text(json.dumps(doc))
        with pytest.raises(GraphFormatError, match="version"):
            load_graph(path)

    def test_golden_file(self, tmp_path, three_scene_graph):
        from pathlib import Path

        golden = Path(__file__).parent / "data" / "graph_golden.json"
        path = tmp_path / "graph.json"
        save_graph(three_scene_graph, path)
        assert path.read_bytes() == golden.read_bytes()
