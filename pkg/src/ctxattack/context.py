"""Context graphs over a category vocabulary: a row-stochastic co-occurrence
matrix plus per-pair distance and size distributions, estimated from a
scene corpus.

Distances are L2 center distances divided by the image diagonal; sizes are
(h, w) divided by the diagonal, both therefore in [0, 1]. Distance cells are
symmetric and stored once per unordered pair; size cells are directional
(size of the column category conditioned on the row category being present).
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .annotations import CategorySet, SceneAnnotation, check_corpus
from .errors import GraphFormatError, InvalidSpecError

GRAPH_FORMAT_VERSION = 1


@dataclass(frozen=True)
class BinSpec:
    dist_bins: int = 32
    size_bins: int = 16


@dataclass
class CooccurrenceMatrix:
    """Row-stochastic k x k matrix of conditional co-occurrence probabilities."""

    k: int
    p: np.ndarray
    counts: np.ndarray
    uniform_rows: tuple[int, ...] = ()

    def row(self, i: int) -> np.ndarray:
        return self.p[i]

    def validate(self) -> None:
        if self.p.shape != (self.k, self.k):
            raise InvalidSpecError("co-occurrence matrix shape mismatch")
        if not np.all((self.p >= 0) & (self.p <= 1)):
            raise InvalidSpecError("co-occurrence entries must lie in [0, 1]")
        if np.abs(self.p.sum(axis=1) - 1.0).max() > 1e-9:
            raise InvalidSpecError("co-occurrence rows must sum to 1")


@dataclass
class DistanceHistogram:
    """Binned normalized-distance samples plus exact running mean."""

    bin_count: int
    counts: np.ndarray = None
    sum: float = 0.0
    n_samples: int = 0

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros(self.bin_count, dtype=np.int64)

    @property
    def edges(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.bin_count + 1)

    @property
    def mass(self) -> np.ndarray:
        if self.n_samples == 0:
            return np.zeros(self.bin_count)
        return self.counts / self.n_samples

    @property
    def mean(self) -> Optional[float]:
        return self.sum / self.n_samples if self.n_samples else None

    def add(self, d: float) -> None:
        b = min(int(d * self.bin_count), self.bin_count - 1)
        self.counts[b] += 1
        self.sum += d
        self.n_samples += 1


@dataclass
class SizeHistogram2D:
    """Binned normalized (h, w) samples plus exact running means."""

    bin_count: int
    counts: np.ndarray = None
    sum_h: float = 0.0
    sum_w: float = 0.0
    n_samples: int = 0

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros((self.bin_count, self.bin_count), dtype=np.int64)

    @property
    def edges_h(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.bin_count + 1)

    edges_w = edges_h

    @property
    def mass(self) -> np.ndarray:
        if self.n_samples == 0:
            return np.zeros((self.bin_count, self.bin_count))
        return self.counts / self.n_samples

    @property
    def mean_h(self) -> Optional[float]:
        return self.sum_h / self.n_samples if self.n_samples else None

    @property
    def mean_w(self) -> Optional[float]:
        return self.sum_w / self.n_samples if self.n_samples else None

    def add(self, h: float, w: float) -> None:
        bh = min(int(h * self.bin_count), self.bin_count - 1)
        bw = min(int(w * self.bin_count), self.bin_count - 1)
        self.counts[bh, bw] += 1
        self.sum_h += h
        self.sum_w += w
        self.n_samples += 1


@dataclass
class ContextGraph:
    categories: CategorySet
    cooccur: CooccurrenceMatrix
    dist: dict = field(default_factory=dict)  # (min(i,j), max(i,j)) -> DistanceHistogram
    size: dict = field(default_factory=dict)  # (i, j) -> SizeHistogram2D
    bins: BinSpec = BinSpec()
    count_mode: str = "pairs"

    @property
    def k(self) -> int:
        return len(self.categories)

    def dist_cell(self, i: int, j: int) -> DistanceHistogram:
        key = (min(i, j), max(i, j))
        if key not in self.dist:
            self.dist[key] = DistanceHistogram(self.bins.dist_bins)
        return self.dist[key]

    def size_cell(self, i: int, j: int) -> SizeHistogram2D:
        if (i, j) not in self.size:
            self.size[(i, j)] = SizeHistogram2D(self.bins.size_bins)
        return self.size[(i, j)]


def build_context_graph(
    corpus: Sequence[SceneAnnotation],
    categories: CategorySet,
    bins: BinSpec = BinSpec(),
    count_mode: str = "pairs",
    smoothing: float = 0.0,
) -> ContextGraph:
    """Estimate the three context structures from a corpus.

    ``count_mode`` selects the co-occurrence counting unit: "pairs" counts
    every ordered pair of distinct instances within a scene (self edges come
    from multi-instance scenes), "presence" counts scene-level joint presence
    (self edges require two instances of the category). Rows with no
    observations become uniform and are flagged.
    """
    if not corpus:
        raise InvalidSpecError("corpus must be non-empty")
    if count_mode not in ("pairs", "presence"):
        raise InvalidSpecError(f"unknown count_mode {count_mode!r}")
    check_corpus(corpus, categories)
    k = len(categories)
    counts = np.zeros((k, k), dtype=np.float64)
    graph = ContextGraph(
        categories=categories,
        cooccur=CooccurrenceMatrix(k=k, p=np.eye(k), counts=counts),
        bins=bins,
        count_mode=count_mode,
    )

    for scene in corpus:
        m = len(scene.objects)
        if m == 0:
            continue
        cats = np.array([o.category for o in scene.objects], dtype=np.intp)
        per_cat = np.bincount(cats, minlength=k).astype(np.float64)

        if count_mode == "pairs":
            counts += np.outer(per_cat, per_cat) - np.diag(per_cat)
        else:
            present = per_cat > 0
            block = np.outer(present, present).astype(np.float64)
            np.fill_diagonal(block, (per_cat >= 2).astype(np.float64))
            counts += block

        if m < 2:
            continue
        diag = scene.diagonal
        centers = np.array([(o.box.cx, o.box.cy) for o in scene.objects])
        for a in range(m):
            ca = int(cats[a])
            for b in range(a + 1, m):
                cb = int(cats[b])
                d = math.hypot(*(centers[a] - centers[b])) / diag
                graph.dist_cell(ca, cb).add(min(d, 1.0))
        present_cats = np.flatnonzero(per_cat)
        for b, obj in enumerate(scene.objects):
            cb = obj.category
            hn, wn = obj.box.h / diag, obj.box.w / diag
            for ci in present_cats:
                ci = int(ci)
                if ci == cb and per_cat[ci] < 2:
                    continue
                graph.size_cell(ci, cb).add(hn, wn)

    if smoothing > 0:
        counts = counts + smoothing
    row_sums = counts.sum(axis=1, keepdims=True)
    p = np.full((k, k), 1.0 / k)
    np.divide(counts, row_sums, out=p, where=row_sums > 0)
    uniform_rows = tuple(int(i) for i in np.flatnonzero(row_sums.ravel() == 0))
    graph.cooccur = CooccurrenceMatrix(k=k, p=p, counts=counts, uniform_rows=uniform_rows)
    graph.cooccur.validate()
    return graph


def sample_label(row: np.ndarray, rng: np.random.Generator) -> int:
    """Draw a category id from a row-stochastic probability row."""
    row = np.asarray(row, dtype=np.float64)
    if abs(row.sum() - 1.0) > 1e-6 or (row < 0).any():
        raise InvalidSpecError("sample_label requires a probability row")
    cum = np.cumsum(row)
    u = rng.random() * cum[-1]
    return int(min(np.searchsorted(cum, u, side="right"), len(row) - 1))


class MeanResult(NamedTuple):
    value: float
    fallback: bool


class SizeMeanResult(NamedTuple):
    h: float
    w: float
    fallback: bool


def distance_mean(graph: ContextGraph, i: int, j: int) -> MeanResult:
    """Exact mean normalized distance for the (i, j) pair.

    Empty cells fall back to the aggregate mean over row i, then to the
    aggregate over the whole graph, then to 0.25; any fallback is flagged.
    """
    cell = graph.dist.get((min(i, j), max(i, j)))
    if cell is not None and cell.n_samples > 0:
        return MeanResult(cell.mean, False)
    row_cells = [c for (a, b), c in graph.dist.items() if (a == i or b == i) and c.n_samples > 0]
    pool = row_cells or [c for c in graph.dist.values() if c.n_samples > 0]
    if pool:
        total = sum(c.sum for c in pool)
        n = sum(c.n_samples for c in pool)
        return MeanResult(total / n, True)
    return MeanResult(0.25, True)


def size_mean(graph: ContextGraph, i: int, j: int) -> SizeMeanResult:
    """Exact mean normalized (h, w) of category j conditioned on i; same
    fallback ladder as distance_mean."""
    cell = graph.size.get((i, j))
    if cell is not None and cell.n_samples > 0:
        return SizeMeanResult(cell.mean_h, cell.mean_w, False)
    row_cells = [c for (a, _), c in graph.size.items() if a == i and c.n_samples > 0]
    pool = row_cells or [c for c in graph.size.values() if c.n_samples > 0]
    if pool:
        n = sum(c.n_samples for c in pool)
        return SizeMeanResult(
            sum(c.sum_h for c in pool) / n, sum(c.sum_w for c in pool) / n, True
        )
    return SizeMeanResult(0.1, 0.1, True)


class RowPearson(NamedTuple):
    per_row: list
    average: float
    excluded: int


def row_pearson(
    a: CooccurrenceMatrix, b: CooccurrenceMatrix, mapping: Sequence[tuple[int, int]]
) -> RowPearson:
    """Pearson correlation of corresponding co-occurrence rows.

    ``mapping`` lists (index in a, index in b) pairs for the common
    categories; both matrices are restricted to those before correlating.
    Uses population normalization. Rows with zero variance on either side
    are excluded from the average and reported in ``excluded``.
    """
    a_idx = [m[0] for m in mapping]
    b_idx = [m[1] for m in mapping]
    if len(set(a_idx)) != len(a_idx) or len(set(b_idx)) != len(b_idx):
        raise InvalidSpecError("mapping must be injective on both sides")
    ra = a.p[np.ix_(a_idx, a_idx)]
    rb = b.p[np.ix_(b_idx, b_idx)]

    per_row = []
    excluded = 0
    kept = []
    for i in range(len(mapping)):
        x = ra[i] - ra[i].mean()
        y = rb[i] - rb[i].mean()
        sx = math.sqrt(float(x @ x))
        sy = math.sqrt(float(y @ y))
        if sx == 0.0 or sy == 0.0:
            per_row.append(float("nan"))
            excluded += 1
            continue
        r = float(x @ y) / (sx * sy)
        per_row.append(r)
        kept.append(r)
    average = float(np.mean(kept)) if kept else float("nan")
    return RowPearson(per_row, average, excluded)


# ---------------------------------------------------------------------------
# Serialization: one versioned, checksummed JSON document.
# ---------------------------------------------------------------------------

def _graph_payload(graph: ContextGraph) -> dict:
    return {
        "categories": list(graph.categories.names),
        "bins": {"dist": graph.bins.dist_bins, "size": graph.bins.size_bins},
        "count_mode": graph.count_mode,
        "cooccur": {
            "p": graph.cooccur.p.tolist(),
            "counts": graph.cooccur.counts.tolist(),
            "uniform_rows": list(graph.cooccur.uniform_rows),
        },
        "dist": {
            f"{i},{j}": {
                "counts": c.counts.tolist(),
                "sum": c.sum,
                "n": c.n_samples,
            }
            for (i, j), c in sorted(graph.dist.items())
        },
        "size": {
            f"{i},{j}": {
                "counts": c.counts.tolist(),
                "sum_h": c.sum_h,
                "sum_w": c.sum_w,
                "n": c.n_samples,
            }
            for (i, j), c in sorted(graph.size.items())
        },
    }


def _checksum(payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def save_graph(graph: ContextGraph, path) -> None:
    payload = _graph_payload(graph)
    doc = {"version": GRAPH_FORMAT_VERSION, "checksum": _checksum(payload), "graph": payload}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)


def load_graph(path) -> ContextGraph:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as e:
        raise GraphFormatError(f"{path}: not a valid graph file: {e}") from e
    if doc.get("version") != GRAPH_FORMAT_VERSION:
        raise GraphFormatError(
            f"{path}: unsupported graph version {doc.get('version')!r}, "
            f"expected {GRAPH_FORMAT_VERSION}"
        )
    payload = doc.get("graph", {})
    if _checksum(payload) != doc.get("checksum"):
        raise GraphFormatError(f"{path}: checksum mismatch, file corrupt or truncated")

    categories = CategorySet(payload["categories"])
    bins = BinSpec(dist_bins=payload["bins"]["dist"], size_bins=payload["bins"]["size"])
    co = payload["cooccur"]
    cooccur = CooccurrenceMatrix(
        k=len(categories),
        p=np.array(co["p"], dtype=np.float64),
        counts=np.array(co["counts"], dtype=np.float64),
        uniform_rows=tuple(co["uniform_rows"]),
    )
    graph = ContextGraph(
        categories=categories, cooccur=cooccur, bins=bins,
        count_mode=payload.get("count_mode", "pairs"),
    )
    for key, cell in payload["dist"].items():
        i, j = (int(t) for t in key.split(","))
        graph.dist[(i, j)] = DistanceHistogram(
            bin_count=bins.dist_bins,
            counts=np.array(cell["counts"], dtype=np.int64),
            sum=float(cell["sum"]),
            n_samples=int(cell["n"]),
        )
    for key, cell in payload["size"].items():
        i, j = (int(t) for t in key.split(","))
        graph.size[(i, j)] = SizeHistogram2D(
            bin_count=bins.size_bins,
            counts=np.array(cell["counts"], dtype=np.int64),
            sum_h=float(cell["sum_h"]),
            sum_w=float(cell["sum_w"]),
            n_samples=int(cell["n"]),
        )
    return graph


def graphs_equal(a: ContextGraph, b: ContextGraph) -> bool:
    """Structural equality, used by round-trip tests."""
    if a.categories != b.categories or a.count_mode != b.count_mode:
        return False
    if not np.array_equal(a.cooccur.p, b.cooccur.p):
        return False
    if not np.array_equal(a.cooccur.counts, b.cooccur.counts):
        return False
    if set(a.dist) != set(b.dist) or set(a.size) != set(b.size):
        return False
    for key, cell in a.dist.items():
        other = b.dist[key]
        if (
            cell.n_samples != other.n_samples
            or cell.sum != other.sum
            or not np.array_equal(cell.counts, other.counts)
        ):
            return False
    for key, cell in a.size.items():
        other = b.size[key]
        if (
            cell.n_samples != other.n_samples
            or cell.sum_h != other.sum_h
            or cell.sum_w != other.sum_w
            or not np.array_equal(cell.counts, other.counts)
        ):
            return False
    return True
