"""Hard-label blackbox interface: bounded queries, IoU, and the targeted
success criterion.

The query path deliberately returns Detection values carrying only a label
and a box, never scores or logits, so callers cannot leak soft information
out of the blackbox.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .annotations import BBox
from .detector import DetectorGeometry, ToyDetector, forward, make_random_detector
from .errors import BudgetError
from .planner import AttackGoal

DEFAULT_MAX_QUERIES = 6
SUCCESS_IOU = 0.3


@dataclass(frozen=True)
class Detection:
    """Hard-label detection: label and box only."""

    label: int
    box: BBox


@dataclass
class QueryLedger:
    queries_used: int = 0
    max_queries: int = DEFAULT_MAX_QUERIES

    @property
    def remaining(self) -> int:
        return self.max_queries - self.queries_used

    def charge(self) -> None:
        if self.queries_used >= self.max_queries:
            raise BudgetError(f"query budget {self.max_queries} exhausted")
        self.queries_used += 1


def query(blackbox: ToyDetector, image: np.ndarray, ledger: QueryLedger) -> list[Detection]:
    """One hard-label query; charges the ledger before evaluating."""
    ledger.charge()
    _, scored = forward(blackbox, image)
    return [Detection(label=d.label, box=d.box) for d in scored]


def iou(a: BBox, b: BBox) -> float:
    ax0, ay0, ax1, ay1 = a.corners
    bx0, by0, bx1, by1 = b.corners
    ix0, iy0 = max(ax0, bx0), max(ay0, by0)
    ix1, iy1 = min(ax1, bx1), min(ay1, by1)
    if ix1 <= ix0 or iy1 <= iy0:
        return 0.0
    inter = (ix1 - ix0) * (iy1 - iy0)
    union = a.area + b.area - inter
    return inter / union


def attack_success(detections: list[Detection], goal: AttackGoal) -> bool:
    """True iff some detection carries the target label with IoU strictly
    above 0.3 against the victim's original box."""
    victim_box = goal.victim_box
    return any(
        d.label == goal.target_label and iou(d.box, victim_box) > SUCCESS_IOU
        for d in detections
    )


def make_sim_blackbox(
    seed: int,
    geometry: DetectorGeometry,
    base: ToyDetector | None = None,
    tau: float = 0.0,
    name: str | None = None,
) -> ToyDetector:
    """Simulated blackbox victim in the same toy family.

    With no ``base``, an independently seeded random detector. With a base
    surrogate, every parameter array is the convex mixture
    tau * base + (1 - tau) * fresh-noise, so tau=1 is whitebox-identical and
    tau=0 is independent; tau controls surrogate-victim similarity.
    """
    if not (0.0 <= tau <= 1.0):
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    fresh = make_random_detector(seed, geometry, name=name or f"blackbox-{seed}")
    if base is None:
        return fresh
    if base.geometry != geometry:
        fresh = make_random_detector(seed, base.geometry, name=name or f"blackbox-{seed}")
    mix = None
    if base.context_mix is not None:
        noise_rng = np.random.Generator(np.random.PCG64(seed + 1))
        fresh_mix = noise_rng.uniform(0.0, 1.0, size=base.context_mix.shape)
        mix = tau * base.context_mix + (1.0 - tau) * fresh_mix
    return ToyDetector(
        name=name or f"blackbox-{seed}-tau{tau:g}",
        grid=base.grid,
        pool=base.pool,
        n_classes=base.n_classes,
        weights=tau * base.weights + (1.0 - tau) * fresh.weights,
        bias=tau * base.bias + (1.0 - tau) * fresh.bias,
        context_mix=mix,
        context_strength=base.context_strength,
        context_range=base.context_range,
        score_threshold=base.score_threshold,
    )
