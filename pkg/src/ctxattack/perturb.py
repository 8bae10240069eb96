"""The perturbation machine: desired-output rasterization, per-detector and
ensemble losses with exact pixel gradients, and the iterative sign-step
update with L-infinity projection and pixel clipping.

Each iteration updates delta <- delta - eps * sign(grad), then projects
delta into [-budget, +budget] and evaluates at clip(image + delta, 0, 255),
so both bounds hold after every iteration exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .detector import ToyDetector, cell_of_point, cell_rect, clean_cell_labels, coupling_weights
from .errors import GeometryError, InvalidSpecError, NonFiniteLossError
from .kernels import loss_and_grad as _kernel_loss_and_grad
from .planner import AttackPlan

DEFAULT_EPS_STEP = 2.0
DEFAULT_MAX_ITERS = 50


@dataclass(frozen=True)
class DesiredOutput:
    """Per-cell training targets derived from an attack plan.

    Cells holding a plan entry's box center carry that entry's label and
    confidence (ties go to the entry whose center is nearest the cell
    center); every other cell is frozen at its clean-image argmax.
    """

    grid: int
    targets: np.ndarray  # (grid*grid,) int64, background = n_classes
    confidence: np.ndarray  # (grid*grid,) float64


def rasterize_plan(
    detector: ToyDetector,
    plan: AttackPlan,
    clean_labels: np.ndarray,
    height: float,
    width: float,
) -> DesiredOutput:
    targets = clean_labels.astype(np.int64).copy()
    confidence = np.ones(detector.grid * detector.grid, dtype=np.float64)
    claims: dict[int, tuple[float, int]] = {}
    for e_idx, entry in enumerate(plan.entries):
        box = entry.target_box
        cell = cell_of_point(detector.grid, height, width, box.cx, box.cy)
        center = cell_rect(detector.grid, height, width, cell)
        d = math.hypot(box.cx - center.cx, box.cy - center.cy)
        if cell not in claims or d < claims[cell][0]:
            claims[cell] = (d, e_idx)
    for cell, (_, e_idx) in claims.items():
        entry = plan.entries[e_idx]
        targets[cell] = entry.target_label
        confidence[cell] = entry.confidence
    return DesiredOutput(grid=detector.grid, targets=targets, confidence=confidence)


def _check_desired(detector: ToyDetector, desired: DesiredOutput) -> None:
    n = detector.grid * detector.grid
    if desired.grid != detector.grid or desired.targets.shape != (n,):
        raise GeometryError("desired output does not match detector grid")


def loss_and_grad_single(
    detector: ToyDetector, image: np.ndarray, desired: DesiredOutput
) -> tuple[float, np.ndarray]:
    """Confidence-weighted mean cross-entropy over cells and its gradient."""
    detector.check_image(image)
    _check_desired(detector, desired)
    couple = None
    if detector.context_strength != 0.0 and detector.context_mix is not None:
        couple = coupling_weights(detector.grid, detector.context_range)
    return _kernel_loss_and_grad(
        np.ascontiguousarray(image, dtype=np.float64),
        detector.weights,
        detector.bias,
        detector.context_mix,
        detector.context_strength,
        couple,
        detector.grid,
        detector.pool,
        desired.targets,
        desired.confidence,
    )


def loss(detector: ToyDetector, image: np.ndarray, desired: DesiredOutput) -> float:
    return loss_and_grad_single(detector, image, desired)[0]


def grad_wrt_image(detector: ToyDetector, image: np.ndarray, desired: DesiredOutput) -> np.ndarray:
    return loss_and_grad_single(detector, image, desired)[1]


def check_alphas(alphas: Sequence[float], n: int) -> None:
    if len(alphas) != n:
        raise InvalidSpecError(f"{len(alphas)} alphas for {n} detectors")
    if any(a <= 0 for a in alphas):
        raise InvalidSpecError("ensemble weights must be strictly positive")
    if abs(sum(alphas) - 1.0) > 1e-9:
        raise InvalidSpecError(f"ensemble weights must sum to 1, got {sum(alphas)}")


def ensemble_loss_and_grad(
    detectors: Sequence[ToyDetector],
    alphas: Sequence[float],
    image: np.ndarray,
    desireds: Sequence[DesiredOutput],
) -> tuple[float, np.ndarray]:
    """Convex combination of per-detector losses and gradients.

    Summation order is the detector order, so results are deterministic.
    """
    check_alphas(alphas, len(detectors))
    total_loss = 0.0
    total_grad = np.zeros_like(image, dtype=np.float64)
    for det, alpha, desired in zip(detectors, alphas, desireds):
        l, g = loss_and_grad_single(det, image, desired)
        total_loss += alpha * l
        total_grad += alpha * g
    return total_loss, total_grad


@dataclass(frozen=True)
class PerturbConfig:
    eps_step: float = DEFAULT_EPS_STEP
    linf_budget: float = 10.0
    max_iters: int = DEFAULT_MAX_ITERS
    warm_start: bool = True

    def validate(self) -> None:
        if self.eps_step <= 0 or self.linf_budget <= 0 or self.max_iters < 1:
            raise InvalidSpecError(f"invalid perturbation config: {self}")


@dataclass
class PerturbationState:
    delta: np.ndarray
    eps_step: float
    linf_budget: float
    iterations: int = 0

    def max_abs(self) -> float:
        return float(np.abs(self.delta).max()) if self.delta.size else 0.0


def ifgsm_attack(
    image: np.ndarray,
    plan: AttackPlan,
    detectors: Sequence[ToyDetector],
    alphas: Sequence[float],
    config: PerturbConfig,
    state: Optional[PerturbationState] = None,
) -> tuple[np.ndarray, PerturbationState, list[float]]:
    """Run the sign-step loop against the plan's desired outputs.

    Every detector rasterizes its own desired output from the same plan,
    freezing non-plan cells at their clean-image argmax. A warm ``state``
    continues from an earlier delta (re-projected if the budget shrank).
    Returns (clipped perturbed image, new state, per-iteration loss trace).
    """
    config.validate()
    check_alphas(alphas, len(detectors))
    image = np.ascontiguousarray(image, dtype=np.float64)
    H, W = image.shape[:2]

    desireds = [
        rasterize_plan(det, plan, clean_cell_labels(det, image), H, W) for det in detectors
    ]

    if state is None:
        delta = np.zeros_like(image)
        prior_iters = 0
    else:
        delta = np.clip(state.delta, -config.linf_budget, config.linf_budget)
        prior_iters = state.iterations

    trace: list[float] = []
    for _ in range(config.max_iters):
        x = np.clip(image + delta, 0.0, 255.0)
        value, grad = ensemble_loss_and_grad(detectors, alphas, x, desireds)
        if not math.isfinite(value):
            raise NonFiniteLossError(f"loss became non-finite: {value}", trace)
        trace.append(value)
        delta -= config.eps_step * np.sign(grad)
        np.clip(delta, -config.linf_budget, config.linf_budget, out=delta)

    new_state = PerturbationState(
        delta=delta,
        eps_step=config.eps_step,
        linf_budget=config.linf_budget,
        iterations=prior_iters + config.max_iters,
    )
    return np.clip(image + delta, 0.0, 255.0), new_state, trace
